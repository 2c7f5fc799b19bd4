//! Benchmark map functions and the registry workers resolve task names in.
//!
//! Each processor maps one wire value to one wire value. When both the item
//! and the task parameters are JSON objects, parameters fill in keys the item
//! leaves out, so a job can fix e.g. the hashcash block once and stream only
//! nonce ranges.

pub mod blur;
pub mod collatz;
pub mod hashcash;
pub mod interleave;
pub mod raytrace;

use std::fmt;
use std::time::Instant;

use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::lender::Mutant;
use crate::protocol::TaskSpec;

pub use blur::{box_blur, GrayImage};
pub use collatz::{collatz_steps, parse_natural};
pub use hashcash::hashcash_search;
pub use interleave::{interleave_check, InterleaveReport};
pub use raytrace::{render_frame, SceneFrame};

/// A deterministic failure of one item. Reported back as an error record for
/// that index; the item is not retried.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{message}")]
pub struct ItemError {
    pub message: String,
}

impl ItemError {
    pub fn new(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown processor {0:?}")]
pub struct UnknownProcessor(pub String);

pub type ApplyFn = fn(&Map<String, Value>, &Value) -> Result<Value, ItemError>;

#[derive(Clone, Copy)]
pub struct ProcessorBinding {
    pub name: &'static str,
    pub apply: ApplyFn,
}

impl fmt::Debug for ProcessorBinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProcessorBinding").field("name", &self.name).finish()
    }
}

pub const REGISTRY: &[ProcessorBinding] = &[
    ProcessorBinding {
        name: "collatz",
        apply: apply_collatz,
    },
    ProcessorBinding {
        name: "hashcash",
        apply: apply_hashcash,
    },
    ProcessorBinding {
        name: "blur",
        apply: apply_blur,
    },
    ProcessorBinding {
        name: "raytrace",
        apply: apply_raytrace,
    },
    ProcessorBinding {
        name: "rand-test",
        apply: apply_rand_test,
    },
];

pub fn lookup(name: &str) -> Result<ProcessorBinding, UnknownProcessor> {
    REGISTRY
        .iter()
        .find(|p| p.name == name)
        .copied()
        .ok_or_else(|| UnknownProcessor(name.to_owned()))
}

pub fn names() -> impl Iterator<Item = &'static str> {
    REGISTRY.iter().map(|p| p.name)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Processed {
    pub outcome: Result<Value, ItemError>,
    pub elapsed_ms: f64,
}

/// Applies the task's processor to one value and times it.
pub fn process_item(task: &TaskSpec, value: &Value) -> Result<Processed, UnknownProcessor> {
    let binding = lookup(&task.processor)?;
    let started = Instant::now();
    let outcome = (binding.apply)(&task.params, value);
    Ok(Processed {
        outcome,
        elapsed_ms: started.elapsed().as_secs_f64() * 1000.0,
    })
}

fn with_defaults(params: &Map<String, Value>, value: &Value) -> Value {
    match value {
        Value::Object(item) if !params.is_empty() => {
            let mut merged = params.clone();
            merged.extend(item.iter().map(|(k, v)| (k.clone(), v.clone())));
            Value::Object(merged)
        }
        _ => value.clone(),
    }
}

fn parse_args<T: DeserializeOwned>(
    processor: &str,
    params: &Map<String, Value>,
    value: &Value,
) -> Result<T, ItemError> {
    serde_json::from_value(with_defaults(params, value))
        .map_err(|e| ItemError::new(format!("{processor}: bad input: {e}")))
}

fn apply_collatz(_: &Map<String, Value>, value: &Value) -> Result<Value, ItemError> {
    let n = match value {
        Value::String(text) => parse_natural(text)?,
        other => return Err(ItemError::new(format!("collatz expects a decimal string, got {other}"))),
    };
    collatz_steps(&n).map(Value::from)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HashcashArgs {
    block: String,
    difficulty: u32,
    nonce_start: u64,
    nonce_count: u64,
}

fn apply_hashcash(params: &Map<String, Value>, value: &Value) -> Result<Value, ItemError> {
    let args: HashcashArgs = parse_args("hashcash", params, value)?;
    if args.difficulty > 256 {
        return Err(ItemError::new("hashcash difficulty must be within 0..=256"));
    }
    if args.nonce_count == 0 {
        return Err(ItemError::new("hashcash nonce_count must be positive"));
    }
    Ok(
        hashcash_search(&args.block, args.difficulty, args.nonce_start, args.nonce_count)
            .map_or(Value::Null, Value::from),
    )
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BlurArgs {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    radius: usize,
}

fn apply_blur(params: &Map<String, Value>, value: &Value) -> Result<Value, ItemError> {
    let args: BlurArgs = parse_args("blur", params, value)?;
    let img = GrayImage::new(args.width, args.height, args.pixels)?;
    let out = box_blur(&img, args.radius);
    Ok(json!({"width": out.width, "height": out.height, "pixels": out.pixels}))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RaytraceArgs {
    t: u64,
    #[serde(rename = "F")]
    frames: u64,
    width: usize,
    height: usize,
}

fn apply_raytrace(params: &Map<String, Value>, value: &Value) -> Result<Value, ItemError> {
    let args: RaytraceArgs = parse_args("raytrace", params, value)?;
    let frame = SceneFrame::new(args.t, args.frames, args.width, args.height)?;
    let out = render_frame(&frame);
    Ok(json!({
        "ppm_base64": base64::engine::general_purpose::STANDARD.encode(&out.ppm),
        "hash": out.hash,
    }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RandTestArgs {
    seed: u64,
    ops: u64,
    #[serde(default)]
    mutant: Option<String>,
}

fn apply_rand_test(params: &Map<String, Value>, value: &Value) -> Result<Value, ItemError> {
    let args: RandTestArgs = parse_args("rand-test", params, value)?;
    if args.ops == 0 {
        return Err(ItemError::new("rand-test ops must be positive"));
    }
    let mutant = match args.mutant.as_deref() {
        None => None,
        Some(name) => Some(Mutant::from_name(name).ok_or_else(|| ItemError::new(format!("unknown mutant {name:?}")))?),
    };
    let report = interleave_check(args.seed, args.ops, mutant);
    Ok(serde_json::to_value(report).expect("report serializes"))
}

/// The `k`-th input of a synthetic stream for `processor`, used by local
/// benchmarks. Parameters given for the job are merged in by the processor.
pub fn sample_input(processor: &str, k: u64) -> Result<Value, UnknownProcessor> {
    lookup(processor)?;
    Ok(match processor {
        "collatz" => {
            // 2^128 + odd offsets: every input takes a few thousand steps
            let base: u128 = u128::MAX;
            Value::String(format!("{}", base - 2 * u128::from(k)))
        }
        "hashcash" => json!({
            "block": "pvc-bench",
            "difficulty": 16,
            "nonce_start": k * 10_000,
            "nonce_count": 10_000,
        }),
        "blur" => {
            let (w, h) = (64usize, 64usize);
            let mut rng = crate::splitmix::SplitMix64::new(k);
            let pixels: Vec<u8> = (0..w * h).map(|_| rng.below(256) as u8).collect();
            json!({"width": w, "height": h, "pixels": pixels, "radius": 2})
        }
        "raytrace" => json!({"t": k % 32, "F": 32, "width": 96, "height": 96}),
        "rand-test" => json!({"seed": k, "ops": 200}),
        _ => unreachable!("registry and samples cover the same names"),
    })
}
