//! Renders frames of a fixed animated scene: a unit sphere lit by a directional
//! light that circles around it over the course of the animation.
//!
//! Scene: unit sphere at the origin; pinhole camera at `(0, 0, -3)` looking
//! down `+z` with `+y` up and a 60° vertical field of view; light from azimuth
//! `2πt/F` at 45° elevation, where azimuth 0 points back towards the camera;
//! Lambertian shading with no ambient term; black background. Output is
//! grayscale written as RGB.

use std::f64::consts::PI;
use std::ops::{Add, Mul};

use super::ItemError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneFrame {
    pub t: u64,
    pub frames: u64,
    pub width: usize,
    pub height: usize,
}

impl SceneFrame {
    pub fn new(t: u64, frames: u64, width: usize, height: usize) -> Result<Self, ItemError> {
        if frames == 0 || t >= frames {
            return Err(ItemError::new(format!("frame index {t} outside 0..{frames}")));
        }
        if width == 0 || height == 0 {
            return Err(ItemError::new("frame dimensions must be positive"));
        }
        Ok(Self {
            t,
            frames,
            width,
            height,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedFrame {
    /// Binary PPM (P6, maxval 255).
    pub ppm: Vec<u8>,
    /// FNV-1a 64 of the RGB pixel bytes, 16 lowercase hex digits.
    pub hash: String,
}

#[derive(Debug, Clone, Copy)]
struct Vec3 {
    x: f64,
    y: f64,
    z: f64,
}

impl Vec3 {
    const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    fn normalized(self) -> Vec3 {
        let len = self.dot(self).sqrt();
        Vec3::new(self.x / len, self.y / len, self.z / len)
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

const EYE: Vec3 = Vec3::new(0.0, 0.0, -3.0);
const SPHERE_RADIUS: f64 = 1.0;

fn light_direction(frame: &SceneFrame) -> Vec3 {
    let azimuth = 2.0 * PI * frame.t as f64 / frame.frames as f64;
    let elevation = PI / 4.0;
    Vec3::new(
        elevation.cos() * azimuth.sin(),
        elevation.sin(),
        -elevation.cos() * azimuth.cos(),
    )
}

/// Nearest positive hit distance of a ray from `EYE` along unit `dir`.
fn hit_sphere(dir: Vec3) -> Option<f64> {
    let oc = EYE;
    let b = oc.dot(dir);
    let c = oc.dot(oc) - SPHERE_RADIUS * SPHERE_RADIUS;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let root = disc.sqrt();
    [-b - root, -b + root].into_iter().find(|t| *t > 0.0)
}

fn shade(dir: Vec3, light: Vec3) -> u8 {
    let Some(t) = hit_sphere(dir) else {
        return 0;
    };
    // sphere is centred at the origin, so the hit point is its own normal
    let normal = (EYE + dir * t).normalized();
    let lambert = normal.dot(light).max(0.0);
    (lambert * 255.0 + 0.5).floor().min(255.0) as u8
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in bytes {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// RGB pixel bytes, row-major from the top-left corner.
pub fn render_pixels(frame: &SceneFrame) -> Vec<u8> {
    let light = light_direction(frame);
    let tan_half = (PI / 6.0).tan();
    let aspect = frame.width as f64 / frame.height as f64;
    let mut rgb = Vec::with_capacity(frame.width * frame.height * 3);
    for j in 0..frame.height {
        let sy = (1.0 - 2.0 * (j as f64 + 0.5) / frame.height as f64) * tan_half;
        for i in 0..frame.width {
            let sx = (2.0 * (i as f64 + 0.5) / frame.width as f64 - 1.0) * aspect * tan_half;
            let gray = shade(Vec3::new(sx, sy, 1.0).normalized(), light);
            rgb.extend_from_slice(&[gray, gray, gray]);
        }
    }
    rgb
}

pub fn render_frame(frame: &SceneFrame) -> RenderedFrame {
    let pixels = render_pixels(frame);
    let hash = format!("{:016x}", fnv1a64(&pixels));
    let mut ppm = format!("P6\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    ppm.extend_from_slice(&pixels);
    RenderedFrame { ppm, hash }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pixel(frame: &SceneFrame, pixels: &[u8], x: usize, y: usize) -> [u8; 3] {
        let at = (y * frame.width + x) * 3;
        [pixels[at], pixels[at + 1], pixels[at + 2]]
    }

    #[test]
    fn corner_is_background() {
        let frame = SceneFrame::new(0, 8, 64, 64).unwrap();
        let pixels = render_pixels(&frame);
        assert_eq!(pixel(&frame, &pixels, 0, 0), [0, 0, 0]);
        assert_eq!(pixel(&frame, &pixels, 63, 63), [0, 0, 0]);
    }

    #[test]
    fn center_is_lit() {
        let frame = SceneFrame::new(0, 8, 64, 64).unwrap();
        let pixels = render_pixels(&frame);
        assert_ne!(pixel(&frame, &pixels, 32, 32), [0, 0, 0]);
    }

    #[test]
    fn ppm_header_and_size() {
        let frame = SceneFrame::new(3, 8, 5, 4).unwrap();
        let out = render_frame(&frame);
        assert!(out.ppm.starts_with(b"P6\n5 4\n255\n"));
        assert_eq!(out.ppm.len(), b"P6\n5 4\n255\n".len() + 5 * 4 * 3);
        assert_eq!(out.hash.len(), 16);
    }

    #[test]
    fn fnv_known_answers() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn rejects_invalid_frames() {
        assert!(SceneFrame::new(8, 8, 4, 4).is_err());
        assert!(SceneFrame::new(0, 0, 4, 4).is_err());
        assert!(SceneFrame::new(0, 8, 0, 4).is_err());
    }
}
