fn main() -> std::process::ExitCode {
    pvc::cli::main()
}
