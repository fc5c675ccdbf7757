fn main() -> std::process::ExitCode {
    asrkit::cli::main()
}
