fn main() -> std::process::ExitCode {
    puma::cli::main()
}
