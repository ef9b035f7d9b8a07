fn main() -> std::process::ExitCode {
    stada::cli::main()
}
