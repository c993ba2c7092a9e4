fn main() -> std::process::ExitCode {
    kvmargin::cli::main()
}
