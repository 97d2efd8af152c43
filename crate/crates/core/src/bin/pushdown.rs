fn main() -> std::process::ExitCode {
    pushdown::cli::main_with(std::env::args())
}
