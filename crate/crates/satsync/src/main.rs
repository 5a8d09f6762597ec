use std::process::ExitCode;

fn main() -> ExitCode {
    satsync::cli::main()
}
