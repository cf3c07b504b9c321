use std::process::ExitCode;

fn main() -> ExitCode {
    actrev_cli::run()
}
