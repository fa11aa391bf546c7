use std::process::ExitCode;

fn main() -> ExitCode {
    cdp::cli::run()
}
