use std::process::ExitCode;

fn main() -> ExitCode {
    acp_service::cli::main()
}
