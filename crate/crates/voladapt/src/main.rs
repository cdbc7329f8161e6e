use std::process::ExitCode;

fn main() -> ExitCode {
    voladapt::cli::run()
}
