use std::process::ExitCode;

fn main() -> ExitCode {
    let status = rsvl_cli::run(
        std::env::args_os(),
        &mut std::io::stdout(),
        &mut std::io::stderr(),
    );
    status.into()
}
