use std::process::ExitCode;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    match trajrec_cli::run(&argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if let Some(c) = err.downcast_ref::<clap::Error>() {
                let _ = c.print();
                if !c.use_stderr() {
                    return ExitCode::SUCCESS;
                }
            }
            let (category, code) = trajrec_cli::classify(&err);
            eprintln!("error[{category}]: {err:#}");
            ExitCode::from(code)
        }
    }
}
