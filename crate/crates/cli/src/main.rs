use kws_cli::CliError;
use kws_core::Error;

fn main() {
    match kws_cli::run(std::env::args_os()) {
        Ok(()) => {}
        Err(CliError::Usage(e)) => e.exit(),
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Run(Error::NumericAbort { last_good: Some(path), .. }) = &e {
                eprintln!("last good checkpoint: {}", path.display());
            }
            std::process::exit(e.exit_code());
        }
    }
}
