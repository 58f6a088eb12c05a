use clap::error::ErrorKind;
use clap::Parser;

fn main() {
    let cli = match defend_cli::Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // Usage mistakes are configuration errors.
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            std::process::exit(if ok { 0 } else { 1 });
        }
    };
    if let Err(e) = defend_cli::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
