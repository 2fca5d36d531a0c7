use clap::Parser;

fn main() {
    let cli = match fpdn_cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { fpdn_cli::commands::EXIT_USAGE } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    std::process::exit(fpdn_cli::run(cli));
}
