mod args;
mod commands;
mod config;
mod error;
mod manifest;

use clap::Parser;

use args::{Cli, Command};
use commands::Context;
use error::{CliResult, EXIT_USAGE};

fn run(cli: Cli) -> CliResult<()> {
    let ctx = Context {
        threads: cli.threads as usize,
        config_file: config::load_file(cli.config.as_deref())?,
    };
    match cli.command {
        Command::GenData(a) => commands::gen_data(&ctx, a),
        Command::Pretrain(a) => commands::pretrain_cmd(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Analyze(a) => commands::analyze(&ctx, a),
        Command::Gradcheck(a) => commands::gradcheck(&ctx, a),
        Command::Plot(a) => commands::plot(&ctx, a),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
