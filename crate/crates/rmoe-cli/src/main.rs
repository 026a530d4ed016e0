use clap::Parser;
use rmoe_cli::args::{Cli, Command};
use rmoe_cli::commands;

fn main() {
    let cli = Cli::parse(); // clap exits 2 on flag errors
    let result = match &cli.command {
        Command::GenData(args) => commands::gen_data(args),
        Command::TrainBase(args) => commands::train_base_cmd(args),
        Command::TrainRmoe(args) => commands::train_rmoe_cmd(args),
        Command::TrainMoe(args) => commands::train_moe_cmd(args),
        Command::Eval(args) => commands::eval_cmd(args),
        Command::Sweep(args) => commands::sweep_cmd(args),
        Command::Report(args) => commands::report_cmd(args),
    };
    if let Err(e) = result {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
