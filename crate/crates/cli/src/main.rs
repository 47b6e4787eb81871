

use clap::{Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "hardnerf", about = "Desk-scale NeRF trainer with hard sample mining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (posed cameras + images) on disk.
    Generate(commands::GenerateArgs),
    /// Train a field on a generated dataset.
    Train(commands::TrainArgs),
    /// Render views from a checkpoint.
    Render(commands::RenderArgs),
    /// Compare two training runs' metrics CSVs.
    Compare(commands::CompareArgs),
    /// Dump the occupancy grid of a short run (debug aid).
    Occgrid(commands::OccgridArgs),
}

fn main() {
    let threads = std::env::var("HARDMINE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok());
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .ok();
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => commands::cmd_generate(args),
        Command::Train(args) => commands::cmd_train(args),
        Command::Render(args) => commands::cmd_render(args),
        Command::Compare(args) => commands::cmd_compare(args),
        Command::Occgrid(args) => commands::cmd_occgrid(args),
    };
    if let Err(err) = result {
        // one line, machine parsable: error: <kind>: <detail>
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

