use clap::Parser;

fn main() -> anyhow::Result<()> {
    rcl_lab::run(&rcl_lab::Cli::parse())
}
