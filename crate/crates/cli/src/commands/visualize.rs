use clap::Args;

use rht_core::dataio;
use rht_core::rhm1;

use super::{emit_json, input_err, CliError};

#[derive(Args)]
pub struct VisualizeArgs {
    /// Input RHM1 map.
    #[arg(long = "in")]
    pub input: String,

    /// Channel to render.
    #[arg(long, default_value_t = 0)]
    pub channel: usize,

    /// Output PGM path; the channel maximum maps to 255.
    #[arg(long)]
    pub out: String,
}

pub fn run(cli: &crate::Cli, args: &VisualizeArgs) -> Result<(), CliError> {
    let grid = rhm1::load_grid(&args.input)?;
    let bytes = dataio::grid_to_pgm_bytes(&grid, args.channel)?;
    std::fs::write(&args.out, &bytes).map_err(|e| input_err(format!("{}: {e}", args.out)))?;
    if cli.json {
        emit_json(serde_json::json!({
            "event": "visualize",
            "in": args.input,
            "channel": args.channel,
            "out": args.out,
            "size": [grid.h(), grid.w()],
        }));
    } else {
        println!("wrote channel {} of {} ({}x{}) -> {}", args.channel, args.input, grid.h(), grid.w(), args.out);
    }
    Ok(())
}
