use clap::Args;

use rht_core::heatmaps::HeatmapStack;
use rht_core::pipeline::{self, ModelConfig, ModelParams};
use rht_core::rhm1;

use super::{emit_json, input_err, load_image_rgb, CliError, ScaleChoice};

#[derive(Args)]
pub struct FuseArgs {
    /// Target image at the configuration's extent (32 for quarter, 128
    /// for full).
    #[arg(long)]
    pub target: String,

    /// Reference image at the same extent.
    #[arg(long)]
    pub reference: String,

    /// Reference heatmaps (RHM1) at the same extent.
    #[arg(long)]
    pub ref_heatmaps: String,

    /// How many of the heatmap channels are landmarks; the rest count as
    /// boundaries. Defaults to all of them.
    #[arg(long)]
    pub landmarks: Option<usize>,

    /// Model scale configuration.
    #[arg(long, value_enum, default_value_t = ScaleChoice::Quarter)]
    pub scale: ScaleChoice,

    /// Load weights from a checkpoint instead of seeding them.
    #[arg(long)]
    pub checkpoint: Option<String>,

    /// Output RHM1 file for the predicted heatmaps.
    #[arg(long)]
    pub out: String,
}

pub fn run(cli: &crate::Cli, args: &FuseArgs) -> Result<(), CliError> {
    let target = load_image_rgb(&args.target)?;
    let reference = load_image_rgb(&args.reference)?;
    let heatmaps = rhm1::load_grid(&args.ref_heatmaps)?;
    let channels = heatmaps.c();
    let m = args.landmarks.unwrap_or(channels);
    if m == 0 || m > channels {
        return Err(input_err(format!(
            "--landmarks {m} out of range for {channels} heatmap channels"
        )));
    }

    let params = match &args.checkpoint {
        Some(path) => {
            let params = ModelParams::load(path)?;
            if params.config.out_channels() != channels {
                return Err(input_err(format!(
                    "checkpoint expects {} heatmap channels, input has {channels}",
                    params.config.out_channels()
                )));
            }
            params
        }
        None => {
            let config = ModelConfig::with_table(args.scale.table(), m, channels - m, cli.seed);
            ModelParams::seeded(&config)?
        }
    };
    let stack = HeatmapStack::new(heatmaps, m, channels - m, params.config.sigma)?;

    let (pred, inter) = pipeline::forward(&target, &reference, &stack, &params, None)?;
    rhm1::save_grid(&args.out, &pred.grid)?;

    if cli.json {
        emit_json(serde_json::json!({
            "event": "fuse",
            "out": args.out,
            "shape": [pred.grid.h(), pred.grid.w(), pred.grid.c()],
            "theta": inter.theta.to_flat(),
            "attention_histograms": inter.attention_hist,
        }));
    } else {
        println!(
            "fused prediction {} -> {} (theta {:?})",
            pred.grid.shape_str(),
            args.out,
            inter.theta.to_flat()
        );
    }
    Ok(())
}
