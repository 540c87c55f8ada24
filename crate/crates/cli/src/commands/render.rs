use clap::Args;

use rht_core::dataio;
use rht_core::heatmaps::{render_full_stack, BoundaryDefinition, LandmarkSet};
use rht_core::rhm1;

use super::{emit_json, input_err, parse_size, CliError};

#[derive(Args)]
pub struct RenderArgs {
    /// Landmark annotation in .pts format.
    #[arg(long)]
    pub pts: String,

    /// Output heatmap size as HxW.
    #[arg(long, default_value = "128x128")]
    pub size: String,

    /// Gaussian sigma in output pixels.
    #[arg(long, default_value_t = rht_core::heatmaps::DEFAULT_SIGMA)]
    pub sigma: f64,

    /// JSON file with boundary index sequences (an array of arrays).
    /// Defaults to the 13-contour convention for 68-point annotations
    /// and to no boundaries otherwise.
    #[arg(long)]
    pub boundaries: Option<String>,

    /// Source frame of the .pts coordinates as WxH; when given,
    /// coordinates are rescaled into the output frame.
    #[arg(long)]
    pub scale_from: Option<String>,

    /// Output RHM1 file.
    #[arg(long)]
    pub out: String,
}

pub fn run(cli: &crate::Cli, args: &RenderArgs) -> Result<(), CliError> {
    if args.sigma <= 0.0 {
        return Err(input_err(format!("--sigma must be positive, got {}", args.sigma)));
    }
    let (h, w) = parse_size(&args.size)?;
    let text = std::fs::read_to_string(&args.pts)
        .map_err(|e| input_err(format!("{}: {e}", args.pts)))?;
    let annotation = dataio::parse_pts(&text)?;

    let mut landmarks = match &args.scale_from {
        Some(s) => {
            let (src_w, src_h) = {
                let (a, b) = parse_size(s)?;
                (a, b)
            };
            LandmarkSet::all_visible(annotation.points.clone(), (src_w, src_h))?.scaled_to((w, h))
        }
        None => LandmarkSet::all_visible(annotation.points.clone(), (w, h))?,
    };
    landmarks.image_size = (w, h);

    let boundaries = match &args.boundaries {
        Some(path) => {
            let json = std::fs::read_to_string(path).map_err(|e| input_err(format!("{path}: {e}")))?;
            let seqs: Vec<Vec<usize>> =
                serde_json::from_str(&json).map_err(|e| input_err(format!("{path}: {e}")))?;
            BoundaryDefinition::new(seqs)?
        }
        None if annotation.n_points() == 68 => BoundaryDefinition::standard_68(),
        None => BoundaryDefinition::empty(),
    };
    boundaries.validate_against(landmarks.len())?;

    let stack = render_full_stack(&landmarks, &boundaries, (h, w), args.sigma)?;
    rhm1::save_grid(&args.out, &stack.grid)?;

    if cli.json {
        emit_json(serde_json::json!({
            "event": "render",
            "landmarks": stack.n_landmarks,
            "boundaries": stack.n_boundaries,
            "size": [h, w],
            "sigma": args.sigma,
            "out": args.out,
        }));
    } else {
        println!(
            "rendered {} landmark + {} boundary channels at {h}x{w} (sigma {}) -> {}",
            stack.n_landmarks, stack.n_boundaries, args.sigma, args.out
        );
    }
    Ok(())
}
