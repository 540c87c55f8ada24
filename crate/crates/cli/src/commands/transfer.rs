use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rht_core::grid::{Grid, ScaleTag};
use rht_core::htm::{self, LocalizationWeights};
use rht_core::rhm1;
use rht_core::stm::{self, ExtractorWeights};

use super::{emit_json, input_err, load_image_rgb, CliError};

#[derive(Args)]
pub struct TransferArgs {
    /// Target image (PGM or PPM), square with extent divisible by 16.
    #[arg(long)]
    pub target: String,

    /// Reference image with the same extent.
    #[arg(long)]
    pub reference: String,

    /// Reference heatmaps (RHM1) at the image extent; the transfer
    /// values default to the reference image itself when omitted.
    #[arg(long)]
    pub ref_heatmaps: Option<String>,

    /// Patch size for correlation.
    #[arg(long, default_value_t = 3)]
    pub patch_size: usize,

    /// Output prefix; writes <out>.rhm1 plus its JSON manifest.
    #[arg(long)]
    pub out: String,
}

/// Channel widths used for the transfer-only pipeline, one per scale.
const TRANSFER_WIDTHS: [usize; 3] = [32, 16, 8];

pub fn run(cli: &crate::Cli, args: &TransferArgs) -> Result<(), CliError> {
    let target = load_image_rgb(&args.target)?;
    let reference = load_image_rgb(&args.reference)?;
    if target.shape() != reference.shape() {
        return Err(input_err(format!(
            "target is {} but reference is {}",
            target.shape_str(),
            reference.shape_str()
        )));
    }
    if target.h() != target.w() || target.h() % 16 != 0 {
        return Err(input_err(format!(
            "images must be square with extent divisible by 16, got {}",
            target.shape_str()
        )));
    }
    let values_grid = match &args.ref_heatmaps {
        Some(path) => {
            let g = rhm1::load_grid(path)?;
            if (g.h(), g.w()) != (target.h(), target.w()) {
                return Err(input_err(format!(
                    "reference heatmaps are {} but images are {}",
                    g.shape_str(),
                    target.shape_str()
                )));
            }
            g
        }
        None => reference.clone(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    let mut maps: Vec<(String, Grid)> = Vec::new();
    let mut summary = Vec::new();

    // Theta comes from the coarsest scale's features.
    let mut theta = None;
    for (i, tag) in ScaleTag::ALL.iter().enumerate() {
        let qk = ExtractorWeights::seeded(*tag, 3, TRANSFER_WIDTHS[i], &mut rng);
        let v = ExtractorWeights::seeded(*tag, values_grid.c(), TRANSFER_WIDTHS[i], &mut rng);
        let fq = stm::extract_local_features(&target, &qk, *tag)?;
        let fk = stm::extract_local_features(&reference, &qk, *tag)?;
        let fv = stm::extract_local_features(&values_grid, &v, *tag)?;

        let qp = stm::l2_normalize(&stm::unfold(&fq, args.patch_size)?);
        let kp = stm::l2_normalize(&stm::unfold(&fk, args.patch_size)?);
        let sel = stm::correlate_select(&qp, &kp)?;
        let fs = stm::soft_transfer(&fv, &sel.d, &sel.a)?;

        if theta.is_none() {
            let loc_extent = fq.grid.h().min(htm::LOC_MAX_INPUT);
            let loc = LocalizationWeights::seeded(loc_extent, 2 * TRANSFER_WIDTHS[0], &mut rng)?;
            theta = Some(htm::estimate_affine(&fq, &fk, &loc)?);
        }
        let theta = theta.as_ref().unwrap();
        let grid = htm::affine_grid(theta, (fv.grid.h(), fv.grid.w()));
        let fe = htm::bilinear_sample(&fv, &grid)?;

        let n = sel.d.len();
        maps.push((format!("fs_{tag}"), fs.grid.clone()));
        maps.push((format!("fe_{tag}"), fe.grid.clone()));
        maps.push((
            format!("d_{tag}"),
            Grid::from_vec(1, n, 1, sel.d.iter().map(|&v| v as f64).collect()).unwrap(),
        ));
        maps.push((format!("a_{tag}"), Grid::from_vec(1, n, 1, sel.a.clone()).unwrap()));
        summary.push(serde_json::json!({
            "scale": tag.to_string(),
            "positions": n,
            "attention_histogram": stm::attention_histogram(&sel.a, 10),
        }));
    }
    let theta = theta.expect("three scales processed");
    maps.push(("theta".to_string(), theta.to_grid()));

    let named: Vec<(&str, &Grid)> = maps.iter().map(|(n, g)| (n.as_str(), g)).collect();
    let container = format!("{}.rhm1", args.out);
    rhm1::save_container(&container, &named, Some(serde_json::json!({"seed": cli.seed})))?;

    if cli.json {
        emit_json(serde_json::json!({
            "event": "transfer",
            "out": container,
            "theta": theta.to_flat(),
            "scales": summary,
        }));
    } else {
        println!("wrote {} maps to {container}", maps.len());
        println!("theta = {:?}", theta.to_flat());
    }
    Ok(())
}
