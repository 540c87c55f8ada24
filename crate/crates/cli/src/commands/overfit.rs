use clap::Args;

use rht_core::pipeline::{self, ModelConfig, ModelParams};

use super::{emit_json, input_err, CliError, ScaleChoice};

#[derive(Args)]
pub struct OverfitArgs {
    /// Gradient steps.
    #[arg(long, default_value_t = 50)]
    pub steps: usize,

    /// Base learning rate; steps that would increase the loss are
    /// retried with a halved rate.
    #[arg(long, default_value_t = 0.3)]
    pub lr: f64,

    /// Model scale configuration.
    #[arg(long, value_enum, default_value_t = ScaleChoice::Quarter)]
    pub scale: ScaleChoice,

    /// Landmark count of the synthetic sample.
    #[arg(long, default_value_t = 3)]
    pub landmarks: usize,

    /// Boundary count of the synthetic sample.
    #[arg(long, default_value_t = 1)]
    pub boundaries: usize,

    /// Output CSV with one loss value per step.
    #[arg(long)]
    pub trace: String,

    /// Optionally save the trained weights as an RHM1 checkpoint.
    #[arg(long)]
    pub checkpoint: Option<String>,
}

pub fn run(cli: &crate::Cli, args: &OverfitArgs) -> Result<(), CliError> {
    if args.steps == 0 {
        return Err(input_err("--steps must be at least 1"));
    }
    let config = ModelConfig::with_table(args.scale.table(), args.landmarks, args.boundaries, cli.seed);
    let mut params = ModelParams::seeded(&config)?;
    let sample = pipeline::synthetic_sample(&config, cli.seed ^ 0x0F17)?;

    let start = std::time::Instant::now();
    let trace = pipeline::overfit_single(&mut params, &sample, args.steps, args.lr)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let elapsed = start.elapsed().as_secs_f64();

    let mut csv = String::from("step,overall\n");
    for (i, loss) in trace.iter().enumerate() {
        csv.push_str(&format!("{i},{loss}\n"));
    }
    std::fs::write(&args.trace, csv).map_err(|e| input_err(format!("{}: {e}", args.trace)))?;

    if let Some(path) = &args.checkpoint {
        params.save(path)?;
    }

    let initial = trace[0];
    let final_loss = *trace.last().unwrap();
    if cli.json {
        emit_json(serde_json::json!({
            "event": "overfit",
            "steps": args.steps,
            "lr": args.lr,
            "initial": initial,
            "final": final_loss,
            "ratio": final_loss / initial,
            "seconds": elapsed,
            "trace": args.trace,
        }));
    } else {
        println!(
            "overfit {} steps at lr {}: {initial:.4} -> {final_loss:.4} (ratio {:.3}, {elapsed:.1}s) -> {}",
            args.steps,
            args.lr,
            final_loss / initial,
            args.trace
        );
    }
    Ok(())
}
