use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;

use rht_core::dataio::{self, DatasetManifest};
use rht_core::heatmaps::LandmarkSet;
use rht_core::metrics::{self, NormalizationSpec};

use super::{emit_json, input_err, CliError};

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum NormChoice {
    Interpupil,
    Interocular,
    BoxGeomean,
    Diag,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Directory of predicted .pts files.
    #[arg(long)]
    pub pred_dir: String,

    /// Directory of ground-truth .pts files; stems must match.
    #[arg(long)]
    pub truth_dir: String,

    /// Error normalization.
    #[arg(long, value_enum)]
    pub norm: NormChoice,

    /// Dataset manifest supplying landmark conventions, boxes and
    /// visibility files (required for all norms except diag).
    #[arg(long)]
    pub manifest: Option<String>,

    /// Output JSON report path.
    #[arg(long)]
    pub report: String,

    /// Output CSV path for the cumulative curve; defaults to the report
    /// path with a .csv extension.
    #[arg(long)]
    pub curve: Option<String>,

    /// AUC cutoff.
    #[arg(long, default_value_t = metrics::DEFAULT_AUC_CUTOFF)]
    pub cutoff: f64,

    /// Failure-rate threshold.
    #[arg(long, default_value_t = metrics::DEFAULT_FR_THRESHOLD)]
    pub threshold: f64,

    /// Samples along the cumulative curve.
    #[arg(long, default_value_t = 101)]
    pub steps: usize,

    /// Average only over landmarks marked visible in the ground truth.
    #[arg(long)]
    pub visible_only: bool,
}

fn pts_stems(dir: &str) -> Result<BTreeMap<String, PathBuf>, CliError> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| input_err(format!("{dir}: {e}")))?;
    for entry in entries {
        let path = entry.map_err(|e| input_err(format!("{dir}: {e}")))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("pts") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    if out.is_empty() {
        return Err(input_err(format!("{dir}: no .pts files found")));
    }
    Ok(out)
}

fn load_landmarks(path: &Path, visibility: Option<Vec<bool>>) -> Result<LandmarkSet, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| input_err(format!("{}: {e}", path.display())))?;
    let annotation = dataio::parse_pts(&text)?;
    let n = annotation.points.len();
    let vis = match visibility {
        Some(v) if v.len() == n => v,
        Some(v) => {
            return Err(input_err(format!(
                "{}: visibility has {} flags for {n} points",
                path.display(),
                v.len()
            )))
        }
        None => vec![true; n],
    };
    Ok(LandmarkSet::new(annotation.points, vis, (0, 0))?)
}

fn load_visibility(path: &Path) -> Result<Vec<bool>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| input_err(format!("{}: {e}", path.display())))?;
    text.split_whitespace()
        .map(|tok| match tok {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(input_err(format!("{}: visibility flag {other:?} is not 0/1", path.display()))),
        })
        .collect()
}

struct ManifestIndex {
    manifest: DatasetManifest,
    base: PathBuf,
    /// annotation stem -> entry index
    by_stem: BTreeMap<String, usize>,
}

fn index_manifest(path: &str) -> Result<ManifestIndex, CliError> {
    let manifest = DatasetManifest::load(path)?;
    let base = Path::new(path).parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let mut by_stem = BTreeMap::new();
    for (i, entry) in manifest.entries.iter().enumerate() {
        if let Some(stem) = Path::new(&entry.annotation).file_stem().and_then(|s| s.to_str()) {
            by_stem.insert(stem.to_string(), i);
        }
    }
    Ok(ManifestIndex { manifest, base, by_stem })
}

pub fn run(cli: &crate::Cli, args: &EvaluateArgs) -> Result<(), CliError> {
    let preds = pts_stems(&args.pred_dir)?;
    let truths = pts_stems(&args.truth_dir)?;

    let only_pred: Vec<&String> = preds.keys().filter(|k| !truths.contains_key(*k)).collect();
    let only_truth: Vec<&String> = truths.keys().filter(|k| !preds.contains_key(*k)).collect();
    if !only_pred.is_empty() || !only_truth.is_empty() {
        return Err(input_err(format!(
            "unmatched stems (prediction-only: {:?}; truth-only: {:?})",
            only_pred, only_truth
        )));
    }

    let manifest = match &args.manifest {
        Some(path) => Some(index_manifest(path)?),
        None => None,
    };

    let mut named = Vec::with_capacity(truths.len());
    for (stem, truth_path) in &truths {
        let entry = manifest
            .as_ref()
            .and_then(|m| m.by_stem.get(stem).map(|&i| (&m.manifest.entries[i], m)));

        let visibility = match entry {
            Some((e, m)) => match &e.visibility {
                Some(rel) => Some(load_visibility(&m.base.join(rel))?),
                None => None,
            },
            None => None,
        };
        let truth = load_landmarks(truth_path, visibility)?;
        let pred = load_landmarks(&preds[stem], None)?;

        let norm = match args.norm {
            NormChoice::Diag => NormalizationSpec::Diag,
            NormChoice::Interpupil => {
                let pupils = manifest
                    .as_ref()
                    .and_then(|m| m.manifest.conventions.pupils.clone())
                    .ok_or_else(|| input_err("--norm interpupil needs pupil indices in the manifest"))?;
                NormalizationSpec::Interpupil {
                    left: pupils.left,
                    right: pupils.right,
                }
            }
            NormChoice::Interocular => {
                let corners = manifest
                    .as_ref()
                    .and_then(|m| m.manifest.conventions.eye_corners.clone())
                    .ok_or_else(|| input_err("--norm interocular needs eye-corner indices in the manifest"))?;
                NormalizationSpec::Interocular {
                    left_outer: corners.left_outer,
                    right_outer: corners.right_outer,
                }
            }
            NormChoice::BoxGeomean => {
                let (w, h) = entry
                    .and_then(|(e, _)| e.box_wh)
                    .ok_or_else(|| input_err(format!("--norm box-geomean needs a box for {stem} in the manifest")))?;
                NormalizationSpec::BoxGeomean { width: w, height: h }
            }
        };
        let nme = if args.visible_only {
            metrics::nme_visible_only(&pred, &truth, &norm)?
        } else {
            metrics::nme(&pred, &truth, &norm)?
        };
        named.push((stem.clone(), nme));
    }

    let (report, curve) = metrics::evaluate(named, args.cutoff, args.threshold, args.steps)?;

    let report_json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Internal(format!("report encode: {e}")))?;
    std::fs::write(&args.report, report_json).map_err(|e| input_err(format!("{}: {e}", args.report)))?;

    let curve_path = args
        .curve
        .clone()
        .unwrap_or_else(|| Path::new(&args.report).with_extension("csv").display().to_string());
    let mut csv = String::from("nme,fraction\n");
    for (x, f) in &curve.points {
        csv.push_str(&format!("{x},{f}\n"));
    }
    std::fs::write(&curve_path, csv).map_err(|e| input_err(format!("{curve_path}: {e}")))?;

    if cli.json {
        emit_json(serde_json::json!({
            "event": "evaluate",
            "images": report.per_image.len(),
            "mean_nme": report.mean_nme,
            "auc": report.auc,
            "failure_rate": report.failure_rate,
            "report": args.report,
            "curve": curve_path,
        }));
    } else {
        println!(
            "{} images: mean NME {:.6}, AUC@{} {:.4}, FR@{} {:.4}",
            report.per_image.len(),
            report.mean_nme,
            report.auc_cutoff,
            report.auc,
            report.fr_threshold,
            report.failure_rate,
        );
        println!("report -> {}, curve -> {curve_path}", args.report);
    }
    Ok(())
}
