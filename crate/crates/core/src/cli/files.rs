use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{CliError, RunConfig};
use crate::matcher::AlignmentFile;
use crate::metrics::{BinaryScores, EvalRow, MosaicMetrics, OverlapVariant};
use crate::model::Model;
use crate::registration::RegistrationReport;
use crate::scenegraph::{load_pair, load_scene, GeneratorConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Path relative to the manifest.
    pub file: String,
    pub seed: u64,
    pub overlap: f64,
    pub bucket: String,
}

/// Index of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub pairs: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        read_json(path)
    }

    /// Absolute path of an entry's pair file.
    pub fn resolve(&self, manifest_path: &Path, entry: &ManifestEntry) -> PathBuf {
        manifest_path.parent().unwrap_or(Path::new(".")).join(&entry.file)
    }
}

/// Matching metrics of one aligned pair; ground-truth metrics are present
/// when the pair carries a ground truth alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignReport {
    pub k_tilde: f64,
    pub mu: f64,
    pub mu_top3: f64,
    pub overlap_variant: OverlapVariant,
    pub overlap_pred: bool,
    pub selected: usize,
    pub hits_1: Option<f64>,
    pub hits_3: Option<f64>,
    pub hits_5: Option<f64>,
    pub mrr: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MosaicEdge {
    pub src: usize,
    pub reference: usize,
    pub weight: f64,
    /// Row-major 4×4.
    pub transform: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MosaicReport {
    pub strategy: String,
    pub fragments: usize,
    /// Row-major 4×4 per fragment, into the frame of fragment 0.
    pub transforms: Vec<Vec<f64>>,
    pub edges: Vec<MosaicEdge>,
    /// Present when the ground-truth scene is known.
    pub metrics: Option<MosaicMetrics>,
}

/// One row of the per-bucket summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BucketRow {
    pub bucket: String,
    pub count: usize,
    pub hits_1: Option<f64>,
    pub hits_3: Option<f64>,
    pub hits_5: Option<f64>,
    pub mrr: Option<f64>,
    pub f1: Option<f64>,
    pub rre_deg: Option<f64>,
    pub rte: Option<f64>,
    pub rmse: Option<f64>,
    pub rr: Option<f64>,
    pub ir: Option<f64>,
    pub fmr: Option<f64>,
    pub scc: Option<f64>,
    pub chamfer: Option<f64>,
}

/// Overlap-check confusion counts for one score variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Confusion {
    pub variant: OverlapVariant,
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub scores: BinaryScores,
}

impl Confusion {
    pub fn new(variant: OverlapVariant, threshold: f64, pred: &[bool], truth: &[bool], scores: BinaryScores) -> Self {
        let count = |p: bool, t: bool| pred.iter().zip(truth).filter(|&(&a, &b)| a == p && b == t).count();
        Self {
            variant,
            threshold,
            tp: count(true, true),
            fp: count(true, false),
            tn: count(false, false),
            fn_: count(false, true),
            scores,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSummary {
    pub pairs: usize,
    pub confusion: Vec<Confusion>,
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut json = serde_json::to_vec_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    json.push(b'\n');
    crate::scenegraph::io::write_atomic(path, &json).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Data(e.to_string()))?;
    r.deserialize().collect::<Result<_, _>>().map_err(|e| CliError::Data(e.to_string()))
}

fn check_loss_csv(path: &Path) -> Result<(), CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Data(e.to_string()))?;
    let header = r.headers().map_err(|e| CliError::Data(e.to_string()))?.clone();
    if header != vec!["epoch", "L_s", "L_k", "L"] {
        return Err(CliError::Data(format!("unexpected header {header:?}")));
    }
    let rows: Vec<(usize, f64, f64, f64)> =
        r.deserialize().collect::<Result<_, _>>().map_err(|e| CliError::Data(e.to_string()))?;
    if rows.windows(2).any(|w| w[1].0 != w[0].0 + 1) {
        return Err(CliError::Data("epochs are not consecutive".into()));
    }
    Ok(())
}

/// Result of validating one file.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub path: PathBuf,
    pub kind: &'static str,
    pub error: Option<String>,
}

fn check_file(path: &Path) -> Option<(&'static str, Result<(), CliError>)> {
    let name = path.file_name()?.to_str()?;
    Some(match name {
        "manifest.json" => ("manifest", read_json::<Manifest>(path).map(drop)),
        "run_config.json" => ("run config", read_json::<RunConfig>(path).and_then(|c| c.validate())),
        "alignment.json" => ("alignment", read_json::<AlignmentFile>(path).map(drop)),
        "align_report.json" => ("align report", read_json::<AlignReport>(path).map(drop)),
        "registration.json" => ("registration", read_json::<RegistrationReport>(path).map(drop)),
        "mosaic.json" => ("mosaic", read_json::<MosaicReport>(path).map(drop)),
        "confusion.json" => ("confusion", read_json::<EvalSummary>(path).map(drop)),
        "eval.csv" => ("eval rows", read_csv::<EvalRow>(path).map(drop)),
        "buckets.csv" => ("bucket summary", read_csv::<BucketRow>(path).map(drop)),
        "loss.csv" => ("loss curve", check_loss_csv(path)),
        _ if name.ends_with(".ckpt") => ("checkpoint", Model::load(path).map(drop).map_err(CliError::from)),
        _ if name.starts_with("pair_") && name.ends_with(".json") => {
            ("scene pair", load_pair(path).map(drop).map_err(CliError::from))
        }
        _ if name.starts_with("scene_") && name.ends_with(".json") => {
            ("scene", load_scene(path).map(drop).map_err(CliError::from))
        }
        _ => return None,
    })
}

/// Validates every recognized file under `dir`, recursively, in path order.
pub fn self_check(dir: &Path) -> Result<Vec<CheckOutcome>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!("{} is not a directory", dir.display())));
    }
    let mut stack = vec![dir.to_path_buf()];
    let mut files = Vec::new();
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    Ok(files
        .into_iter()
        .filter_map(|p| {
            check_file(&p).map(|(kind, r)| CheckOutcome {
                kind,
                error: r.err().map(|e| e.to_string()),
                path: p,
            })
        })
        .collect())
}
