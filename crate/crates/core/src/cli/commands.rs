use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::files::write_json;
use super::{AlignReport, BucketRow, CliError, Confusion, EvalSummary, Manifest, ManifestEntry, MosaicEdge, MosaicReport, RunConfig};
use crate::geometry::RigidTransform;
use crate::matcher::SoftAlignment;
use crate::metrics::{
    alignment_ranks, binary_scores, bucket_of, hard_matrix, hits_at_k, matching_f1, mean_reciprocal_rank,
    mosaic_metrics, overlap_decision, overlap_score, registration_metrics, scc, chamfer, summarize, write_csv, EvalRow,
    OverlapVariant, OVERLAP_BUCKETS,
};
use crate::model::{Model, ModelError};
use crate::registration::{
    assemble, gt_correspondences, mosaic_with_edges, node_id_alignment, oracle_alignment, register_pair, MosaicConfig,
    RegistrationConfig, RegistrationReport,
};
use crate::scenegraph::{generate_mosaic, generate_scene_pair, load_pair, load_scene, save_pair, save_scene, Fragment, ScenePair};
use crate::training::{prepare_dataset, train_epoch, write_loss_curve, TrainState};

const CHECKPOINT: &str = "model.ckpt";

fn create_out(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))
}

fn node_ids(f: &Fragment) -> Vec<usize> {
    f.graph.nodes().iter().map(|n| n.id).collect()
}

fn transform_rows(t: &RigidTransform) -> Vec<f64> {
    t.to_row_major().to_vec()
}

/// Loads a checkpoint and checks it against the model sections of the run
/// configuration, when present.
fn load_model(cfg: &RunConfig, path: &Path) -> Result<(Model, Option<TrainState>), CliError> {
    let (model, state) = Model::load(path)?;
    if cfg.encoder.as_ref().is_some_and(|e| *e != model.encoder_config) {
        return Err(ModelError::CheckpointMismatch("encoder config differs from the checkpoint".into()).into());
    }
    if cfg.matcher.as_ref().is_some_and(|m| *m != model.matcher_config) {
        return Err(ModelError::CheckpointMismatch("matcher config differs from the checkpoint".into()).into());
    }
    Ok((model, state))
}

fn check_classes(model: &Model, pair: &ScenePair) -> Result<(), CliError> {
    let needed = pair.src.graph.num_classes().max(pair.reference.graph.num_classes());
    if needed > model.encoder_config.num_classes {
        return Err(ModelError::CheckpointMismatch(format!(
            "data uses {needed} classes, the checkpoint {}",
            model.encoder_config.num_classes
        ))
        .into());
    }
    Ok(())
}

fn registration_config(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> RegistrationConfig {
    RegistrationConfig {
        seed: rng.next_u64(),
        ..cfg.registration.clone()
    }
}

pub(super) fn generate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let settings = &cfg.generate;
    let mut pairs = Vec::with_capacity(settings.pairs);
    for k in 0..settings.pairs {
        let mut found = None;
        for _ in 0..settings.max_draws_per_pair {
            let seed = rng.next_u64();
            let pair = generate_scene_pair(&cfg.generator, seed)?;
            let keep = settings
                .overlap_filter
                .is_none_or(|(lo, hi)| (lo..=hi).contains(&pair.overlap_fraction));
            if keep {
                found = Some((seed, pair));
                break;
            }
        }
        let Some(found) = found else {
            return Err(CliError::Config(format!(
                "no pair in the overlap filter after {} draws (pair {k})",
                settings.max_draws_per_pair
            )));
        };
        pairs.push(found);
    }
    create_out(out)?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (k, (seed, pair)) in pairs.iter().enumerate() {
        let file = format!("pair_{k:04}.json");
        save_pair(&out.join(&file), pair)?;
        entries.push(ManifestEntry {
            file,
            seed: *seed,
            overlap: pair.overlap_fraction,
            bucket: bucket_of(pair.overlap_fraction).to_string(),
        });
    }
    let manifest = Manifest {
        seed: cfg.seed,
        generator: cfg.generator.clone(),
        pairs: entries,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    write_json(&out.join("run_config.json"), cfg)?;
    println!("wrote {} pairs to {}", pairs.len(), out.display());
    Ok(())
}

fn load_manifest_pairs(data: &Path) -> Result<(Manifest, Vec<ScenePair>), CliError> {
    let manifest = Manifest::load(data)?;
    if manifest.pairs.is_empty() {
        return Err(CliError::Data(format!("{} lists no pairs", data.display())));
    }
    let pairs = manifest
        .pairs
        .iter()
        .map(|e| load_pair(&manifest.resolve(data, e)).map_err(CliError::from))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((manifest, pairs))
}

pub(super) fn train(cfg: &RunConfig, data: &Path, resume: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let (manifest, pairs) = load_manifest_pairs(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model_seed = rng.next_u64();
    let tcfg = crate::training::TrainConfig {
        seed: rng.next_u64(),
        ..cfg.training.clone()
    };
    let (mut model, mut state) = match resume {
        Some(path) => {
            let (model, state) = load_model(cfg, path)?;
            let state = state.ok_or_else(|| CliError::Data(format!("{} holds no training state", path.display())))?;
            (model, state)
        }
        None => {
            let mut enc = cfg.encoder.clone().unwrap_or_default();
            if cfg.encoder.is_none() {
                enc.num_classes = manifest.generator.num_classes;
            }
            let model = Model::init(enc, cfg.matcher.clone().unwrap_or_default(), model_seed)?;
            let state = TrainState::new(&model);
            (model, state)
        }
    };
    for p in &pairs {
        check_classes(&model, p)?;
    }
    let samples = prepare_dataset(&pairs, &model.encoder_config)?;
    create_out(out)?;
    write_json(&out.join("run_config.json"), cfg)?;
    let ckpt = out.join(CHECKPOINT);
    while state.epochs_done < tcfg.epochs {
        let row = train_epoch(&mut model, &mut state, &samples, &tcfg)?;
        model.save(&ckpt, Some(&state))?;
        write_loss_curve(&state.curve, &out.join("loss.csv"))?;
        println!("epoch {}: L_s {:.6} L_k {:.6} L {:.6}", row.epoch, row.l_s, row.l_k, row.l);
    }
    if !ckpt.exists() {
        model.save(&ckpt, Some(&state))?;
        write_loss_curve(&state.curve, &out.join("loss.csv"))?;
    }
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

/// Overlap scores and, against the ground truth, matching metrics.
fn align_report(a: &SoftAlignment, pair: &ScenePair, cfg: &RunConfig) -> Result<AlignReport, CliError> {
    let mu = overlap_score(a, OverlapVariant::All);
    let mu_top3 = overlap_score(a, OverlapVariant::Top3);
    let variant = cfg.overlap_variant();
    let chosen = if variant == OverlapVariant::All { mu } else { mu_top3 };
    let mut report = AlignReport {
        k_tilde: a.similarity,
        mu,
        mu_top3,
        overlap_variant: variant,
        overlap_pred: overlap_decision(chosen, variant, &cfg.thresholds),
        selected: a.selected_pairs.len(),
        hits_1: None,
        hits_3: None,
        hits_5: None,
        mrr: None,
        f1: None,
    };
    if !pair.gt_alignment.is_empty() {
        let ranks = alignment_ranks(a, &pair.gt_alignment);
        report.hits_1 = Some(hits_at_k(&ranks, 1)?);
        report.hits_3 = Some(hits_at_k(&ranks, 3)?);
        report.hits_5 = Some(hits_at_k(&ranks, 5)?);
        report.mrr = Some(mean_reciprocal_rank(&ranks)?);
        let pred = hard_matrix(a.selected_pairs.iter().map(|p| (p.0, p.1)), a.m_src(), a.m_ref());
        report.f1 = Some(matching_f1(&pred, &pair.gt_matrix())?);
    }
    Ok(report)
}

pub(super) fn align(cfg: &RunConfig, model: &Path, pair: &Path, soft: bool, out: &Path) -> Result<(), CliError> {
    let (model, _) = load_model(cfg, model)?;
    let pair = load_pair(pair)?;
    check_classes(&model, &pair)?;
    let a = model.align(&pair)?;
    let report = align_report(&a, &pair, cfg)?;
    create_out(out)?;
    a.to_file(&node_ids(&pair.src), &node_ids(&pair.reference), soft)
        .save(&out.join("alignment.json"))?;
    write_json(&out.join("align_report.json"), &report)?;
    write_json(&out.join("run_config.json"), cfg)?;
    println!(
        "k̃ {:.4}, μ {:.4}, μ₃ {:.4}, {} pairs selected",
        report.k_tilde, report.mu, report.mu_top3, report.selected
    );
    Ok(())
}

/// Registration report with ground-truth metrics.
fn registration_report(
    pair: &ScenePair,
    alignment: &SoftAlignment,
    cfg: &RunConfig,
    rcfg: &RegistrationConfig,
) -> Result<RegistrationReport, CliError> {
    let strategy = cfg.strategy();
    let reg = register_pair(pair, Some(alignment), strategy, rcfg)?;
    let mut report = RegistrationReport::new(&reg, strategy);
    let gt_corr = gt_correspondences(pair);
    if !gt_corr.is_empty() {
        report.metrics = Some(registration_metrics(
            &reg.transform,
            &pair.gt_transform,
            &gt_corr,
            &reg.correspondences,
            &pair.src.cloud,
            &pair.reference.cloud,
            &cfg.thresholds,
        )?);
    }
    if !reg.correspondences.is_empty() {
        report.scc = Some(scc(
            &reg.correspondences,
            pair.src.cloud.object_ids(),
            pair.reference.cloud.object_ids(),
            &pair.gt_alignment,
        )?);
    }
    Ok(report)
}

pub(super) fn register(cfg: &RunConfig, pair: &Path, model: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let pair = load_pair(pair)?;
    let alignment = match model {
        Some(path) => {
            let (model, _) = load_model(cfg, path)?;
            check_classes(&model, &pair)?;
            model.align(&pair)?
        }
        None => oracle_alignment(&pair),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rcfg = registration_config(cfg, &mut rng);
    let report = registration_report(&pair, &alignment, cfg, &rcfg)?;
    create_out(out)?;
    report.save(&out.join("registration.json"))?;
    write_json(&out.join("run_config.json"), cfg)?;
    match &report.metrics {
        Some(m) => println!(
            "{}: {} correspondences, {} inliers, RRE {:.4}°, RTE {:.4} m",
            report.strategy, report.correspondences, report.inliers, m.rre_deg, m.rte
        ),
        None => println!("{}: {} correspondences, {} inliers", report.strategy, report.correspondences, report.inliers),
    }
    Ok(())
}

pub(super) fn mosaic(cfg: &RunConfig, scenes: &[std::path::PathBuf], model: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ms = &cfg.mosaic;
    let (fragments, world) = if scenes.is_empty() {
        let m = generate_mosaic(&cfg.generator, ms.fragments, ms.objects_per_fragment, ms.shared, rng.next_u64())?;
        let world = m.scene.full_cloud();
        (m.fragments, Some(world))
    } else {
        if scenes.len() < 2 {
            return Err(CliError::Config("mosaicking needs at least two scenes".into()));
        }
        let frags = scenes.iter().map(|p| load_scene(p)).collect::<Result<Vec<_>, _>>()?;
        (frags, None)
    };
    let model = model.map(|p| load_model(cfg, p)).transpose()?.map(|m| m.0);
    let mcfg = MosaicConfig {
        registration: registration_config(cfg, &mut rng),
        strategy: cfg.strategy(),
        min_inliers: ms.min_inliers,
        min_inlier_ratio: ms.min_inlier_ratio,
    };
    let align = |a: &Fragment, b: &Fragment| match &model {
        Some(m) => m.align_fragments(a, b).ok(),
        None => Some(node_id_alignment(a, b)),
    };
    let (transforms, edges) = mosaic_with_edges(&fragments, align, &mcfg)?;
    let metrics = match &world {
        Some(w) => Some(mosaic_metrics(&assemble(&fragments, &transforms), w, &cfg.thresholds)?),
        None => None,
    };
    let report = MosaicReport {
        strategy: mcfg.strategy.to_string(),
        fragments: fragments.len(),
        transforms: transforms.iter().map(transform_rows).collect(),
        edges: edges
            .iter()
            .map(|e| MosaicEdge {
                src: e.src,
                reference: e.reference,
                weight: e.weight,
                transform: transform_rows(&e.transform),
            })
            .collect(),
        metrics,
    };
    create_out(out)?;
    if scenes.is_empty() {
        for (k, f) in fragments.iter().enumerate() {
            save_scene(&out.join(format!("scene_{k:02}.json")), f)?;
        }
    }
    write_json(&out.join("mosaic.json"), &report)?;
    write_json(&out.join("run_config.json"), cfg)?;
    match &report.metrics {
        Some(m) => println!(
            "{} fragments, {} edges: Acc {:.5} m, Comp {:.5} m, F1 {:.4}",
            report.fragments,
            report.edges.len(),
            m.acc,
            m.comp,
            m.f1
        ),
        None => println!("{} fragments, {} edges", report.fragments, report.edges.len()),
    }
    Ok(())
}

fn eval_row(
    entry: &ManifestEntry,
    pair: &ScenePair,
    model: &Model,
    cfg: &RunConfig,
    rcfg: &RegistrationConfig,
    with_registration: bool,
) -> Result<(EvalRow, f64, f64), CliError> {
    let a = model.align(pair)?;
    let ar = align_report(&a, pair, cfg)?;
    let mut row = EvalRow {
        pair: entry.file.clone(),
        overlap: pair.overlap_fraction,
        hits_1: ar.hits_1,
        hits_3: ar.hits_3,
        hits_5: ar.hits_5,
        mrr: ar.mrr,
        f1: ar.f1,
        k_tilde: Some(ar.k_tilde),
        mu: Some(if ar.overlap_variant == OverlapVariant::All { ar.mu } else { ar.mu_top3 }),
        overlap_pred: Some(ar.overlap_pred),
        overlap_true: Some(pair.overlap_fraction > 0.0),
        ..EvalRow::default()
    };
    if with_registration && !pair.gt_alignment.is_empty() {
        match registration_report(pair, &a, cfg, rcfg) {
            Ok(r) => {
                if let Some(m) = r.metrics {
                    row.rre_deg = Some(m.rre_deg);
                    row.rte = Some(m.rte);
                    row.rmse = Some(m.rmse);
                    row.registered = Some(m.registered);
                    row.inlier_ratio = Some(m.inlier_ratio);
                    row.feature_match = Some(m.feature_match);
                }
                row.scc = r.scc;
                let est = RigidTransform::from_row_major(&r.transform).map_err(|e| CliError::Numeric(e.to_string()))?;
                row.chamfer = Some(chamfer(&pair.src.cloud, &pair.reference.cloud, &est)?);
            }
            Err(CliError::Numeric(_)) => row.registered = Some(false),
            Err(e) => return Err(e),
        }
    }
    Ok((row, ar.mu, ar.mu_top3))
}

fn bucket_rows(rows: &[EvalRow]) -> Vec<BucketRow> {
    let summary = summarize(rows);
    let mut keys: Vec<&str> = OVERLAP_BUCKETS
        .iter()
        .map(|b| b.0)
        .filter(|&k| k != "0-10" || summary.contains_key(k))
        .collect();
    keys.push("all");
    keys.into_iter()
        .map(|k| {
            let s = summary.get(k);
            let m = |name: &str| s.and_then(|s| s.means.get(name).copied());
            BucketRow {
                bucket: k.to_string(),
                count: s.map_or(0, |s| s.count),
                hits_1: m("hits_1"),
                hits_3: m("hits_3"),
                hits_5: m("hits_5"),
                mrr: m("mrr"),
                f1: m("f1"),
                rre_deg: m("rre_deg"),
                rte: m("rte"),
                rmse: m("rmse"),
                rr: m("registered"),
                ir: m("inlier_ratio"),
                fmr: m("feature_match"),
                scc: m("scc"),
                chamfer: m("chamfer"),
            }
        })
        .collect()
}

pub(super) fn evaluate(cfg: &RunConfig, data: &Path, model: &Path, with_registration: bool, out: &Path) -> Result<(), CliError> {
    let (manifest, pairs) = load_manifest_pairs(data)?;
    let (model, _) = load_model(cfg, model)?;
    for p in &pairs {
        check_classes(&model, p)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rcfg = registration_config(cfg, &mut rng);
    let results = manifest
        .pairs
        .par_iter()
        .zip(pairs.par_iter())
        .map(|(e, p)| eval_row(e, p, &model, cfg, &rcfg, with_registration))
        .collect::<Result<Vec<_>, _>>()?;
    let rows: Vec<EvalRow> = results.iter().map(|r| r.0.clone()).collect();
    let truth: Vec<bool> = pairs.iter().map(|p| p.overlap_fraction > 0.0).collect();
    let mut confusion = Vec::new();
    for (variant, threshold) in [
        (OverlapVariant::All, cfg.thresholds.overlap_mu),
        (OverlapVariant::Top3, cfg.thresholds.overlap_mu3),
    ] {
        let pred: Vec<bool> = results
            .iter()
            .map(|r| overlap_decision(if variant == OverlapVariant::All { r.1 } else { r.2 }, variant, &cfg.thresholds))
            .collect();
        let scores = binary_scores(&pred, &truth)?;
        confusion.push(Confusion::new(variant, threshold, &pred, &truth, scores));
    }
    let buckets = bucket_rows(&rows);
    create_out(out)?;
    write_csv(&rows, &out.join("eval.csv"))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for b in &buckets {
        w.serialize(b).map_err(|e| CliError::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    crate::scenegraph::io::write_atomic(&out.join("buckets.csv"), &bytes)?;
    write_json(
        &out.join("confusion.json"),
        &EvalSummary {
            pairs: rows.len(),
            confusion,
        },
    )?;
    write_json(&out.join("run_config.json"), cfg)?;
    for b in &buckets {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:>6} n={:<4} Hits@1 {} F1 {} RR {} RRE {}",
            b.bucket,
            b.count,
            f(b.hits_1),
            f(b.f1),
            f(b.rr),
            f(b.rre_deg)
        );
    }
    Ok(())
}
