//! Experiment runners behind the CLI verbs. Every artifact they emit is
//! a pure function of (config, seed): no timestamps, no machine state.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use dmad_core::checkpoint::{self, config_hash};
use dmad_core::dataset::{self, ImageFormat, SplitKind};
use dmad_core::metrics::{self, evaluate, MetricsReport, ScoreRecord};
use dmad_core::model::{Detector, DetectorMode, PairSample};
use dmad_core::synth::{build_protocol, ArtefactModel, ProtocolSplit, SplitSpec};
use dmad_core::trainer::{train, FocalLossConfig};
use dmad_core::{Error, Result};

use crate::config::{ExperimentConfig, ProtocolKind};
use crate::svg::render_det_svg;

/// Where evaluation pairs come from: the seeded generator or a dataset
/// directory written by `gen-data`.
#[derive(Debug, Clone)]
pub enum DataSource {
    Synth,
    Dir(PathBuf),
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub final_loss: f64,
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub scores_csv: PathBuf,
    pub report_txt: PathBuf,
    pub det_csv: PathBuf,
}

/// 40-hex provenance id derived from the resolved config; ties every
/// artifact back to the exact settings that produced it.
pub fn provenance(cfg: &ExperimentConfig) -> String {
    let mut h = Sha256::new();
    h.update(cfg.to_toml().as_bytes());
    checkpoint::hex(&h.finalize())[..40].to_string()
}

fn write_run_manifest(
    dir: &Path,
    cfg: &ExperimentConfig,
    command: &str,
    extra: &[(&str, String)],
) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "command={command}");
    let _ = writeln!(s, "seed={}", cfg.seed);
    let _ = writeln!(
        s,
        "config_hash={}",
        config_hash(&cfg.vit_config(), &cfg.lora_config()?, cfg.mode()?)
    );
    let _ = writeln!(s, "provenance={}", provenance(cfg));
    for (k, v) in extra {
        let _ = writeln!(s, "{k}={v}");
    }
    fs::write(dir.join("run_manifest.txt"), s)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

fn matched_split_spec(cfg: &ExperimentConfig) -> Result<SplitSpec> {
    let synth = cfg.synth_config()?;
    Ok(SplitSpec {
        train_fraction: cfg.data.train_fraction,
        train_tools: vec![synth.artefact],
        test_tools: vec![synth.artefact],
    })
}

fn generate_split(cfg: &ExperimentConfig, spec: &SplitSpec) -> Result<ProtocolSplit> {
    build_protocol(&cfg.synth_config()?, spec)
}

fn load_pairs(cfg: &ExperimentConfig, source: &DataSource, kind: SplitKind) -> Result<Vec<PairSample>> {
    match source {
        DataSource::Synth => {
            let split = generate_split(cfg, &matched_split_spec(cfg)?)?;
            Ok(match kind {
                SplitKind::Train => split.train,
                SplitKind::Test => split.test,
            })
        }
        DataSource::Dir(dir) => dataset::load_dataset(dir, kind),
    }
}

fn check_pairs_compatible(model: &Detector, pairs: &[PairSample]) -> Result<()> {
    let cfg = &model.backbone.config;
    let expect = [cfg.channels, cfg.image_size, cfg.image_size];
    match pairs.first() {
        Some(p) if p.suspected().shape() != expect => Err(Error::Incompatible(format!(
            "dataset images are {:?}, model expects {:?}",
            p.suspected().shape(),
            expect
        ))),
        _ => Ok(()),
    }
}

fn check_dir_compatible(model: &Detector, dir: &Path) -> Result<()> {
    let size = dataset::dataset_image_size(dir)?;
    if size != model.backbone.config.image_size {
        return Err(Error::Incompatible(format!(
            "dataset {} has image_size {size}, model expects {}",
            dir.display(),
            model.backbone.config.image_size
        )));
    }
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

pub fn run_train(cfg: &ExperimentConfig, source: &DataSource, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let pairs = load_pairs(cfg, source, SplitKind::Train)?;
    let mut model = Detector::build(cfg.vit_config(), cfg.lora_config()?, cfg.mode()?, cfg.seed)?;
    model.flip_difference = cfg.model.flip_difference;
    check_pairs_compatible(&model, &pairs)?;

    let report = train(
        &mut model,
        &pairs,
        &cfg.train_config(),
        &FocalLossConfig::default(),
    )?;

    let loss_csv = out.join("loss.csv");
    let mut w = csv::Writer::from_path(&loss_csv)?;
    w.write_record(["epoch", "mean_loss"])?;
    for (i, l) in report.epoch_losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;

    let ckpt = out.join("model.dmad");
    checkpoint::save_model(&ckpt, &model)?;
    write_run_manifest(
        out,
        cfg,
        "train",
        &[
            ("train_pairs", pairs.len().to_string()),
            ("epochs", cfg.train.epochs.to_string()),
        ],
    )?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        loss_csv,
        final_loss: *report.epoch_losses.last().expect("at least one epoch"),
    })
}

// ── eval ─────────────────────────────────────────────────────────────

pub fn score_pairs(model: &Detector, pairs: &[PairSample]) -> Result<Vec<ScoreRecord>> {
    pairs
        .iter()
        .map(|p| ScoreRecord::new(p.pair_id.clone(), p.label, model.score(p)?, p.tool_tag.clone()))
        .collect()
}

/// Scores a test set and writes scores, report and DET artifacts.
pub fn run_eval(
    checkpoint_path: &Path,
    cfg: &ExperimentConfig,
    source: &DataSource,
    out: &Path,
    emit_svg: bool,
) -> Result<EvalOutcome> {
    let model = checkpoint::load_model(checkpoint_path)?;
    // config-hash compatibility: the checkpoint must match the experiment
    // configuration it is evaluated under
    let expected = config_hash(&cfg.vit_config(), &cfg.lora_config()?, model.mode);
    let found = checkpoint::peek_config_hash(checkpoint_path)?;
    if expected != found {
        return Err(Error::Incompatible(format!(
            "checkpoint config hash {found} does not match experiment config {expected}"
        )));
    }
    if let DataSource::Dir(dir) = source {
        check_dir_compatible(&model, dir)?;
    }
    let pairs = load_pairs(cfg, source, SplitKind::Test)?;
    check_pairs_compatible(&model, &pairs)?;
    eval_records(&score_pairs(&model, &pairs)?, out, emit_svg)
}

/// Metrics-only entry: ingest any score set and emit the full report.
pub fn eval_records(records: &[ScoreRecord], out: &Path, emit_svg: bool) -> Result<EvalOutcome> {
    if records.is_empty() {
        return Err(Error::Protocol("no score records to evaluate".into()));
    }
    fs::create_dir_all(out)?;
    let report = evaluate(records)?;
    if report.flat_scores {
        eprintln!("warning: all scores identical; DET curve is degenerate");
    }
    let scores_csv = out.join("scores.csv");
    metrics::write_score_csv(&scores_csv, records)?;
    let report_txt = out.join("report.txt");
    fs::write(&report_txt, metrics::render_report(&report))?;
    let det_csv = out.join("det.csv");
    metrics::write_det_csv(&det_csv, &report.det_curve)?;
    if emit_svg {
        let svg = render_det_svg(&[("det".into(), report.det_curve.clone())]);
        fs::write(out.join("det.svg"), svg)?;
    }
    Ok(EvalOutcome {
        report,
        scores_csv,
        report_txt,
        det_csv,
    })
}

pub fn run_metrics_file(scores_path: &Path, out: &Path, emit_svg: bool) -> Result<EvalOutcome> {
    let records = metrics::read_score_csv(scores_path)?;
    eval_records(&records, out, emit_svg)
}

// ── gen-data ─────────────────────────────────────────────────────────

pub fn run_gen_data(cfg: &ExperimentConfig, out: &Path, format: ImageFormat) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let spec = matched_split_spec(cfg)?;
    let split = generate_split(cfg, &spec)?;
    dataset::write_dataset(out, &split, &cfg.synth_config()?, &spec, format)?;
    write_run_manifest(
        out,
        cfg,
        "gen-data",
        &[
            ("train_pairs", split.train.len().to_string()),
            ("test_pairs", split.test.len().to_string()),
        ],
    )
}

// ── grid ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct GridRow {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub status: String,
    /// Per direction: (d_eer, bscer10, bscer20, bscer100).
    pub directions: Vec<[f64; 4]>,
    pub mean: [f64; 4],
    pub best: bool,
}

fn direction_metrics(report: &MetricsReport) -> [f64; 4] {
    [
        report.d_eer,
        report.bscer_at[0].bscer,
        report.bscer_at[1].bscer,
        report.bscer_at[2].bscer,
    ]
}

/// One cross-database direction: train on one pseudo-database, test on
/// the other. Returns the metric quadruple.
fn run_direction(
    cfg: &ExperimentConfig,
    train_seed: u64,
    test_seed: u64,
    train_spec: &SplitSpec,
    test_spec: &SplitSpec,
    mode: DetectorMode,
) -> Result<(MetricsReport, Vec<ScoreRecord>)> {
    let mut train_cfg_x = cfg.clone();
    train_cfg_x.data.seed = train_seed;
    let mut test_cfg_x = cfg.clone();
    test_cfg_x.data.seed = test_seed;

    let train_split = generate_split(&train_cfg_x, train_spec)?;
    let test_split = generate_split(&test_cfg_x, test_spec)?;

    let mut model = Detector::build(cfg.vit_config(), cfg.lora_config()?, mode, cfg.seed)?;
    model.flip_difference = cfg.model.flip_difference;
    train(
        &mut model,
        &train_split.train,
        &cfg.train_config(),
        &FocalLossConfig::default(),
    )?;
    let records = score_pairs(&model, &test_split.test)?;
    Ok((evaluate(&records)?, records))
}

pub fn run_grid(cfg: &ExperimentConfig, out: &Path, parallel: usize) -> Result<Vec<GridRow>> {
    cfg.validate()?;
    cfg.validate_grid()?;
    fs::create_dir_all(out)?;

    let mut cells = Vec::new();
    for &rank in &cfg.grid.ranks {
        for &alpha in &cfg.grid.alphas {
            for &dropout in &cfg.grid.dropouts {
                cells.push((rank, alpha, dropout));
            }
        }
    }

    let run_cell = |(rank, alpha, dropout): (usize, f64, f64)| -> GridRow {
        let mut cell_cfg = cfg.clone();
        cell_cfg.lora.rank = rank;
        cell_cfg.lora.alpha = alpha;
        cell_cfg.lora.dropout = dropout;
        let result = (|| -> Result<Vec<[f64; 4]>> {
            let spec = matched_split_spec(&cell_cfg)?;
            let [a, b] = cfg.protocol.db_seeds;
            let mode = cell_cfg.mode()?;
            let fwd = run_direction(&cell_cfg, a, b, &spec, &spec, mode)?;
            let rev = run_direction(&cell_cfg, b, a, &spec, &spec, mode)?;
            Ok(vec![direction_metrics(&fwd.0), direction_metrics(&rev.0)])
        })();
        match result {
            Ok(directions) => {
                let mut mean = [0.0; 4];
                for d in &directions {
                    for (m, v) in mean.iter_mut().zip(d.iter()) {
                        *m += v / directions.len() as f64;
                    }
                }
                GridRow {
                    rank,
                    alpha,
                    dropout,
                    status: "ok".into(),
                    directions,
                    mean,
                    best: false,
                }
            }
            Err(e) => GridRow {
                rank,
                alpha,
                dropout,
                status: format!("error: {e}"),
                directions: vec![],
                mean: [f64::NAN; 4],
                best: false,
            },
        }
    };

    let mut rows: Vec<GridRow> = if parallel > 1 {
        run_cells_parallel(&cells, parallel, &run_cell)
    } else {
        cells.iter().copied().map(run_cell).collect()
    };

    // flag the best row by mean D-EER among successful cells
    let best_idx = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.status == "ok")
        .min_by(|(_, a), (_, b)| a.mean[0].partial_cmp(&b.mean[0]).expect("finite means"))
        .map(|(i, _)| i);
    if let Some(i) = best_idx {
        rows[i].best = true;
    }

    let mut w = csv::Writer::from_path(out.join("grid.csv"))?;
    w.write_record([
        "r",
        "alpha",
        "dropout",
        "status",
        "d_eer_a_to_b",
        "bscer10_a_to_b",
        "bscer20_a_to_b",
        "bscer100_a_to_b",
        "d_eer_b_to_a",
        "bscer10_b_to_a",
        "bscer20_b_to_a",
        "bscer100_b_to_a",
        "mean_d_eer",
        "mean_bscer10",
        "mean_bscer20",
        "mean_bscer100",
        "best",
    ])?;
    for r in &rows {
        let dir = |i: usize, j: usize| -> String {
            r.directions
                .get(i)
                .map(|d| d[j].to_string())
                .unwrap_or_default()
        };
        let mut record = vec![
            r.rank.to_string(),
            r.alpha.to_string(),
            r.dropout.to_string(),
            r.status.clone(),
        ];
        for i in 0..2 {
            for j in 0..4 {
                record.push(dir(i, j));
            }
        }
        for j in 0..4 {
            record.push(if r.mean[j].is_nan() {
                String::new()
            } else {
                r.mean[j].to_string()
            });
        }
        record.push(r.best.to_string());
        w.write_record(&record)?;
    }
    w.flush()?;
    write_run_manifest(out, cfg, "grid", &[("cells", rows.len().to_string())])?;
    Ok(rows)
}

/// Independent cells on worker threads; results keep cell order.
fn run_cells_parallel(
    cells: &[(usize, f64, f64)],
    workers: usize,
    run_cell: &(dyn Fn((usize, f64, f64)) -> GridRow + Sync),
) -> Vec<GridRow> {
    let mut rows: Vec<Option<GridRow>> = Vec::new();
    rows.resize_with(cells.len(), || None);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let rows_mx = std::sync::Mutex::new(&mut rows);
    std::thread::scope(|scope| {
        for _ in 0..workers.min(cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let row = run_cell(cells[i]);
                rows_mx.lock().expect("no poisoned cells")[i] = Some(row);
            });
        }
    });
    rows.into_iter().map(|r| r.expect("all cells ran")).collect()
}

// ── protocols ────────────────────────────────────────────────────────

#[derive(Debug)]
pub struct ProtocolOutcome {
    pub rows: Vec<ProtocolRow>,
}

#[derive(Debug, Clone)]
pub struct ProtocolRow {
    pub label: String,
    pub direction: String,
    pub metrics: [f64; 4],
}

pub fn run_protocol(cfg: &ExperimentConfig, out: &Path) -> Result<ProtocolOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    match cfg.protocol_kind()? {
        ProtocolKind::KnownAttackCross => run_known_attack_cross(cfg, out),
        ProtocolKind::UnknownAttackLoo => run_unknown_attack_loo(cfg, out),
        ProtocolKind::AblationSmad => run_ablation_smad(cfg, out),
    }
}

fn write_protocol_csv(out: &Path, name: &str, rows: &[ProtocolRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(out.join(name))?;
    w.write_record(["label", "direction", "d_eer", "bscer10", "bscer20", "bscer100"])?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.direction.clone(),
            r.metrics[0].to_string(),
            r.metrics[1].to_string(),
            r.metrics[2].to_string(),
            r.metrics[3].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn run_known_attack_cross(cfg: &ExperimentConfig, out: &Path) -> Result<ProtocolOutcome> {
    let spec = matched_split_spec(cfg)?;
    let [a, b] = cfg.protocol.db_seeds;
    let mode = cfg.mode()?;
    let mut rows = Vec::new();
    for (dir_name, train_seed, test_seed) in [("a_to_b", a, b), ("b_to_a", b, a)] {
        let (report, _) = run_direction(cfg, train_seed, test_seed, &spec, &spec, mode)?;
        rows.push(ProtocolRow {
            label: cfg.data.artefact.clone(),
            direction: dir_name.into(),
            metrics: direction_metrics(&report),
        });
    }
    write_protocol_csv(out, "protocol.csv", &rows)?;
    write_run_manifest(out, cfg, "protocol:known_attack_cross", &[])?;
    Ok(ProtocolOutcome { rows })
}

/// All artefact models the generator can produce.
const ALL_TOOLS: [ArtefactModel; 2] = [ArtefactModel::LandmarkLike, ArtefactModel::DiffusionLike];

fn run_unknown_attack_loo(cfg: &ExperimentConfig, out: &Path) -> Result<ProtocolOutcome> {
    if ALL_TOOLS.len() < 2 {
        return Err(Error::Protocol(
            "leave-one-out needs at least two morph tools".into(),
        ));
    }
    let [a, b] = cfg.protocol.db_seeds;
    let mode = cfg.mode()?;
    let mut rows = Vec::new();
    for held_out in ALL_TOOLS {
        let train_tools: Vec<ArtefactModel> =
            ALL_TOOLS.iter().copied().filter(|t| *t != held_out).collect();
        let train_spec = SplitSpec {
            train_fraction: cfg.data.train_fraction,
            train_tools: train_tools.clone(),
            test_tools: train_tools.clone(),
        };
        let test_spec = SplitSpec {
            train_fraction: cfg.data.train_fraction,
            train_tools: train_tools.clone(),
            test_tools: vec![held_out],
        };
        for (dir_name, train_seed, test_seed) in [("a_to_b", a, b), ("b_to_a", b, a)] {
            let (report, _) = run_direction(cfg, train_seed, test_seed, &train_spec, &test_spec, mode)?;
            rows.push(ProtocolRow {
                label: format!("held_out:{}", held_out.as_str()),
                direction: dir_name.into(),
                metrics: direction_metrics(&report),
            });
        }
    }
    write_protocol_csv(out, "loo.csv", &rows)?;
    write_run_manifest(out, cfg, "protocol:unknown_attack_loo", &[])?;
    Ok(ProtocolOutcome { rows })
}

/// Differential vs single-image ablation on identical data and seeds.
/// Each arm regenerates the dataset from the same config, so the live
/// access probes start clean; after the single-image arm every probe
/// must still be untouched.
fn run_ablation_smad(cfg: &ExperimentConfig, out: &Path) -> Result<ProtocolOutcome> {
    let spec = matched_split_spec(cfg)?;
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    let mut smad_live_reads = 0usize;

    for mode in [DetectorMode::Differential, DetectorMode::SingleImage] {
        let split = generate_split(cfg, &spec)?;
        let mut model = Detector::build(cfg.vit_config(), cfg.lora_config()?, mode, cfg.seed)?;
        model.flip_difference = cfg.model.flip_difference;
        train(
            &mut model,
            &split.train,
            &cfg.train_config(),
            &FocalLossConfig::default(),
        )?;
        let records = score_pairs(&model, &split.test)?;
        let report = evaluate(&records)?;

        let mode_name = match mode {
            DetectorMode::Differential => "differential",
            DetectorMode::SingleImage => "single_image",
        };
        if mode == DetectorMode::SingleImage {
            smad_live_reads = split
                .train
                .iter()
                .chain(split.test.iter())
                .filter(|p| p.live_was_accessed())
                .count();
            if smad_live_reads != 0 {
                return Err(Error::Contract(format!(
                    "single-image arm read {smad_live_reads} live images"
                )));
            }
        }
        metrics::write_score_csv(&out.join(format!("scores_{mode_name}.csv")), &records)?;
        metrics::write_det_csv(&out.join(format!("det_{mode_name}.csv")), &report.det_curve)?;
        curves.push((mode_name.to_string(), report.det_curve.clone()));
        rows.push(ProtocolRow {
            label: mode_name.into(),
            direction: "matched".into(),
            metrics: direction_metrics(&report),
        });
    }

    fs::write(out.join("ablation.svg"), render_det_svg(&curves))?;
    write_protocol_csv(out, "ablation.csv", &rows)?;
    write_run_manifest(
        out,
        cfg,
        "protocol:ablation_smad",
        &[("smad_live_reads", smad_live_reads.to_string())],
    )?;
    Ok(ProtocolOutcome { rows })
}

/// Maps error kinds to stable process exit codes: 2 validation,
/// 3 I/O, 4 compatibility, 5 protocol, 1 internal numeric failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Parse { .. } => 2,
        Error::Io(_) | Error::Csv(_) => 3,
        Error::Incompatible(_) => 4,
        Error::Protocol(_) | Error::Generation(_) => 5,
        Error::ShapeMismatch { .. } | Error::NonFinite { .. } | Error::Domain { .. } => 1,
    }
}
