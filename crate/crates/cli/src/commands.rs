use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use wipose::io::{
    bar_chart_svg, calibrate_session, line_chart_svg, read_checkpoint, read_session, write_array, write_calibration,
    write_checkpoint, write_report, ArrayData, Calibration, DatasetIndex, PacsArray,
};
use wipose::net::Mode;
use wipose::train::{
    evaluate, export_features as export_rows, make_splits, run_ablation, sensitivity_sweep, train_loop, AblationRow,
    Dataset, EpochLog, EvalReport, SplitSpec, SweepPoint,
};

use crate::config::ExperimentConfig;
use crate::Common;

const INDEX: &str = "index.json";

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_out(c: &Common) -> Result<()> {
    std::fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))
}

pub fn calibrate(c: &Common) -> Result<()> {
    let Some(path) = &c.config else {
        bail!("calibrate needs --config <session.json>");
    };
    create_out(c)?;
    let cal = calibrate_session(&read_session(path)?)?;
    write_calibration(&c.out.join("calibration.json"), &cal)?;
    #[derive(Serialize)]
    struct Summary {
        receivers: usize,
        tx: [f64; 3],
        tx_spread_m: f64,
    }
    let tx = cal.layout.tx;
    write_report(
        &c.out.join("calibrate_report.json"),
        "calibrate",
        &Summary {
            receivers: cal.layout.n_receivers(),
            tx: [tx.x, tx.y, tx.z],
            tx_spread_m: cal.layout.tx_spread,
        },
    )?;
    Ok(())
}

pub fn simulate(c: &Common) -> Result<()> {
    let cfg = ExperimentConfig::load(c.config.as_deref())?;
    let recipe = cfg.scene.to_recipe(c.seed)?;
    create_out(c)?;
    let mut index: Option<DatasetIndex> = None;
    for meta in recipe.metas() {
        let raw = recipe.simulate_clip(&meta)?;
        let idx = index.get_or_insert_with(|| {
            let t = &raw.csi[0];
            DatasetIndex::new(t.sample_rate(), t.subcarrier_freqs().to_vec(), &c.out)
        });
        // Receivers are re-placed per session, so every clip carries its own calibration.
        let rel = PathBuf::from(format!("calibration/clip{:05}.json", meta.id));
        write_calibration(&c.out.join(&rel), &Calibration::from_layout(raw.layout.clone()))?;
        idx.add_raw_clip(&raw, &rel)?;
    }
    let mut index = index.context("scene produced no clips")?;
    index.canonicalize()?;
    index.save(&c.out.join(INDEX))?;
    #[derive(Serialize)]
    struct Summary {
        clips: usize,
        layouts: usize,
        frames_per_clip: usize,
        seed: u64,
    }
    write_report(
        &c.out.join("simulate_report.json"),
        "simulate",
        &Summary {
            clips: index.entries.len(),
            layouts: recipe.sites.len(),
            frames_per_clip: recipe.frames_per_clip,
            seed: c.seed,
        },
    )?;
    Ok(())
}

fn load_index(data: &Path) -> Result<DatasetIndex> {
    let path = if data.is_dir() { data.join(INDEX) } else { data.to_path_buf() };
    DatasetIndex::load(&path).with_context(|| format!("loading dataset index {}", path.display()))
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

pub fn preprocess(c: &Common, data: &Path, map_size: Option<usize>) -> Result<()> {
    let cfg = ExperimentConfig::load(c.config.as_deref())?;
    let size = map_size.unwrap_or(cfg.model.map_size);
    let mut index = load_index(data)?;
    create_out(c)?;
    if !same_dir(&index.root, &c.out) {
        // Raw files stay where they are; the new index points at them absolutely.
        let root = index.root.clone();
        let abs = |p: &Path| -> Result<PathBuf> {
            let full = if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
            full.canonicalize().with_context(|| format!("resolving {}", full.display()))
        };
        for e in &mut index.entries {
            e.csi = e.csi.iter().map(|p| abs(p)).collect::<Result<_>>()?;
            e.poses = abs(&e.poses)?;
            e.calibration = abs(&e.calibration)?;
            e.features = None;
        }
        index.root = c.out.clone();
        index.map_size = None;
    }
    let ids: Vec<usize> = index.entries.iter().map(|e| e.meta.id).collect();
    for id in ids {
        let clip = index.read_raw_clip(id)?.featurize(size)?;
        index.set_features(&clip, size)?;
    }
    index.save(&c.out.join(INDEX))?;
    Ok(())
}

struct Loaded {
    cfg: ExperimentConfig,
    data: Dataset,
    train: Vec<usize>,
    test: Vec<usize>,
}

fn load_experiment(c: &Common, data: &Path) -> Result<Loaded> {
    let mut cfg = ExperimentConfig::load(c.config.as_deref())?;
    cfg.train.seed = c.seed;
    let data = load_index(data)?.read_dataset()?;
    if data.map_size != cfg.model.map_size {
        bail!(
            "dataset maps are {}², model expects {}²; rerun preprocess with --map-size {}",
            data.map_size,
            cfg.model.map_size,
            cfg.model.map_size
        );
    }
    let (train, test) = make_splits(&data.metas(), &cfg.split)?;
    Ok(Loaded { cfg, data, train, test })
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    mode: Mode,
    split: &'a SplitSpec,
    train_clips: usize,
    history: &'a [EpochLog],
}

pub fn train(c: &Common, data: &Path, mode: Option<Mode>, epochs: Option<usize>) -> Result<()> {
    let mut x = load_experiment(c, data)?;
    if let Some(e) = epochs {
        x.cfg.train.epochs = e;
    }
    let mode = mode.unwrap_or(x.cfg.mode);
    let trained = train_loop(&x.data, &x.train, &x.cfg.model, &x.cfg.train, mode)?;
    create_out(c)?;
    write_checkpoint(&c.out.join("model.ckpt"), &trained)?;
    write_report(
        &c.out.join("train_report.json"),
        "train",
        &TrainSummary {
            mode,
            split: &x.cfg.split,
            train_clips: x.train.len(),
            history: &trained.history,
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    mode: Mode,
    split: &'a SplitSpec,
    test_clips: usize,
    report: EvalReport,
}

pub fn eval(c: &Common, data: &Path, checkpoint: &Path) -> Result<()> {
    let x = load_experiment(c, data)?;
    let trained = read_checkpoint(checkpoint)?;
    let report = evaluate(&trained, &x.data, &x.test, &x.cfg.pck_thresholds_mm)?;
    create_out(c)?;
    write_report(
        &c.out.join("eval_report.json"),
        "eval",
        &EvalSummary {
            mode: trained.mode,
            split: &x.cfg.split,
            test_clips: x.test.len(),
            report,
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct AblationSummary<'a> {
    split: &'a SplitSpec,
    rows: Vec<AblationRow>,
}

pub fn ablate(c: &Common, data: &Path, epochs: Option<usize>) -> Result<()> {
    let mut x = load_experiment(c, data)?;
    if let Some(e) = epochs {
        x.cfg.train.epochs = e;
    }
    let rows = run_ablation(
        &x.data,
        &x.train,
        &x.test,
        &x.cfg.model,
        &x.cfg.train,
        &Mode::ALL,
        &x.cfg.pck_thresholds_mm,
    )?;
    create_out(c)?;
    let bars: Vec<(String, f64)> = rows.iter().map(|r| (r.mode.to_string(), r.report.mpjpe_mm)).collect();
    write_text(&c.out.join("ablation.svg"), &bar_chart_svg("Ablation", "MPJPE (mm)", &bars))?;
    write_report(
        &c.out.join("ablation_report.json"),
        "ablate",
        &AblationSummary {
            split: &x.cfg.split,
            rows,
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct SweepSummary<'a> {
    mode: Mode,
    split: &'a SplitSpec,
    seed: u64,
    points: Vec<SweepPoint>,
}

pub fn perturb(c: &Common, data: &Path, checkpoint: &Path, sigmas: &[f64]) -> Result<()> {
    let x = load_experiment(c, data)?;
    let sigmas = if sigmas.is_empty() { &x.cfg.sigmas_m[..] } else { sigmas };
    if sigmas.iter().any(|s| !(*s >= 0.0)) {
        bail!("--sigma must be >= 0");
    }
    let trained = read_checkpoint(checkpoint)?;
    let points = sensitivity_sweep(&trained, &x.data, &x.test, sigmas, c.seed, &x.cfg.pck_thresholds_mm)?;
    create_out(c)?;
    let curve: Vec<(f64, f64)> = points.iter().map(|p| (p.sigma_m, p.report.mpjpe_mm)).collect();
    write_text(
        &c.out.join("sensitivity.svg"),
        &line_chart_svg("Coordinate perturbation", "sigma (m)", "MPJPE (mm)", &curve),
    )?;
    write_report(
        &c.out.join("sensitivity_report.json"),
        "perturb",
        &SweepSummary {
            mode: trained.mode,
            split: &x.cfg.split,
            seed: c.seed,
            points,
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct FeatureLabel {
    layout: usize,
    sample: usize,
    frame: usize,
}

#[derive(Serialize)]
struct FeatureSummary {
    rows: usize,
    dim: usize,
    labels: Vec<FeatureLabel>,
}

pub fn export_features(c: &Common, data: &Path, checkpoint: &Path) -> Result<()> {
    let x = load_experiment(c, data)?;
    let trained = read_checkpoint(checkpoint)?;
    let rows = export_rows(&trained, &x.data, &x.test)?;
    let dim = rows.first().map_or(0, |r| r.values.len());
    let values: Vec<f32> = rows.iter().flat_map(|r| r.values.iter().copied()).collect();
    create_out(c)?;
    write_array(
        &c.out.join("features.pacs"),
        &PacsArray::new(vec![rows.len(), dim], ArrayData::F32(values))?,
    )?;
    write_report(
        &c.out.join("feature_labels.json"),
        "export-features",
        &FeatureSummary {
            rows: rows.len(),
            dim,
            labels: rows
                .iter()
                .map(|r| FeatureLabel {
                    layout: r.layout,
                    sample: r.sample,
                    frame: r.frame,
                })
                .collect(),
        },
    )?;
    Ok(())
}
