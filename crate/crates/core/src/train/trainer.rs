use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::{Clip, Dataset, TargetNorm, Window};
use super::metrics::EvalReport;
use super::optim::{cosine_lr, Adam, TrainConfig};
use super::{Result, TrainError};
use crate::geometry::DeviceLayout;
use crate::net::{Graph, Mode, Model, ModelConfig, Tensor};
use crate::rfsim::perturb_layout;
use crate::rng::{derive_seed, stream_rng};

const STREAM_INIT: u64 = 0x1417;
const STREAM_SHUFFLE: u64 = 0x5f1e;
const STREAM_DROPOUT: u64 = 0xd207;
const STREAM_PERTURB: u64 = 0x9e27;
const STREAM_AUGMENT: u64 = 0xa06;

/// Windows per inference batch.
const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

/// A trained network together with everything needed to run it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub model: Model<f32>,
    pub mode: Mode,
    pub norm: TargetNorm,
    pub history: Vec<EpochLog>,
}

/// Source of the receiver coordinates fed to the network at inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry {
    Calibrated,
    /// Calibrated layout with isotropic Gaussian error of std `sigma` (m) on
    /// every device coordinate, drawn per clip.
    Perturbed { sigma: f64, seed: u64 },
}

impl Geometry {
    fn layout_of(self, clip: &Clip) -> Result<DeviceLayout> {
        match self {
            Geometry::Calibrated => Ok(clip.layout.clone()),
            Geometry::Perturbed { sigma, seed } => Ok(perturb_layout(
                &clip.layout,
                sigma,
                derive_seed(seed, &[STREAM_PERTURB, clip.meta.id as u64]),
            )?),
        }
    }
}

/// Trains a fresh model on the windows of `train_ids`.
pub fn train_loop(
    data: &Dataset,
    train_ids: &[usize],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<Trained> {
    cfg.validate()?;
    data.check_model(model_cfg)?;
    let windows = data.windows(train_ids, model_cfg.seq_len)?;
    if windows.is_empty() {
        return Err(TrainError::DataMissing(format!(
            "no {}-frame windows in {} training clips",
            model_cfg.seq_len,
            train_ids.len()
        )));
    }
    let per_frame = data.joints * 3;
    let norm = TargetNorm::fit(&data.targets(&windows, model_cfg.seq_len), per_frame)?;
    let mut model = Model::<f32>::new(model_cfg.clone(), derive_seed(cfg.seed, &[STREAM_INIT]))?;
    let mut adam = Adam::new(&model.params, cfg);

    let steps_per_epoch = windows.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order = windows.clone();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.copy_from_slice(&windows);
        order.shuffle(&mut stream_rng(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let (mut loss_sum, mut lr) = (0.0, cfg.lr_init);
        for chunk in order.chunks(cfg.batch_size) {
            let geometry = if cfg.geometry_noise > 0.0 {
                Geometry::Perturbed {
                    sigma: cfg.geometry_noise,
                    seed: derive_seed(cfg.seed, &[STREAM_AUGMENT, step as u64]),
                }
            } else {
                Geometry::Calibrated
            };
            let batch = data.batch(chunk, model_cfg, &|c| geometry.layout_of(c))?;
            let target = norm.normalize(&data.targets(chunk, model_cfg.seq_len));
            let target = Tensor::new(
                vec![chunk.len(), model_cfg.seq_len, data.joints, 3],
                target.into_iter().map(|v| v as f32).collect(),
            )?;
            let grads = {
                let mut g = Graph::new(&model.params, true)
                    .with_dropout_seed(derive_seed(cfg.seed, &[STREAM_DROPOUT, step as u64]));
                let y = model.forward(&mut g, &batch, mode)?;
                let loss = g.mse_joints(y, &target)?;
                let value = g.value(loss).data()[0] as f64;
                if !value.is_finite() {
                    return Err(TrainError::Diverged { epoch, step });
                }
                loss_sum += value * chunk.len() as f64;
                g.backward(loss)?
            };
            lr = cosine_lr(cfg.lr_init, cfg.lr_final, step, total.saturating_sub(1));
            adam.step(&mut model.params, &grads, lr);
            step += 1;
        }
        history.push(EpochLog {
            epoch,
            loss: loss_sum / windows.len() as f64,
            lr,
        });
    }
    Ok(Trained {
        model,
        mode,
        norm,
        history,
    })
}

/// Predictions for every window of a set of clips.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub windows: Vec<Window>,
    /// `[windows, T, J, 3]` (mm).
    pub poses: Vec<f64>,
    /// `[windows·T, N_r·D]` decoder-head inputs.
    pub features: Vec<f32>,
    pub feature_dim: usize,
}

pub fn predict(trained: &Trained, data: &Dataset, ids: &[usize], geometry: Geometry) -> Result<Predictions> {
    let cfg = &trained.model.config;
    data.check_model(cfg)?;
    if trained.norm.mean.len() != data.joints * 3 {
        return Err(TrainError::ConfigMismatch("target normaliser does not match joint count".into()));
    }
    let windows = data.windows(ids, cfg.seq_len)?;
    let mut poses = Vec::with_capacity(windows.len() * cfg.seq_len * data.joints * 3);
    let mut features = Vec::new();
    for chunk in windows.chunks(EVAL_BATCH) {
        let batch = data.batch(chunk, cfg, &|c| geometry.layout_of(c))?;
        let (z, y) = trained.model.infer(&batch, trained.mode)?;
        let y: Vec<f64> = y.data().iter().map(|&v| v as f64).collect();
        poses.extend(trained.norm.denormalize(&y));
        features.extend_from_slice(z.data());
    }
    Ok(Predictions {
        windows,
        poses,
        features,
        feature_dim: cfg.receivers * cfg.d_model,
    })
}

pub fn evaluate(trained: &Trained, data: &Dataset, ids: &[usize], thresholds: &[f64]) -> Result<EvalReport> {
    evaluate_with(trained, data, ids, Geometry::Calibrated, thresholds)
}

pub fn evaluate_with(
    trained: &Trained,
    data: &Dataset,
    ids: &[usize],
    geometry: Geometry,
    thresholds: &[f64],
) -> Result<EvalReport> {
    let p = predict(trained, data, ids, geometry)?;
    if p.windows.is_empty() {
        return Err(TrainError::DataMissing("no evaluation windows".into()));
    }
    let t_len = trained.model.config.seq_len;
    let gt = data.targets(&p.windows, t_len);
    let errors = super::metrics::joint_errors(&p.poses, &gt)?;
    let per_window = t_len * data.joints;
    let tagged: Vec<(usize, f64)> = errors
        .iter()
        .enumerate()
        .map(|(i, &e)| (data.clips[p.windows[i / per_window].clip].meta.layout, e))
        .collect();
    EvalReport::from_errors(&tagged, data.joints, thresholds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: Mode,
    pub report: EvalReport,
}

/// Trains and evaluates one model per mode with identical data and seed.
pub fn run_ablation(
    data: &Dataset,
    train_ids: &[usize],
    test_ids: &[usize],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    modes: &[Mode],
    thresholds: &[f64],
) -> Result<Vec<AblationRow>> {
    modes
        .iter()
        .map(|&mode| {
            let trained = train_loop(data, train_ids, model_cfg, cfg, mode)?;
            Ok(AblationRow {
                mode,
                report: evaluate(&trained, data, test_ids, thresholds)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub sigma_m: f64,
    pub report: EvalReport,
}

/// Evaluates a trained model with device coordinates perturbed at each `sigma` (m).
pub fn sensitivity_sweep(
    trained: &Trained,
    data: &Dataset,
    ids: &[usize],
    sigmas: &[f64],
    seed: u64,
    thresholds: &[f64],
) -> Result<Vec<SweepPoint>> {
    sigmas
        .iter()
        .map(|&sigma| {
            Ok(SweepPoint {
                sigma_m: sigma,
                report: evaluate_with(trained, data, ids, Geometry::Perturbed { sigma, seed }, thresholds)?,
            })
        })
        .collect()
}

/// One decoder-input vector with its labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub layout: usize,
    pub sample: usize,
    pub frame: usize,
    pub values: Vec<f32>,
}

/// Per-frame decoder-head inputs for the clips in `ids`.
pub fn export_features(trained: &Trained, data: &Dataset, ids: &[usize]) -> Result<Vec<FeatureRow>> {
    let p = predict(trained, data, ids, Geometry::Calibrated)?;
    let t_len = trained.model.config.seq_len;
    Ok(p.features
        .chunks(p.feature_dim)
        .enumerate()
        .map(|(i, v)| {
            let w = p.windows[i / t_len];
            FeatureRow {
                layout: data.clips[w.clip].meta.layout,
                sample: w.clip,
                frame: w.start + i % t_len,
                values: v.to_vec(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rfsim::Action;
    use crate::train::{ring_layout, Site, SyntheticRecipe};
    use nalgebra::Vector3;
    use std::sync::OnceLock;

    fn dataset() -> &'static Dataset {
        static DATA: OnceLock<Dataset> = OnceLock::new();
        DATA.get_or_init(|| {
            let tx = Vector3::new(0.0, 0.0, 1.0);
            let sites = [1.0, 1.4]
                .iter()
                .map(|&s| Site {
                    layout: ring_layout(tx, &[-0.8, 0.0, 0.8], &[3.0 * s, 3.5 * s, 3.0 * s]).unwrap(),
                    spots: vec![vec![0.4, 0.2, 0.2, 0.2], vec![0.25, 0.25, 0.25, 0.25]],
                })
                .collect();
            SyntheticRecipe {
                sites,
                orientations: vec![0.0],
                actions: vec![Action::Jump, Action::Squat],
                repetitions: 1,
                frames_per_clip: 8,
                frame_rate: 30.0,
                placement_jitter: 0.1,
                noise_std: 1e-5,
                drift_step_std: 0.02,
                scatterers: Vec::new(),
                seed: 4,
            }
            .build(16)
            .unwrap()
        })
    }

    fn model_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            layers: 1,
            heads: 2,
            ffn_dim: 16,
            dropout: 0.1,
            joints: 17,
            receivers: 3,
            seq_len: 4,
            conv_base: 4,
            conv_blocks: 2,
            in_channels: 3,
            map_size: 16,
            bands: 4,
            extent: Some(10.0),
            head_hidden: vec![32],
        }
    }

    fn train_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            ..TrainConfig::desk()
        }
    }

    const TRAIN: [usize; 4] = [0, 1, 2, 3];
    const TEST: [usize; 4] = [4, 5, 6, 7];

    #[test]
    fn loss_falls_and_schedule_ends_at_final_rate() {
        let cfg = TrainConfig {
            lr_init: 3e-3,
            ..train_cfg(40)
        };
        let t = train_loop(dataset(), &TRAIN, &model_cfg(), &cfg, Mode::Conditioned).unwrap();
        assert_eq!(t.history.len(), 40);
        assert!(t.history.iter().all(|h| h.loss.is_finite()));
        let l: Vec<f64> = t.history.iter().map(|h| h.loss).collect();
        assert!(l[39] < 0.5 * l[0], "{l:?}");
        assert!((t.history[39].lr - cfg.lr_final).abs() < 1e-15);
        assert_eq!(t.history[0].epoch, 0);
    }

    #[test]
    fn training_is_deterministic() {
        let a = train_loop(dataset(), &TRAIN, &model_cfg(), &train_cfg(2), Mode::NoSpatialPe).unwrap();
        let b = train_loop(dataset(), &TRAIN, &model_cfg(), &train_cfg(2), Mode::NoSpatialPe).unwrap();
        assert_eq!(a, b);
        let mut other = train_cfg(2);
        other.seed = 1;
        let c = train_loop(dataset(), &TRAIN, &model_cfg(), &other, Mode::NoSpatialPe).unwrap();
        assert_ne!(a.model.params, c.model.params);
    }

    #[test]
    fn sweep_at_zero_matches_evaluation_and_exports_cover_frames() {
        let t = train_loop(dataset(), &TRAIN, &model_cfg(), &train_cfg(1), Mode::Conditioned).unwrap();
        let plain = evaluate(&t, dataset(), &TEST, &[50.0, 20.0]).unwrap();
        assert_eq!(plain.frames, 4 * 2 * 4);
        assert_eq!(plain.pck.len(), 2);
        assert_eq!(plain.per_layout.keys().copied().collect::<Vec<_>>(), vec![1]);
        let sweep = sensitivity_sweep(&t, dataset(), &TEST, &[0.0, 2.0], 9, &[50.0, 20.0]).unwrap();
        assert_eq!(sweep[0].report, plain);
        assert_ne!(sweep[1].report, plain);

        let rows = export_features(&t, dataset(), &TEST).unwrap();
        assert_eq!(rows.len(), plain.frames);
        assert!(rows.iter().all(|r| r.values.len() == 3 * 16 && r.layout == 1));
        assert!(rows.iter().all(|r| TEST.contains(&r.sample) && r.frame < 8));
        let frames: std::collections::BTreeSet<_> = rows.iter().map(|r| (r.sample, r.frame)).collect();
        assert_eq!(frames.len(), rows.len());
    }

    #[test]
    fn no_align_ignores_geometry_at_evaluation() {
        let t = train_loop(dataset(), &TRAIN, &model_cfg(), &train_cfg(1), Mode::NoAlign).unwrap();
        let plain = evaluate(&t, dataset(), &TEST, &[50.0]).unwrap();
        let moved = evaluate_with(&t, dataset(), &TEST, Geometry::Perturbed { sigma: 1.0, seed: 2 }, &[50.0]).unwrap();
        assert_eq!(plain, moved);
    }

    #[test]
    fn ablation_has_one_row_per_mode() {
        let rows = run_ablation(dataset(), &TRAIN, &TEST, &model_cfg(), &train_cfg(1), &Mode::ALL, &[50.0]).unwrap();
        let modes: Vec<Mode> = rows.iter().map(|r| r.mode).collect();
        assert_eq!(modes, Mode::ALL.to_vec());
        assert!(rows.iter().all(|r| r.report.mpjpe_mm.is_finite()));
    }

    #[test]
    fn rejects_unusable_requests() {
        let mut cfg = model_cfg();
        cfg.seq_len = 9;
        assert!(matches!(
            train_loop(dataset(), &TRAIN, &cfg, &train_cfg(1), Mode::Conditioned),
            Err(TrainError::DataMissing(_))
        ));
        cfg = model_cfg();
        cfg.map_size = 32;
        assert!(train_loop(dataset(), &TRAIN, &cfg, &train_cfg(1), Mode::Conditioned).is_err());
    }
}
