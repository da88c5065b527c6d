use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::splits::SampleMeta;
use super::{Result, TrainError};
use crate::csi::{receiver_features, CsiTensor, FeatureConfig};
use crate::geometry::DeviceLayout;
use crate::net::{Batch, ModelConfig, Tensor};
use crate::rfsim::{generate_motion, perturb_layout, synth_csi, Action, RfScene, StaticScatterer};
use crate::rng::derive_seed;

/// One nominal deployment: device layout plus the activity spots used with it.
#[derive(Debug, Clone, PartialEq)]
pub struct Site {
    pub layout: DeviceLayout,
    /// Activity spots as affine weights over `[tx, rx_0, .., rx_{N-1}]`; the
    /// pelvis is placed at the weighted device position projected to the
    /// floor, so spots follow the devices when a session re-places them.
    pub spots: Vec<Vec<f64>>,
}

impl Site {
    pub fn validate(&self) -> Result<()> {
        let n = self.layout.n_receivers() + 1;
        for w in &self.spots {
            if w.len() != n || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(TrainError::InvalidConfig(format!(
                    "spot weights {w:?} must have {n} entries summing to 1"
                )));
            }
        }
        Ok(())
    }

    /// Floor position of spot `i` for a (possibly re-placed) layout.
    pub fn spot_position(&self, layout: &DeviceLayout, i: usize) -> Vector3<f64> {
        let w = &self.spots[i];
        let mut p = layout.tx * w[0];
        for (rx, wi) in layout.rxs.iter().zip(&w[1..]) {
            p += rx * *wi;
        }
        Vector3::new(p.x, p.y, 0.0)
    }
}

/// Synthetic dataset recipe: every site × location × orientation × action ×
/// repetition becomes one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRecipe {
    pub sites: Vec<Site>,
    /// Facing angles (rad) about the vertical.
    pub orientations: Vec<f64>,
    pub actions: Vec<Action>,
    pub repetitions: usize,
    pub frames_per_clip: usize,
    pub frame_rate: f64,
    /// Std (m) of the per-clip re-placement of each receiver around its nominal
    /// position; the transmitter stays put.
    pub placement_jitter: f64,
    pub noise_std: f64,
    pub drift_step_std: f64,
    pub scatterers: Vec<StaticScatterer>,
    pub seed: u64,
}

const STREAM_PLACEMENT: u64 = 0x91ac;
const STREAM_MOTION: u64 = 0x3071;
const STREAM_CSI: u64 = 0xc51;

/// Scales of the three desk deployments relative to the first; the third is
/// the held-out layout and lies between the other two.
pub const DESK_LAYOUT_SCALES: [f64; 3] = [1.0, 1.6, 1.15];

impl SyntheticRecipe {
    /// Desk-scale dataset: 3 layouts × 5 spots × 3 orientations × 6 actions.
    ///
    /// Layouts share the transmitter and the receiver bearings and differ in
    /// range. Spots are affine combinations of the device positions, so each
    /// sits at the same relative place in every layout.
    pub fn desk(seed: u64) -> Self {
        let tx = Vector3::new(0.0, 0.0, 1.0);
        let b = 50f64.to_radians();
        let sites = DESK_LAYOUT_SCALES
            .iter()
            .map(|&s| Site {
                layout: ring_layout(tx, &[-b, 0.0, b], &[3.0 * s, 3.6 * s, 3.0 * s]).expect("desk layout is valid"),
                spots: vec![
                    vec![0.325, 0.225, 0.225, 0.225],
                    vec![0.2875, 0.2125, 0.2875, 0.2125],
                    vec![0.2875, 0.275, 0.225, 0.2125],
                    vec![0.2875, 0.2125, 0.225, 0.275],
                    vec![0.25, 0.25, 0.25, 0.25],
                ],
            })
            .collect();
        Self {
            sites,
            orientations: vec![0.0, 120f64.to_radians(), 240f64.to_radians()],
            actions: DESK_ACTIONS.to_vec(),
            repetitions: 1,
            frames_per_clip: 16,
            frame_rate: 30.0,
            placement_jitter: 0.25,
            noise_std: 1e-5,
            drift_step_std: 0.02,
            scatterers: Vec::new(),
            seed,
        }
    }

    pub fn n_clips(&self) -> usize {
        self.sites.iter().map(|s| s.spots.len()).sum::<usize>()
            * self.orientations.len()
            * self.actions.len()
            * self.repetitions
    }

    /// Clip labels in generation order; ids are consecutive from 0.
    pub fn metas(&self) -> Vec<SampleMeta> {
        let mut out = Vec::with_capacity(self.n_clips());
        for (layout, site) in self.sites.iter().enumerate() {
            for location in 0..site.spots.len() {
                for orientation in 0..self.orientations.len() {
                    for &action in &self.actions {
                        for repetition in 0..self.repetitions {
                            out.push(SampleMeta {
                                id: out.len(),
                                scene: 0,
                                layout,
                                subject: repetition,
                                location,
                                orientation,
                                action,
                                repetition,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.n_clips() == 0 {
            return bad("recipe produces no clips");
        }
        if self.frames_per_clip == 0 || !(self.frame_rate > 0.0) {
            return bad("clips need a positive length and frame rate");
        }
        if !(self.placement_jitter >= 0.0) {
            return bad("placement jitter must be >= 0");
        }
        let n_r = self.sites[0].layout.n_receivers();
        if self.sites.iter().any(|s| s.layout.n_receivers() != n_r) {
            return bad("all sites need the same receiver count");
        }
        for s in &self.sites {
            s.layout.validate()?;
            s.validate()?;
        }
        Ok(())
    }

    fn scene(&self, layout: DeviceLayout) -> Result<RfScene> {
        let mut scene = RfScene::new(layout)?.with_scatterers(self.scatterers.clone())?;
        scene.noise_std = self.noise_std;
        scene.drift_step_std = self.drift_step_std;
        Ok(scene)
    }

    /// Simulates one clip: calibrated layout, raw CSI per receiver and poses.
    pub fn simulate_clip(&self, meta: &SampleMeta) -> Result<RawClip> {
        let site = self.sites.get(meta.layout).ok_or_else(|| {
            TrainError::InvalidConfig(format!("clip {} names missing site {}", meta.id, meta.layout))
        })?;
        let id = meta.id as u64;
        // The transmitter is the fixed anchor of a site; only receivers are re-placed.
        let mut layout = perturb_layout(
            &site.layout,
            self.placement_jitter,
            derive_seed(self.seed, &[STREAM_PLACEMENT, id]),
        )?;
        layout.tx = site.layout.tx;
        layout.validate()?;
        let motion = generate_motion(
            meta.action,
            self.frames_per_clip as f64 / self.frame_rate,
            self.frame_rate,
            site.spot_position(&layout, meta.location),
            self.orientations[meta.orientation],
            derive_seed(self.seed, &[STREAM_MOTION, meta.subject as u64, meta.repetition as u64, id]),
        )?;
        let csi = synth_csi(&self.scene(layout.clone())?, &motion, derive_seed(self.seed, &[STREAM_CSI, id]))?;
        let poses = motion
            .frames
            .iter()
            .flat_map(|f| f.iter().flat_map(|j| [j.x * 1e3, j.y * 1e3, j.z * 1e3]))
            .collect();
        Ok(RawClip {
            meta: meta.clone(),
            layout,
            frames: motion.n_frames(),
            csi,
            poses,
        })
    }

    /// Simulates and featurises every clip.
    pub fn build(&self, map_size: usize) -> Result<Dataset> {
        self.validate()?;
        let clips = self
            .metas()
            .par_iter()
            .map(|m| self.simulate_clip(m)?.featurize(map_size))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(clips, map_size)
    }
}

/// Simulated or recorded clip before feature extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct RawClip {
    pub meta: SampleMeta,
    /// Calibrated layout of the recording session.
    pub layout: DeviceLayout,
    pub frames: usize,
    /// Raw CSI per receiver.
    pub csi: Vec<CsiTensor>,
    /// `[frames, J, 3]` ground-truth joints (mm).
    pub poses: Vec<f64>,
}

impl RawClip {
    pub fn featurize(&self, map_size: usize) -> Result<Clip> {
        let cfg = FeatureConfig::square(map_size);
        let mut maps = Vec::with_capacity(self.csi.len() * self.frames * map_size * map_size);
        for (rx, csi) in self.csi.iter().enumerate() {
            for fm in receiver_features(csi, self.frames, &cfg, rx)? {
                maps.extend(fm.panel().iter().copied());
            }
        }
        Clip::new(self.meta.clone(), self.layout.clone(), self.frames, map_size, maps, self.poses.clone())
    }
}

/// Featurised clip: one single-channel map per (receiver, frame).
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub meta: SampleMeta,
    pub layout: DeviceLayout,
    pub frames: usize,
    /// `[N_r, frames, S, S]`.
    pub maps: Vec<f32>,
    /// `[frames, J, 3]` (mm).
    pub poses: Vec<f64>,
}

impl Clip {
    pub fn new(
        meta: SampleMeta,
        layout: DeviceLayout,
        frames: usize,
        map_size: usize,
        maps: Vec<f32>,
        poses: Vec<f64>,
    ) -> Result<Self> {
        let n_r = layout.n_receivers();
        if maps.len() != n_r * frames * map_size * map_size {
            return Err(TrainError::ShapeMismatch(format!(
                "clip {}: {} map values for {n_r} receivers × {frames} frames of {map_size}²",
                meta.id,
                maps.len()
            )));
        }
        if frames == 0 || poses.len() % (frames * 3) != 0 {
            return Err(TrainError::ShapeMismatch(format!(
                "clip {}: {} pose values for {frames} frames",
                meta.id,
                poses.len()
            )));
        }
        Ok(Self {
            meta,
            layout,
            frames,
            maps,
            poses,
        })
    }

    pub fn joints(&self) -> usize {
        self.poses.len() / (self.frames * 3)
    }

    fn map(&self, rx: usize, frame: usize, map_size: usize) -> &[f32] {
        let len = map_size * map_size;
        let start = (rx * self.frames + frame) * len;
        &self.maps[start..start + len]
    }
}

/// A window of consecutive frames of one clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub clip: usize,
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub map_size: usize,
    pub receivers: usize,
    pub joints: usize,
    /// Indexed by clip id.
    pub clips: Vec<Clip>,
}

impl Dataset {
    pub fn new(mut clips: Vec<Clip>, map_size: usize) -> Result<Self> {
        clips.sort_by_key(|c| c.meta.id);
        let first = clips
            .first()
            .ok_or_else(|| TrainError::DataMissing("dataset has no clips".into()))?;
        let (receivers, joints) = (first.layout.n_receivers(), first.joints());
        for (i, c) in clips.iter().enumerate() {
            if c.meta.id != i {
                return Err(TrainError::InvalidConfig(format!("clip ids must be 0..n, found {} at {i}", c.meta.id)));
            }
            if c.layout.n_receivers() != receivers || c.joints() != joints {
                return Err(TrainError::ShapeMismatch(format!("clip {i} differs in receivers or joints")));
            }
        }
        Ok(Self {
            map_size,
            receivers,
            joints,
            clips,
        })
    }

    pub fn metas(&self) -> Vec<SampleMeta> {
        self.clips.iter().map(|c| c.meta.clone()).collect()
    }

    /// Non-overlapping windows of `len` frames over the given clips.
    pub fn windows(&self, ids: &[usize], len: usize) -> Result<Vec<Window>> {
        let mut out = Vec::new();
        for &id in ids {
            let clip = self
                .clips
                .get(id)
                .ok_or_else(|| TrainError::DataMissing(format!("no clip {id}")))?;
            out.extend((0..clip.frames / len).map(|w| Window {
                clip: id,
                start: w * len,
            }));
        }
        Ok(out)
    }

    pub fn check_model(&self, cfg: &ModelConfig) -> Result<()> {
        if cfg.receivers != self.receivers || cfg.map_size != self.map_size || cfg.joints != self.joints {
            return Err(TrainError::ConfigMismatch(format!(
                "model expects {} receivers, {}² maps, {} joints; data has {}, {}², {}",
                cfg.receivers, cfg.map_size, cfg.joints, self.receivers, self.map_size, self.joints
            )));
        }
        if cfg.in_channels != 3 {
            return Err(TrainError::ConfigMismatch("feature maps have 3 channels".into()));
        }
        Ok(())
    }

    /// Network inputs for `windows`, with receiver offsets from `layout_of`.
    pub fn batch(
        &self,
        windows: &[Window],
        cfg: &ModelConfig,
        layout_of: &dyn Fn(&Clip) -> Result<DeviceLayout>,
    ) -> Result<Batch<f32>> {
        self.check_model(cfg)?;
        let (s, t_len) = (self.map_size, cfg.seq_len);
        let mut data = Vec::with_capacity(windows.len() * self.receivers * t_len * s * s * 3);
        let mut offsets = Vec::with_capacity(windows.len() * self.receivers);
        for w in windows {
            let clip = &self.clips[w.clip];
            if w.start + t_len > clip.frames {
                return Err(TrainError::ShapeMismatch(format!("window {w:?} past clip end")));
            }
            for rx in 0..self.receivers {
                for t in 0..t_len {
                    for &v in clip.map(rx, w.start + t, s) {
                        data.extend_from_slice(&[v, v, v]);
                    }
                }
            }
            offsets.extend(layout_of(clip)?.offsets());
        }
        Ok(Batch {
            size: windows.len(),
            maps: Tensor::new(vec![windows.len() * self.receivers * t_len, s, s, 3], data)?,
            offsets,
        })
    }

    /// `[B, T, J, 3]` ground truth (mm).
    pub fn targets(&self, windows: &[Window], seq_len: usize) -> Vec<f64> {
        let per = self.joints * 3;
        windows
            .iter()
            .flat_map(|w| {
                let c = &self.clips[w.clip];
                c.poses[w.start * per..(w.start + seq_len) * per].iter().copied()
            })
            .collect()
    }
}

/// Affine map between millimetres and the network's output units: a
/// per-coordinate mean and one shared scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetNorm {
    pub mean: Vec<f64>,
    pub scale: f64,
}

impl TargetNorm {
    /// Fitted on `[.., J·3]` targets.
    pub fn fit(targets: &[f64], per_frame: usize) -> Result<Self> {
        if per_frame == 0 || targets.is_empty() || targets.len() % per_frame != 0 {
            return Err(TrainError::DataMissing("no targets to normalise".into()));
        }
        let n = (targets.len() / per_frame) as f64;
        let mut mean = vec![0.0; per_frame];
        for row in targets.chunks(per_frame) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let var = targets
            .chunks(per_frame)
            .flat_map(|row| row.iter().zip(&mean).map(|(v, m)| (v - m).powi(2)))
            .sum::<f64>()
            / targets.len() as f64;
        Ok(Self {
            mean,
            scale: var.sqrt().max(1.0),
        })
    }

    pub fn normalize(&self, mm: &[f64]) -> Vec<f64> {
        let k = self.mean.len();
        mm.iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % k]) / self.scale)
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        let k = self.mean.len();
        z.iter()
            .enumerate()
            .map(|(i, v)| v * self.scale + self.mean[i % k])
            .collect()
    }
}

/// Three-receiver deployment around a transmitter at `tx`, receivers at
/// bearings `bearings` (rad) and horizontal ranges `ranges` (m), all at the
/// transmitter's height.
pub fn ring_layout(tx: Vector3<f64>, bearings: &[f64], ranges: &[f64]) -> Result<DeviceLayout> {
    let rxs = bearings
        .iter()
        .zip(ranges)
        .map(|(b, r)| tx + Vector3::new(r * b.cos(), r * b.sin(), 0.0))
        .collect();
    Ok(DeviceLayout::new(tx, rxs)?)
}

/// Actions used by the default synthetic recipe.
pub const DESK_ACTIONS: [Action; 6] = [
    Action::BothArmsStretch,
    Action::LeftForwardLunge,
    Action::Jump,
    Action::PickUp,
    Action::JumpingJack,
    Action::Squat,
];

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_recipe() -> SyntheticRecipe {
        let layout = ring_layout(Vector3::new(0.0, 0.0, 1.0), &[-0.6, 0.0, 0.6], &[3.0, 3.5, 3.0]).unwrap();
        SyntheticRecipe {
            sites: vec![Site {
                layout,
                spots: vec![vec![0.5, 0.2, 0.1, 0.2], vec![0.4, 0.1, 0.2, 0.3]],
            }],
            orientations: vec![0.0],
            actions: vec![Action::Jump, Action::Squat],
            repetitions: 1,
            frames_per_clip: 4,
            frame_rate: 30.0,
            placement_jitter: 0.0,
            noise_std: 1e-6,
            drift_step_std: 0.01,
            scatterers: Vec::new(),
            seed: 3,
        }
    }

    #[test]
    fn build_shapes_and_determinism() {
        let r = tiny_recipe();
        assert_eq!(r.n_clips(), 4);
        let d = r.build(16).unwrap();
        assert_eq!(d.clips.len(), 4);
        assert_eq!((d.receivers, d.joints), (3, 17));
        let c = &d.clips[1];
        assert_eq!(c.maps.len(), 3 * 4 * 16 * 16);
        assert_eq!(c.poses.len(), 4 * 17 * 3);
        assert!(c.maps.iter().all(|v| v.is_finite()));
        assert_eq!(d, r.build(16).unwrap());
        let metas = d.metas();
        assert_eq!(metas[1].action, Action::Squat);
        assert_eq!(metas[2].location, 1);
    }

    #[test]
    fn windows_and_batches() {
        let d = tiny_recipe().build(16).unwrap();
        let w = d.windows(&[0, 2], 2).unwrap();
        assert_eq!(w.len(), 4);
        assert_eq!(w[1], Window { clip: 0, start: 2 });
        let mut cfg = ModelConfig::desk();
        cfg.map_size = 16;
        cfg.seq_len = 2;
        let b = d.batch(&w[..3], &cfg, &|c| Ok(c.layout.clone())).unwrap();
        assert_eq!(b.maps.shape(), &[3 * 3 * 2, 16, 16, 3]);
        assert_eq!(b.offsets.len(), 9);
        // Image (sample 1, receiver 2, frame 1) = clip 0, frame 3.
        let img = (1 * 3 + 2) * 2 + 1;
        let px = 16 * 16 * 3;
        let got = &b.maps.data()[img * px..img * px + 3];
        let want = d.clips[0].map(2, 3, 16)[0];
        assert_eq!(got, &[want, want, want]);
        let t = d.targets(&w[..1], 2);
        assert_eq!(t, d.clips[0].poses[..2 * 51].to_vec());

        cfg.map_size = 32;
        assert!(matches!(d.batch(&w, &cfg, &|c| Ok(c.layout.clone())), Err(TrainError::ConfigMismatch(_))));
    }

    #[test]
    fn target_norm_round_trip() {
        let t: Vec<f64> = (0..60).map(|i| (i as f64 * 37.0) % 101.0 - 20.0).collect();
        let n = TargetNorm::fit(&t, 6).unwrap();
        let z = n.normalize(&t);
        let ms = z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64;
        assert!((ms - 1.0).abs() < 1e-9);
        let back = n.denormalize(&z);
        assert!(back.iter().zip(&t).all(|(a, b)| (a - b).abs() < 1e-9));
        assert!(TargetNorm::fit(&t[..5], 6).is_err());
    }

    #[test]
    fn placement_jitter_moves_devices() {
        let mut r = tiny_recipe();
        r.placement_jitter = 0.1;
        let metas = r.metas();
        let a = r.simulate_clip(&metas[0]).unwrap();
        let b = r.simulate_clip(&metas[1]).unwrap();
        assert_ne!(a.layout, b.layout);
        assert_ne!(a.layout, r.sites[0].layout);
        // Spots follow the re-placed devices.
        let pelvis = |c: &RawClip| Vector3::new(c.poses[0], c.poses[1], 0.0) / 1e3;
        let expect = r.sites[0].spot_position(&a.layout, 0);
        assert!((pelvis(&a) - expect).norm() < 0.2);
    }

    #[test]
    fn spot_weights_are_checked() {
        let mut r = tiny_recipe();
        r.sites[0].spots.push(vec![0.5, 0.5, 0.5, 0.0]);
        assert!(r.validate().is_err());
        let layout = &r.sites[0].layout;
        let p = r.sites[0].spot_position(layout, 0);
        let manual = layout.tx * 0.5 + layout.rxs[0] * 0.2 + layout.rxs[1] * 0.1 + layout.rxs[2] * 0.2;
        assert_eq!(p, Vector3::new(manual.x, manual.y, 0.0));
    }
}
