use std::path::Path;

use anyhow::{bail, Context, Result};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use wipose::geometry::DeviceLayout;
use wipose::net::{Mode, ModelConfig};
use wipose::rfsim::Action;
use wipose::train::{Protocol, Site, SplitSpec, SyntheticRecipe, TrainConfig, DEFAULT_PCK_THRESHOLDS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteConfig {
    pub tx: [f64; 3],
    pub rxs: Vec<[f64; 3]>,
    /// Affine weights over (tx, rx0, rx1, ...) per standing spot.
    pub spots: Vec<Vec<f64>>,
}

/// Serialisable form of [`SyntheticRecipe`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub sites: Vec<SiteConfig>,
    pub orientations_deg: Vec<f64>,
    pub actions: Vec<Action>,
    pub repetitions: usize,
    pub frames_per_clip: usize,
    pub frame_rate: f64,
    pub placement_jitter: f64,
    pub noise_std: f64,
    pub drift_step_std: f64,
}

fn arr(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn vec3(a: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

impl SceneConfig {
    pub fn from_recipe(r: &SyntheticRecipe) -> Self {
        Self {
            sites: r
                .sites
                .iter()
                .map(|s| SiteConfig {
                    tx: arr(&s.layout.tx),
                    rxs: s.layout.rxs.iter().map(arr).collect(),
                    spots: s.spots.clone(),
                })
                .collect(),
            orientations_deg: r.orientations.iter().map(|a| a.to_degrees()).collect(),
            actions: r.actions.clone(),
            repetitions: r.repetitions,
            frames_per_clip: r.frames_per_clip,
            frame_rate: r.frame_rate,
            placement_jitter: r.placement_jitter,
            noise_std: r.noise_std,
            drift_step_std: r.drift_step_std,
        }
    }

    pub fn to_recipe(&self, seed: u64) -> Result<SyntheticRecipe> {
        let sites = self
            .sites
            .iter()
            .map(|s| {
                Ok(Site {
                    layout: DeviceLayout::new(vec3(&s.tx), s.rxs.iter().map(vec3).collect())?,
                    spots: s.spots.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let recipe = SyntheticRecipe {
            sites,
            orientations: self.orientations_deg.iter().map(|a| a.to_radians()).collect(),
            actions: self.actions.clone(),
            repetitions: self.repetitions,
            frames_per_clip: self.frames_per_clip,
            frame_rate: self.frame_rate,
            placement_jitter: self.placement_jitter,
            noise_std: self.noise_std,
            drift_step_std: self.drift_step_std,
            scatterers: Vec::new(),
            seed,
        };
        recipe.validate()?;
        Ok(recipe)
    }
}

/// One file configures every stage; missing sections take the desk defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub mode: Mode,
    pub pck_thresholds_mm: Vec<f64>,
    pub sigmas_m: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::from_recipe(&SyntheticRecipe::desk(0)),
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            split: SplitSpec {
                protocol: Protocol::CrossLayout,
                held_out: 2,
                seed: 0,
            },
            mode: Mode::Conditioned,
            pck_thresholds_mm: DEFAULT_PCK_THRESHOLDS.to_vec(),
            sigmas_m: vec![0.0, 0.01, 0.1, 0.5, 1.0],
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg: Self = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
        };
        cfg.model.validate()?;
        cfg.train.validate()?;
        if cfg.pck_thresholds_mm.iter().any(|t| !(*t > 0.0)) {
            bail!("PCK thresholds must be positive");
        }
        if cfg.sigmas_m.iter().any(|s| !(*s >= 0.0)) {
            bail!("perturbation sigmas must be >= 0");
        }
        Ok(cfg)
    }
}
