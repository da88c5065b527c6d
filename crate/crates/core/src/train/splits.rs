use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::rfsim::Action;
use crate::rng::stream_rng;

/// Labels of one recorded clip (an action instance).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: usize,
    pub scene: usize,
    pub layout: usize,
    pub subject: usize,
    pub location: usize,
    pub orientation: usize,
    pub action: Action,
    pub repetition: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Seeded 80/20 split of the action instances of one scene.
    PerScene8020,
    CrossSubject,
    CrossScene,
    CrossLayout,
    CrossOrientation,
    CrossLocation,
}

impl Protocol {
    pub const ALL: [Protocol; 6] = [
        Protocol::PerScene8020,
        Protocol::CrossSubject,
        Protocol::CrossScene,
        Protocol::CrossLayout,
        Protocol::CrossOrientation,
        Protocol::CrossLocation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::PerScene8020 => "per_scene_80_20",
            Protocol::CrossSubject => "cross_subject",
            Protocol::CrossScene => "cross_scene",
            Protocol::CrossLayout => "cross_layout",
            Protocol::CrossOrientation => "cross_orientation",
            Protocol::CrossLocation => "cross_location",
        }
    }

    fn key(self, m: &SampleMeta) -> usize {
        match self {
            Protocol::PerScene8020 | Protocol::CrossScene => m.scene,
            Protocol::CrossSubject => m.subject,
            Protocol::CrossLayout => m.layout,
            Protocol::CrossOrientation => m.orientation,
            Protocol::CrossLocation => m.location,
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|p| p.name() == key)
            .ok_or_else(|| TrainError::InvalidConfig(format!("unknown protocol '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub protocol: Protocol,
    /// Held-out value of the protocol's attribute (scene id for the 80/20 split).
    pub held_out: usize,
    /// Shuffle seed for the 80/20 split.
    pub seed: u64,
}

/// Deterministic (train ids, test ids), both ascending.
pub fn make_splits(entries: &[SampleMeta], spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    let p = spec.protocol;
    if !entries.iter().any(|m| p.key(m) == spec.held_out) {
        return Err(TrainError::UnknownHeldOut {
            protocol: p.name().into(),
            id: spec.held_out,
        });
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    if p == Protocol::PerScene8020 {
        let mut ids: Vec<usize> = entries.iter().filter(|m| m.scene == spec.held_out).map(|m| m.id).collect();
        ids.sort_unstable();
        ids.shuffle(&mut stream_rng(spec.seed, &[0x5b1_u64, spec.held_out as u64]));
        let n_test = ((ids.len() as f64) * 0.2).round().max(1.0) as usize;
        test.extend_from_slice(&ids[..n_test.min(ids.len())]);
        train.extend_from_slice(&ids[n_test.min(ids.len())..]);
    } else {
        for m in entries {
            if p.key(m) == spec.held_out {
                test.push(m.id);
            } else {
                train.push(m.id);
            }
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> Vec<SampleMeta> {
        let mut out = Vec::new();
        for layout in 0..3 {
            for location in 0..2 {
                for orientation in 0..2 {
                    for (ai, action) in [Action::Jump, Action::Squat].into_iter().enumerate() {
                        out.push(SampleMeta {
                            id: out.len(),
                            scene: layout % 2,
                            layout,
                            subject: (location + ai) % 2,
                            location,
                            orientation,
                            action,
                            repetition: 0,
                        });
                    }
                }
            }
        }
        out
    }

    #[test]
    fn cross_layout_holds_out_one_layout() {
        let g = grid();
        let spec = SplitSpec {
            protocol: Protocol::CrossLayout,
            held_out: 2,
            seed: 0,
        };
        let (train, test) = make_splits(&g, &spec).unwrap();
        assert!(test.iter().all(|&i| g[i].layout == 2));
        assert!(train.iter().all(|&i| g[i].layout < 2));
        assert_eq!(train.len() + test.len(), g.len());
    }

    #[test]
    fn eighty_twenty_of_ten() {
        let g: Vec<SampleMeta> = (0..10)
            .map(|id| SampleMeta {
                id,
                scene: 0,
                layout: 0,
                subject: 0,
                location: 0,
                orientation: 0,
                action: Action::Jump,
                repetition: id,
            })
            .collect();
        let spec = SplitSpec {
            protocol: Protocol::PerScene8020,
            held_out: 0,
            seed: 7,
        };
        let (train, test) = make_splits(&g, &spec).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        assert_eq!(make_splits(&g, &spec).unwrap(), (train, test));
    }

    #[test]
    fn unknown_held_out() {
        let spec = SplitSpec {
            protocol: Protocol::CrossSubject,
            held_out: 9,
            seed: 0,
        };
        assert!(matches!(make_splits(&grid(), &spec), Err(TrainError::UnknownHeldOut { .. })));
        assert_eq!("cross-layout".parse::<Protocol>().unwrap(), Protocol::CrossLayout);
    }

    proptest! {
        #[test]
        fn splits_are_disjoint(pi in 0usize..6, held in 0usize..2, seed in any::<u64>()) {
            let g = grid();
            let spec = SplitSpec { protocol: Protocol::ALL[pi], held_out: held, seed };
            let (train, test) = make_splits(&g, &spec).unwrap();
            prop_assert!(train.iter().all(|i| !test.contains(i)));
            prop_assert!(!test.is_empty());
        }
    }
}
