use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};

/// PCK thresholds (mm) reported by default.
pub const DEFAULT_PCK_THRESHOLDS: [f64; 2] = [20.0, 50.0];

/// Euclidean error per joint for flat `[.., 3]` coordinate buffers.
pub fn joint_errors(pred: &[f64], gt: &[f64]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() || pred.len() % 3 != 0 {
        return Err(TrainError::ShapeMismatch(format!(
            "prediction has {} values, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(pred
        .chunks_exact(3)
        .zip(gt.chunks_exact(3))
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt())
        .collect())
}

/// Mean per-joint position error; no alignment is applied.
pub fn mpjpe(pred: &[f64], gt: &[f64]) -> Result<f64> {
    let e = joint_errors(pred, gt)?;
    if e.is_empty() {
        return Err(TrainError::ShapeMismatch("no joints".into()));
    }
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Percentage of joints with error strictly below `sigma` (mm).
pub fn pck(pred: &[f64], gt: &[f64], sigma: f64) -> Result<f64> {
    let e = joint_errors(pred, gt)?;
    pck_from_errors(&e, sigma)
}

pub fn pck_from_errors(errors: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(TrainError::InvalidConfig(format!("PCK threshold must be positive, got {sigma}")));
    }
    if errors.is_empty() {
        return Err(TrainError::ShapeMismatch("no joints".into()));
    }
    let hit = errors.iter().filter(|&&e| e < sigma).count();
    Ok(100.0 * hit as f64 / errors.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckEntry {
    pub sigma_mm: f64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mpjpe_mm: f64,
    pub pck: Vec<PckEntry>,
    pub frames: usize,
    /// MPJPE per layout id.
    pub per_layout: BTreeMap<usize, f64>,
}

impl EvalReport {
    /// Builds a report from per-joint errors tagged with the layout of their frame.
    pub fn from_errors(errors: &[(usize, f64)], joints: usize, thresholds: &[f64]) -> Result<Self> {
        if errors.is_empty() || joints == 0 || errors.len() % joints != 0 {
            return Err(TrainError::ShapeMismatch(format!(
                "{} joint errors for {joints} joints per frame",
                errors.len()
            )));
        }
        let flat: Vec<f64> = errors.iter().map(|e| e.1).collect();
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for &(layout, e) in errors {
            let s = sums.entry(layout).or_default();
            s.0 += e;
            s.1 += 1;
        }
        let mut sorted = thresholds.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            mpjpe_mm: flat.iter().sum::<f64>() / flat.len() as f64,
            pck: sorted
                .iter()
                .map(|&s| {
                    Ok(PckEntry {
                        sigma_mm: s,
                        percent: pck_from_errors(&flat, s)?,
                    })
                })
                .collect::<Result<_>>()?,
            frames: errors.len() / joints,
            per_layout: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        })
    }

    pub fn pck_at(&self, sigma: f64) -> Option<f64> {
        self.pck.iter().find(|p| p.sigma_mm == sigma).map(|p| p.percent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mpjpe_examples() {
        let gt = vec![1.0, 2.0, 3.0, -4.0, 0.5, 9.0];
        assert_eq!(mpjpe(&gt, &gt).unwrap(), 0.0);
        let shifted: Vec<f64> = gt
            .chunks(3)
            .flat_map(|c| [c[0] + 3.0, c[1] + 4.0, c[2]])
            .collect();
        assert!((mpjpe(&shifted, &gt).unwrap() - 5.0).abs() < 1e-12);
        let pred = vec![1.0, 2.0, 3.0, -4.0, 10.5, 9.0];
        assert!((mpjpe(&pred, &gt).unwrap() - 5.0).abs() < 1e-12);
        assert!(mpjpe(&pred[..5], &gt[..5]).is_err());
        assert!(mpjpe(&pred, &gt[..3]).is_err());
    }

    #[test]
    fn pck_examples() {
        let gt = vec![0.0; 6];
        let ten = vec![10.0, 0.0, 0.0, 0.0, 10.0, 0.0];
        assert_eq!(pck(&ten, &gt, 20.0).unwrap(), 100.0);
        let mixed = vec![10.0, 0.0, 0.0, 0.0, 30.0, 0.0];
        assert_eq!(pck(&mixed, &gt, 20.0).unwrap(), 50.0);
        assert_eq!(pck(&mixed, &gt, 50.0).unwrap(), 100.0);
        // Strict inequality.
        assert_eq!(pck(&mixed, &gt, 30.0).unwrap(), 50.0);
        assert!(pck(&mixed, &gt, 0.0).is_err());
    }

    #[test]
    fn report_breakdown() {
        let errors = vec![(0, 10.0), (0, 30.0), (2, 60.0), (2, 0.0)];
        let r = EvalReport::from_errors(&errors, 2, &[50.0, 20.0]).unwrap();
        assert_eq!(r.frames, 2);
        assert!((r.mpjpe_mm - 25.0).abs() < 1e-12);
        assert_eq!(r.per_layout[&0], 20.0);
        assert_eq!(r.per_layout[&2], 30.0);
        assert_eq!(r.pck_at(20.0), Some(50.0));
        assert_eq!(r.pck_at(50.0), Some(75.0));
        assert_eq!(r.pck[0].sigma_mm, 20.0);
        assert!(EvalReport::from_errors(&errors, 3, &[20.0]).is_err());
    }

    proptest! {
        #[test]
        fn constant_offset_equals_norm(
            gt in prop::collection::vec(-2000.0f64..2000.0, 3..90),
            c in prop::array::uniform3(-500.0f64..500.0),
        ) {
            let n = gt.len() / 3 * 3;
            let gt = &gt[..n];
            let pred: Vec<f64> = gt.iter().enumerate().map(|(i, v)| v + c[i % 3]).collect();
            let norm = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
            prop_assert!((mpjpe(&pred, gt).unwrap() - norm).abs() < 1e-9 * norm.max(1.0));
        }

        #[test]
        fn pck_is_monotone(errors in prop::collection::vec(0.0f64..200.0, 1..200)) {
            let r = EvalReport::from_errors(
                &errors.iter().map(|&e| (0, e)).collect::<Vec<_>>(), 1, &[20.0, 50.0, 100.0]).unwrap();
            prop_assert!(r.pck.windows(2).all(|w| w[0].percent <= w[1].percent));
            prop_assert!(r.pck.iter().all(|p| (0.0..=100.0).contains(&p.percent)));
            prop_assert!(r.mpjpe_mm >= 0.0);
        }
    }
}
