use nalgebra::Vector3;

use super::{GeometryError, Result, RigidTransform};

/// Transceivers closer than this are treated as co-located and rejected.
pub const MIN_DEVICE_SEPARATION: f64 = 1e-3;

/// How the TX–RX separation was measured.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistanceMeasurement {
    /// Tape-measured distance `S` in meters.
    Direct { meters: f64 },
    /// `g` board squares of side `d` meters.
    Grid { squares: f64, square_size: f64 },
    /// `p` pixels at `ρ` meters per pixel on the board plane.
    Pixel { pixels: f64, meters_per_pixel: f64 },
}

fn positive(v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(GeometryError::NonPositive(v))
    }
}

/// Half of the measured TX–RX distance: `S/2`, `g·d/2` or `p·ρ/2`.
pub fn half_distance(m: &DistanceMeasurement) -> Result<f64> {
    let s = match *m {
        DistanceMeasurement::Direct { meters } => positive(meters)?,
        DistanceMeasurement::Grid {
            squares,
            square_size,
        } => positive(squares)? * positive(square_size)?,
        DistanceMeasurement::Pixel {
            pixels,
            meters_per_pixel,
        } => positive(pixels)? * positive(meters_per_pixel)?,
    };
    Ok(s / 2.0)
}

/// TX and RX coordinates in the auxiliary board frame, whose origin sits at the
/// pair midpoint with the x-axis along the TX→RX line.
pub fn device_offsets(half: f64) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let l = positive(half)?;
    Ok((Vector3::new(-l, 0.0, 0.0), Vector3::new(l, 0.0, 0.0)))
}

/// Maps auxiliary-board coordinates into the world board frame, using the
/// camera that sees both boards as the intermediary.
///
/// Both inputs map board coordinates into the camera frame (the calibration
/// extrinsics), so the result is `T_{C→B}⁻¹ · T_{C→B1}`.
pub fn chain_unify(t_c_to_b: &RigidTransform, t_c_to_b1: &RigidTransform) -> RigidTransform {
    t_c_to_b.inverse().compose(t_c_to_b1)
}

/// One auxiliary-board observation for a TX–RX pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoardPair {
    pub t_c_to_b: RigidTransform,
    pub t_c_to_b1: RigidTransform,
    pub distance: DistanceMeasurement,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnifyOptions {
    /// TX estimates closer than this are considered the same reading.
    pub merge_tolerance: f64,
    /// TX estimates further apart than this are an error.
    pub inconsistency_threshold: f64,
}

impl Default for UnifyOptions {
    fn default() -> Self {
        Self {
            merge_tolerance: 1e-3,
            inconsistency_threshold: 0.05,
        }
    }
}

/// TX and RX positions in the world frame (meters).
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceLayout {
    pub tx: Vector3<f64>,
    pub rxs: Vec<Vector3<f64>>,
    /// Index of the board pair that produced each RX; empty for hand-built layouts.
    pub rx_sources: Vec<usize>,
    /// Largest distance between individual TX estimates that were merged.
    pub tx_spread: f64,
}

impl DeviceLayout {
    pub fn new(tx: Vector3<f64>, rxs: Vec<Vector3<f64>>) -> Result<Self> {
        let layout = Self {
            tx,
            rxs,
            rx_sources: Vec::new(),
            tx_spread: 0.0,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rxs.is_empty() {
            return Err(GeometryError::InvalidLayout("layout has no receivers".into()));
        }
        let finite = |v: &Vector3<f64>| v.iter().all(|c| c.is_finite());
        if !finite(&self.tx) || !self.rxs.iter().all(finite) {
            return Err(GeometryError::InvalidLayout("non-finite coordinate".into()));
        }
        for (i, rx) in self.rxs.iter().enumerate() {
            let d = (rx - self.tx).norm();
            if d < MIN_DEVICE_SEPARATION {
                return Err(GeometryError::InvalidLayout(format!(
                    "receiver {i} is co-located with the transmitter ({d:.2e} m)"
                )));
            }
        }
        Ok(())
    }

    pub fn n_receivers(&self) -> usize {
        self.rxs.len()
    }

    /// RX position relative to the TX, the geometry each receiver is conditioned on.
    pub fn offset(&self, rx: usize) -> Vector3<f64> {
        self.rxs[rx] - self.tx
    }

    pub fn offsets(&self) -> Vec<Vector3<f64>> {
        (0..self.rxs.len()).map(|i| self.offset(i)).collect()
    }
}

/// Runs the full unification chain for every pair and merges the shared TX.
///
/// TX estimates are averaged; if any two differ by more than
/// `inconsistency_threshold` the layout is rejected.
pub fn unify_layout(pairs: &[BoardPair], opts: &UnifyOptions) -> Result<DeviceLayout> {
    if pairs.is_empty() {
        return Err(GeometryError::InvalidLayout("no board pairs".into()));
    }
    let mut txs = Vec::with_capacity(pairs.len());
    let mut rxs = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let l = half_distance(&pair.distance)?;
        let (p_t, p_r) = device_offsets(l)?;
        let t_b1_to_b = chain_unify(&pair.t_c_to_b, &pair.t_c_to_b1);
        txs.push(t_b1_to_b.apply(&p_t));
        rxs.push(t_b1_to_b.apply(&p_r));
    }
    let mut spread: f64 = 0.0;
    for i in 0..txs.len() {
        for j in (i + 1)..txs.len() {
            spread = spread.max((txs[i] - txs[j]).norm());
        }
    }
    if spread > opts.inconsistency_threshold {
        return Err(GeometryError::InconsistentTx {
            spread,
            threshold: opts.inconsistency_threshold,
        });
    }
    let tx = if spread <= opts.merge_tolerance {
        txs[0]
    } else {
        txs.iter().sum::<Vector3<f64>>() / txs.len() as f64
    };
    let mut layout = DeviceLayout::new(tx, rxs)?;
    layout.rx_sources = (0..pairs.len()).collect();
    layout.tx_spread = spread;
    Ok(layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::transform::tests::random_transform;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn half_distance_modes() {
        let direct = half_distance(&DistanceMeasurement::Direct { meters: 0.30 }).unwrap();
        assert!((direct - 0.15).abs() < 1e-15);
        let grid = half_distance(&DistanceMeasurement::Grid {
            squares: 10.0,
            square_size: 0.030,
        })
        .unwrap();
        assert!((grid - 0.15).abs() < 1e-15);
        let pixel = half_distance(&DistanceMeasurement::Pixel {
            pixels: 600.0,
            meters_per_pixel: 0.0005,
        })
        .unwrap();
        assert!((pixel - 0.15).abs() < 1e-15);
        assert_eq!(
            half_distance(&DistanceMeasurement::Direct { meters: 0.0 }),
            Err(GeometryError::NonPositive(0.0))
        );
        assert!(half_distance(&DistanceMeasurement::Grid {
            squares: 4.0,
            square_size: -0.03
        })
        .is_err());
    }

    proptest! {
        #[test]
        fn grid_and_direct_agree_bitwise(g in 1.0f64..50.0, d in 0.001f64..0.1) {
            let grid = half_distance(&DistanceMeasurement::Grid { squares: g, square_size: d }).unwrap();
            let direct = half_distance(&DistanceMeasurement::Direct { meters: g * d }).unwrap();
            prop_assert_eq!(grid.to_bits(), direct.to_bits());
        }

        #[test]
        fn offsets_are_2l_apart(l in 1e-3f64..10.0) {
            let (t, r) = device_offsets(l).unwrap();
            prop_assert_eq!((t - r).norm(), 2.0 * l);
        }

        #[test]
        fn chain_identity(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_transform(&mut rng);
            prop_assert!(chain_unify(&t, &t).max_abs_diff(&RigidTransform::identity()) < 1e-10);
        }
    }

    #[test]
    fn offsets() {
        let (t, r) = device_offsets(0.15).unwrap();
        assert_eq!(t, Vector3::new(-0.15, 0.0, 0.0));
        assert_eq!(r, Vector3::new(0.15, 0.0, 0.0));
        let (t, r) = device_offsets(1.0).unwrap();
        assert_eq!((t, r), (Vector3::new(-1.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)));
        assert!(device_offsets(0.0).is_err());
    }

    #[test]
    fn chain_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = random_transform(&mut rng);
        assert!(chain_unify(&RigidTransform::identity(), &t).max_abs_diff(&t) < 1e-12);
        assert!(chain_unify(&t, &t).max_abs_diff(&RigidTransform::identity()) < 1e-10);
    }

    #[test]
    fn chain_matches_two_hop_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let (cb, cb1) = (random_transform(&mut rng), random_transform(&mut rng));
            let chained = chain_unify(&cb, &cb1);
            let camera_to_world = cb.inverse();
            for _ in 0..100 {
                let p = Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                );
                let in_camera = cb1.apply(&p);
                let two_hop = camera_to_world.apply(&in_camera);
                assert!((chained.apply(&p) - two_hop).amax() < 1e-10);
            }
        }
    }

    #[test]
    fn identity_boards_give_offsets() {
        let pair = BoardPair {
            t_c_to_b: RigidTransform::identity(),
            t_c_to_b1: RigidTransform::identity(),
            distance: DistanceMeasurement::Direct { meters: 0.30 },
        };
        let layout = unify_layout(&[pair], &UnifyOptions::default()).unwrap();
        assert!((layout.tx - Vector3::new(-0.15, 0.0, 0.0)).amax() < 1e-15);
        assert!((layout.rxs[0] - Vector3::new(0.15, 0.0, 0.0)).amax() < 1e-15);
    }

    #[test]
    fn rotated_aux_board() {
        let rot = RigidTransform::from_axis_angle(
            &Vector3::z(),
            std::f64::consts::FRAC_PI_2,
            Vector3::zeros(),
        );
        let pair = BoardPair {
            t_c_to_b: RigidTransform::identity(),
            t_c_to_b1: rot,
            distance: DistanceMeasurement::Direct { meters: 0.30 },
        };
        let layout = unify_layout(&[pair], &UnifyOptions::default()).unwrap();
        assert!((layout.tx - Vector3::new(0.0, -0.15, 0.0)).amax() < 1e-12);
        assert!((layout.rxs[0] - Vector3::new(0.0, 0.15, 0.0)).amax() < 1e-12);
    }

    fn pair_for(tx: Vector3<f64>, rx: Vector3<f64>, cam_from_world: RigidTransform) -> BoardPair {
        // Build the auxiliary board frame: origin at the midpoint, x along TX→RX.
        let x = (rx - tx).normalize();
        let helper = if x.z.abs() < 0.9 { Vector3::z() } else { Vector3::y() };
        let y = helper.cross(&x).normalize();
        let z = x.cross(&y);
        let r_b1_to_b = nalgebra::Matrix3::from_columns(&[x, y, z]);
        let t_b1_to_b = RigidTransform::new(r_b1_to_b, (tx + rx) / 2.0).unwrap();
        BoardPair {
            t_c_to_b: cam_from_world,
            t_c_to_b1: cam_from_world.compose(&t_b1_to_b),
            distance: DistanceMeasurement::Direct {
                meters: (rx - tx).norm(),
            },
        }
    }

    #[test]
    fn shared_tx_merged_and_inconsistency_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cam = random_transform(&mut rng);
        let tx = Vector3::new(0.0, 0.0, 1.0);
        let r1 = Vector3::new(2.0, 0.5, 1.0);
        let r2 = Vector3::new(0.5, 2.5, 1.2);
        let pairs = [pair_for(tx, r1, cam), pair_for(tx + Vector3::new(4e-4, 0.0, 0.0), r2, cam)];
        let layout = unify_layout(&pairs, &UnifyOptions::default()).unwrap();
        assert_eq!(layout.rxs.len(), 2);
        assert!((layout.tx - tx).norm() < 1e-3);
        assert!((layout.rxs[1] - r2).norm() < 1e-9);

        let far = [pair_for(tx, r1, cam), pair_for(tx + Vector3::new(0.2, 0.0, 0.0), r2, cam)];
        assert!(matches!(
            unify_layout(&far, &UnifyOptions::default()),
            Err(GeometryError::InconsistentTx { .. })
        ));
    }

    #[test]
    fn layout_rejects_colocated_pairs() {
        assert!(DeviceLayout::new(Vector3::zeros(), vec![Vector3::zeros()]).is_err());
        assert!(DeviceLayout::new(Vector3::zeros(), vec![]).is_err());
        assert!(DeviceLayout::new(Vector3::zeros(), vec![Vector3::new(f64::NAN, 0.0, 0.0)]).is_err());
        let ok = DeviceLayout::new(Vector3::zeros(), vec![Vector3::new(1.0, 2.0, 2.0)]).unwrap();
        assert_eq!(ok.offset(0).norm(), 3.0);
    }
}
