use std::f64::consts::{PI, TAU};

use nalgebra::Vector3;
use ndarray::{s, Array3};
use num_complex::Complex64;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::motion::SkeletonTrajectory;
use super::scene::{RfScene, MIN_BOUNCE_DISTANCE};
use super::{Result, RfSimError, SPEED_OF_LIGHT};
use crate::csi::CsiTensor;
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathKind {
    LineOfSight,
    Static(usize),
    Joint(usize),
}

/// One propagation path: delay (s) and complex amplitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Path {
    pub delay: f64,
    pub amplitude: Complex64,
    pub kind: PathKind,
}

fn bounce(
    tx: &Vector3<f64>,
    q: &Vector3<f64>,
    rx: &Vector3<f64>,
    reflectivity: Complex64,
    kind: PathKind,
) -> Option<Path> {
    let d1 = (q - tx).norm();
    let d2 = (rx - q).norm();
    if d1 < MIN_BOUNCE_DISTANCE || d2 < MIN_BOUNCE_DISTANCE {
        return None;
    }
    Some(Path {
        delay: (d1 + d2) / SPEED_OF_LIGHT,
        amplitude: reflectivity / (4.0 * PI * d1 * d2),
        kind,
    })
}

/// LOS, one bounce per static scatterer and one bounce per joint for a single
/// TX → (rx, antenna) link. Joints closer than 1 µm to a device are skipped.
pub fn path_params(scene: &RfScene, joints: &[Vector3<f64>], rx: usize, antenna: usize) -> Result<Vec<Path>> {
    if rx >= scene.n_receivers() || antenna >= scene.n_antennas(rx) {
        return Err(RfSimError::IndexOutOfRange(format!("receiver {rx} antenna {antenna}")));
    }
    let tx = scene.layout.tx;
    let ant = scene.antenna_position(rx, antenna);
    let mut paths = Vec::with_capacity(1 + scene.static_scatterers.len() + joints.len());
    if !scene.los_blocked {
        let d = (ant - tx).norm();
        paths.push(Path {
            delay: d / SPEED_OF_LIGHT,
            amplitude: Complex64::new(1.0 / (4.0 * PI * d), 0.0),
            kind: PathKind::LineOfSight,
        });
    }
    for (i, sc) in scene.static_scatterers.iter().enumerate() {
        paths.extend(bounce(&tx, &sc.position, &ant, sc.reflectivity, PathKind::Static(i)));
    }
    for (j, q) in joints.iter().enumerate() {
        paths.extend(bounce(&tx, q, &ant, scene.joint_reflectivity, PathKind::Joint(j)));
    }
    Ok(paths)
}

/// Adds `Σ_k α_k e^{−j2π f_m τ_k}` over all subcarriers into `out`, using a
/// geometric progression in `m` for each path.
fn accumulate_response(paths: &[Path], f0: f64, df: f64, out: &mut [Complex64]) {
    for p in paths {
        let start = p.amplitude * Complex64::from_polar(1.0, -TAU * (f0 * p.delay).fract());
        let step = Complex64::from_polar(1.0, -TAU * (df * p.delay).fract());
        let mut z = start;
        for (i, o) in out.iter_mut().enumerate() {
            if i > 0 && i % 16 == 0 {
                // Re-anchor periodically to keep rounding error bounded.
                let f = f0 + i as f64 * df;
                z = p.amplitude * Complex64::from_polar(1.0, -TAU * (f * p.delay).fract());
            }
            *o += z;
            z *= step;
        }
    }
}

const STREAM_DRIFT: u64 = 0xd71f;
const STREAM_NOISE: u64 = 0x4015e;

/// Simulated CSI, one tensor of shape (antennas, subcarriers, samples) per RX.
///
/// The skeleton is linearly interpolated to CSI timestamps; every frame
/// contributes `sample_rate / frame_rate` samples. Per receiver, all antennas
/// share a random-walk phase drift; random draws come from streams keyed by
/// (seed, receiver, frame) so output is independent of thread scheduling.
pub fn synth_csi(scene: &RfScene, trajectory: &SkeletonTrajectory, seed: u64) -> Result<Vec<CsiTensor>> {
    scene.validate()?;
    let fr = trajectory.frame_rate;
    let fs = scene.sample_rate;
    let ratio = fs / fr;
    let per_frame = ratio.round();
    if !(fr > 0.0) || fr > fs || (ratio - per_frame).abs() > 1e-9 * ratio {
        return Err(RfSimError::RateMismatch {
            frame_rate: fr,
            sample_rate: fs,
        });
    }
    let per_frame = per_frame as usize;
    let n_frames = trajectory.n_frames();
    if n_frames == 0 {
        return Err(RfSimError::InvalidParameter("empty trajectory".into()));
    }
    let n_samples = n_frames * per_frame;
    let freqs = scene.subcarrier_freqs();
    let (f0, df) = (freqs[0], scene.subcarrier_spacing());
    let m = scene.n_subcarriers;
    let component_std = scene.noise_std / 2f64.sqrt();
    let noise = (scene.noise_std > 0.0).then(|| Normal::new(0.0, component_std).expect("validated std"));
    let drift_step = (scene.drift_step_std > 0.0).then(|| Normal::new(0.0, scene.drift_step_std).expect("validated std"));

    (0..scene.n_receivers())
        .map(|rx| {
            let n_ant = scene.n_antennas(rx);
            let blocks: Vec<(Array3<Complex64>, Vec<f64>)> = (0..n_frames)
                .into_par_iter()
                .map(|frame| {
                    let mut block = Array3::<Complex64>::zeros((n_ant, m, per_frame));
                    let mut buf = vec![Complex64::new(0.0, 0.0); m];
                    for k in 0..per_frame {
                        let u = (frame * per_frame + k) as f64 / per_frame as f64;
                        let joints = trajectory.interpolate(u);
                        for a in 0..n_ant {
                            let paths = path_params(scene, &joints, rx, a).expect("indices in range");
                            buf.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
                            accumulate_response(&paths, f0, df, &mut buf);
                            block.slice_mut(s![a, .., k]).iter_mut().zip(&buf).for_each(|(o, v)| *o = *v);
                        }
                    }
                    let steps = match &drift_step {
                        Some(d) => {
                            let mut rng = stream_rng(seed, &[STREAM_DRIFT, rx as u64, frame as u64]);
                            (0..per_frame).map(|_| d.sample(&mut rng)).collect()
                        }
                        None => vec![0.0; per_frame],
                    };
                    (block, steps)
                })
                .collect();

            let mut data = Array3::<Complex64>::zeros((n_ant, m, n_samples));
            let mut phase = 0.0;
            for (frame, (block, steps)) in blocks.into_iter().enumerate() {
                let mut noise_rng = stream_rng(seed, &[STREAM_NOISE, rx as u64, frame as u64]);
                for k in 0..per_frame {
                    phase += steps[k];
                    let drift = Complex64::from_polar(1.0, phase);
                    let t = frame * per_frame + k;
                    for a in 0..n_ant {
                        let g = scene.antenna_gains[rx][a] * drift;
                        for f in 0..m {
                            let mut v = block[[a, f, k]] * g;
                            if let Some(n) = &noise {
                                v += Complex64::new(n.sample(&mut noise_rng), n.sample(&mut noise_rng));
                            }
                            data[[a, f, t]] = v;
                        }
                    }
                }
            }
            Ok(CsiTensor::new(data, fs, freqs.clone())?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::motion::{generate_motion, Action};
    use super::super::scene::StaticScatterer;
    use super::*;
    use crate::csi::ratio;
    use crate::geometry::DeviceLayout;

    fn scene_3m() -> RfScene {
        let layout = DeviceLayout::new(Vector3::new(0.0, 0.0, 1.0), vec![Vector3::new(3.0, 0.0, 1.0)]).unwrap();
        RfScene::new(layout).unwrap()
    }

    fn static_trajectory(joints: Vec<Vector3<f64>>, frames: usize) -> SkeletonTrajectory {
        SkeletonTrajectory {
            frames: vec![joints; frames],
            frame_rate: 30.0,
            action: Action::Squat,
        }
    }

    #[test]
    fn los_delay() {
        let scene = scene_3m();
        let paths = path_params(&scene, &[], 0, 0).unwrap();
        assert_eq!(paths.len(), 1);
        assert!((paths[0].delay - 3.0 / 299_792_458.0).abs() < 1e-18);
        assert!((paths[0].delay - 1.00069e-8).abs() < 1e-12);
        assert!((paths[0].amplitude.re - 1.0 / (12.0 * PI)).abs() < 1e-15);
    }

    #[test]
    fn midpoint_joint_matches_los_length() {
        let layout = DeviceLayout::new(Vector3::zeros(), vec![Vector3::new(4.0, 0.0, 0.0)]).unwrap();
        let scene = RfScene::new(layout).unwrap();
        let paths = path_params(&scene, &[Vector3::new(2.0, 0.0, 0.0)], 0, 0).unwrap();
        assert_eq!(paths.len(), 2);
        assert!((paths[1].delay - paths[0].delay).abs() < 1e-20);
        assert!((paths[1].amplitude.re - 0.3 / (4.0 * PI * 4.0)).abs() < 1e-15);
    }

    #[test]
    fn joint_on_device_is_skipped() {
        let scene = scene_3m();
        let paths = path_params(&scene, &[scene.layout.tx], 0, 0).unwrap();
        assert_eq!(paths.len(), 1);
        assert!(path_params(&scene, &[], 0, 3).is_err());
    }

    #[test]
    fn delays_bounded_below_by_los_and_reciprocal() {
        let scene = scene_3m();
        let t = generate_motion(Action::JumpingJack, 1.0, 30.0, Vector3::new(1.5, 1.0, 0.0), 0.0, 1).unwrap();
        for f in &t.frames {
            let paths = path_params(&scene, f, 0, 1).unwrap();
            for p in &paths[1..] {
                assert!(p.delay >= paths[0].delay);
            }
            // Swapping TX and RX leaves every delay unchanged.
            let swapped = DeviceLayout::new(scene.antenna_position(0, 1), vec![scene.layout.tx]).unwrap();
            let mut sw = RfScene::new(swapped).unwrap();
            sw.antenna_offsets[0] = vec![Vector3::zeros(); 2];
            sw.antenna_gains[0] = vec![Complex64::new(1.0, 0.0); 2];
            let back = path_params(&sw, f, 0, 0).unwrap();
            for (a, b) in paths.iter().zip(&back) {
                assert!((a.delay - b.delay).abs() < 1e-20);
            }
        }
    }

    #[test]
    fn unit_path_gives_ones() {
        let mut scene = scene_3m();
        scene.los_blocked = true;
        let direct = [Path {
            delay: 0.0,
            amplitude: Complex64::new(1.0, 0.0),
            kind: PathKind::LineOfSight,
        }];
        let mut out = vec![Complex64::new(0.0, 0.0); scene.n_subcarriers];
        let f = scene.subcarrier_freqs();
        accumulate_response(&direct, f[0], scene.subcarrier_spacing(), &mut out);
        assert!(out.iter().all(|v| (v - Complex64::new(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn rate_mismatch() {
        let scene = scene_3m();
        let mut t = static_trajectory(vec![], 3);
        t.frame_rate = 7.0;
        assert!(matches!(synth_csi(&scene, &t, 0), Err(RfSimError::RateMismatch { .. })));
        t.frame_rate = 1000.0;
        assert!(matches!(synth_csi(&scene, &t, 0), Err(RfSimError::RateMismatch { .. })));
    }

    #[test]
    fn phase_slope_matches_delay() {
        let scene = scene_3m();
        let out = synth_csi(&scene, &static_trajectory(vec![], 1), 0).unwrap();
        let tau = 3.0 / SPEED_OF_LIGHT;
        let expect = -TAU * tau * scene.subcarrier_spacing();
        let d = out[0].data();
        for m in 1..scene.n_subcarriers {
            let step = (d[[0, m, 0]] / d[[0, m - 1, 0]]).arg();
            assert!((step - expect).abs() < 1e-9, "{step} vs {expect}");
        }
    }

    #[test]
    fn fresnel_wavelength_rotation() {
        // A reflector on the perpendicular bisector of a 4 m link whose bounce
        // length grows by exactly one wavelength: phasor turns by 2π at the carrier.
        let layout = DeviceLayout::new(Vector3::new(-2.0, 0.0, 0.0), vec![Vector3::new(2.0, 0.0, 0.0)]).unwrap();
        let mut scene = RfScene::new(layout).unwrap();
        scene.n_subcarriers = 1;
        scene.los_blocked = true;
        let lambda = scene.wavelength();
        let y0 = 1.0;
        let l0 = 2.0 * (4.0f64 + y0 * y0).sqrt();
        let half = (l0 + lambda) / 2.0;
        let y1 = (half * half - 4.0).sqrt();
        let p0 = path_params(&scene, &[Vector3::new(0.0, y0, 0.0)], 0, 0).unwrap()[0];
        let p1 = path_params(&scene, &[Vector3::new(0.0, y1, 0.0)], 0, 0).unwrap()[0];
        let phase = |p: &Path| -TAU * scene.carrier_freq * p.delay;
        let rotation = phase(&p0) - phase(&p1);
        assert!((rotation - TAU).abs() < 1e-6, "rotation {rotation}");
    }

    #[test]
    fn superposition_of_scatterer_sets() {
        let base = scene_3m();
        let s1 = vec![StaticScatterer {
            position: Vector3::new(1.0, 2.0, 1.5),
            reflectivity: Complex64::new(0.4, 0.1),
        }];
        let s2 = vec![StaticScatterer {
            position: Vector3::new(2.0, -1.0, 0.5),
            reflectivity: Complex64::new(-0.2, 0.3),
        }];
        let both: Vec<_> = s1.iter().chain(&s2).copied().collect();
        let traj = generate_motion(Action::Squat, 0.2, 30.0, Vector3::new(1.5, 0.8, 0.0), 0.0, 2).unwrap();
        let run = |sc: Vec<StaticScatterer>| {
            let s = base.clone().with_scatterers(sc).unwrap();
            synth_csi(&s, &traj, 3).unwrap().remove(0).into_data()
        };
        let h12 = run(both);
        let h1 = run(s1);
        let h2 = run(s2);
        let h0 = run(vec![]);
        for (((a, b), c), d) in h12.iter().zip(&h1).zip(&h2).zip(&h0) {
            assert!((a - (b + c - d)).norm() < 1e-12);
        }
    }

    #[test]
    fn energy_bound() {
        let scene = scene_3m();
        let traj = generate_motion(Action::Jump, 0.2, 30.0, Vector3::new(1.5, 0.5, 0.0), 0.0, 2).unwrap();
        let h = synth_csi(&scene, &traj, 1).unwrap().remove(0);
        for t in 0..h.n_samples() {
            let u = t as f64 / 27.0;
            let joints = traj.interpolate(u);
            for a in 0..3 {
                let bound: f64 = path_params(&scene, &joints, 0, a).unwrap().iter().map(|p| p.amplitude.norm()).sum();
                for f in 0..h.n_subcarriers() {
                    assert!(h.data()[[a, f, t]].norm() <= bound + 1e-15);
                }
            }
        }
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let mut scene = scene_3m();
        scene.noise_std = 1e-3;
        scene.drift_step_std = 0.05;
        let traj = generate_motion(Action::PickUp, 0.5, 30.0, Vector3::new(1.5, 0.5, 0.0), 0.0, 5).unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| synth_csi(&scene, &traj, 11).unwrap());
        let b = four.install(|| synth_csi(&scene, &traj, 11).unwrap());
        assert_eq!(a, b);
        let c = synth_csi(&scene, &traj, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn drift_cancels_in_ratio() {
        let mut scene = scene_3m();
        scene.antenna_gains[0] = vec![
            Complex64::from_polar(1.1, 0.3),
            Complex64::from_polar(0.9, -1.2),
            Complex64::from_polar(1.0, 2.0),
        ];
        let traj = generate_motion(Action::LeftArmStretch, 0.5, 30.0, Vector3::new(1.5, 0.5, 0.0), 0.0, 5).unwrap();
        let clean = synth_csi(&scene, &traj, 4).unwrap().remove(0);
        scene.drift_step_std = 0.2;
        let drifted = synth_csi(&scene, &traj, 4).unwrap().remove(0);
        assert!((clean.data()[[0, 0, 10]] - drifted.data()[[0, 0, 10]]).norm() > 1e-6);
        let r0 = ratio(&clean, 0, 1, 1e-30).unwrap();
        let r1 = ratio(&drifted, 0, 1, 1e-30).unwrap();
        for (x, y) in r0.data().iter().zip(r1.data().iter()) {
            assert!((x - y).norm() < 1e-9);
        }
    }

    #[test]
    fn noise_level() {
        let mut scene = scene_3m();
        scene.noise_std = 0.01;
        let traj = static_trajectory(vec![], 30);
        let clean = {
            let mut s = scene.clone();
            s.noise_std = 0.0;
            synth_csi(&s, &traj, 1).unwrap().remove(0)
        };
        let noisy = synth_csi(&scene, &traj, 1).unwrap().remove(0);
        let n = clean.data().len() as f64;
        let power: f64 = noisy.data().iter().zip(clean.data().iter()).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>() / n;
        assert!((power.sqrt() - 0.01).abs() < 0.0005, "rms {}", power.sqrt());
    }
}
