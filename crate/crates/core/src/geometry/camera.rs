use nalgebra::{DMatrix, Matrix3, Matrix4, SymmetricEigen, Vector2, Vector3, Vector4};

use super::{GeometryError, Result, RigidTransform};

/// Brown–Conrady lens distortion applied to normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Distortion {
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
}

impl Distortion {
    pub fn is_zero(&self) -> bool {
        *self == Distortion::default()
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let r2 = x * x + y * y;
        let radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2;
        let xd = x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
        let yd = y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;
        (xd, yd)
    }

    /// Fixed-point inversion of [`Distortion::apply`].
    pub fn remove(&self, xd: f64, yd: f64) -> (f64, f64) {
        if self.is_zero() {
            return (xd, yd);
        }
        let (mut x, mut y) = (xd, yd);
        for _ in 0..50 {
            let (fx, fy) = self.apply(x, y);
            let (ex, ey) = (fx - xd, fy - yd);
            x -= ex;
            y -= ey;
            if ex.abs().max(ey.abs()) < 1e-15 {
                break;
            }
        }
        (x, y)
    }
}

/// Intrinsic parameters: `K = [[fx, s, cx], [0, fy, cy], [0, 0, 1]]` plus distortion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub skew: f64,
    pub distortion: Distortion,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            skew: 0.0,
            distortion: Distortion::default(),
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn with_distortion(mut self, distortion: Distortion) -> Self {
        self.distortion = distortion;
        self
    }

    pub fn with_skew(mut self, skew: f64) -> Self {
        self.skew = skew;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        if ![self.cx, self.cy, self.skew].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidCamera("non-finite intrinsics".into()));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, self.skew, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0,
        )
    }

    /// Pixel for a point already expressed in the camera frame.
    pub fn project_camera_point(&self, xc: &Vector3<f64>) -> Result<Vector2<f64>> {
        if xc.z <= 1e-9 {
            return Err(GeometryError::BehindCamera(xc.z));
        }
        let (xd, yd) = self.distortion.apply(xc.x / xc.z, xc.y / xc.z);
        Ok(self.pixel_from_distorted(xd, yd))
    }

    fn pixel_from_distorted(&self, xd: f64, yd: f64) -> Vector2<f64> {
        Vector2::new(
            self.fx * xd + self.skew * yd + self.cx,
            self.fy * yd + self.cy,
        )
    }

    /// Undistorted normalized coordinates `(X/Z, Y/Z)` of a pixel.
    pub fn normalize_pixel(&self, px: &Vector2<f64>) -> Vector2<f64> {
        let yd = (px.y - self.cy) / self.fy;
        let xd = (px.x - self.cx - self.skew * yd) / self.fx;
        let (x, y) = self.distortion.remove(xd, yd);
        Vector2::new(x, y)
    }
}

/// A calibrated camera; `extrinsic` maps world points into the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub intrinsics: Intrinsics,
    pub extrinsic: RigidTransform,
}

impl CameraModel {
    pub fn new(intrinsics: Intrinsics, extrinsic: RigidTransform) -> Result<Self> {
        intrinsics.validate()?;
        Ok(Self {
            intrinsics,
            extrinsic,
        })
    }

    pub fn project(&self, x_world: &Vector3<f64>) -> Result<Vector2<f64>> {
        self.intrinsics
            .project_camera_point(&self.extrinsic.apply(x_world))
    }

    pub fn center(&self) -> Vector3<f64> {
        self.extrinsic.inverse().apply(&Vector3::zeros())
    }

    /// Unit ray direction in world coordinates through `px`.
    pub fn ray_direction(&self, px: &Vector2<f64>) -> Vector3<f64> {
        let n = self.intrinsics.normalize_pixel(px);
        (self.extrinsic.rotation().transpose() * Vector3::new(n.x, n.y, 1.0)).normalize()
    }
}

/// Result of [`solve_pnp`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PnpSolution {
    /// Maps board coordinates into the camera frame.
    pub transform: RigidTransform,
    pub rms_reprojection: f64,
    pub iterations: usize,
}

const PNP_MIN_POINTS: usize = 6;
const PNP_MAX_ITERS: usize = 100;

fn covariance_eigen(points: &[Vector3<f64>]) -> (Vector3<f64>, SymmetricEigen<f64, nalgebra::U3>) {
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    (centroid, SymmetricEigen::new(cov / n))
}

fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

fn null_vector(a: &DMatrix<f64>) -> Vec<f64> {
    // Smallest eigenvector of AᵀA; the systems here are tiny (≤ 12 columns).
    let ata = a.transpose() * a;
    let eig = ata.symmetric_eigen();
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    eig.eigenvectors.column(imin).iter().copied().collect()
}

/// Similarity that centres 2D points at the origin with mean distance √2.
fn normalize_2d(pts: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let c = pts.iter().sum::<Vector2<f64>>() / n;
    let mean_dist = pts.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

fn apply_h(h: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let v = h * Vector3::new(p.x, p.y, 1.0);
    Vector2::new(v.x / v.z, v.y / v.z)
}

fn init_planar(
    board: &[Vector3<f64>],
    normalized: &[Vector2<f64>],
    centroid: &Vector3<f64>,
    eig: &SymmetricEigen<f64, nalgebra::U3>,
) -> Result<RigidTransform> {
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let u = eig.eigenvectors.column(order[0]).into_owned();
    let v = eig.eigenvectors.column(order[1]).into_owned();
    let n = u.cross(&v);
    let local: Vec<Vector2<f64>> = board
        .iter()
        .map(|p| {
            let d = p - centroid;
            Vector2::new(d.dot(&u), d.dot(&v))
        })
        .collect();
    let t_src = normalize_2d(&local);
    let t_dst = normalize_2d(normalized);
    let mut a = DMatrix::zeros(2 * board.len(), 9);
    for (i, (s, d)) in local.iter().zip(normalized).enumerate() {
        let s = apply_h(&t_src, s);
        let d = apply_h(&t_dst, d);
        let row0 = [s.x, s.y, 1.0, 0.0, 0.0, 0.0, -d.x * s.x, -d.x * s.y, -d.x];
        let row1 = [0.0, 0.0, 0.0, s.x, s.y, 1.0, -d.y * s.x, -d.y * s.y, -d.y];
        for j in 0..9 {
            a[(2 * i, j)] = row0[j];
            a[(2 * i + 1, j)] = row1[j];
        }
    }
    let h = null_vector(&a);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let t_dst_inv = t_dst
        .try_inverse()
        .ok_or_else(|| GeometryError::Degenerate("singular normalization".into()))?;
    let hm = t_dst_inv * hn * t_src;
    let (h1, h2, h3) = (hm.column(0), hm.column(1), hm.column(2));
    let mut scale = 0.5 * (h1.norm() + h2.norm());
    if scale < 1e-12 {
        return Err(GeometryError::Degenerate("homography has no scale".into()));
    }
    if h3.z < 0.0 {
        scale = -scale;
    }
    let ru = h1 / scale;
    let rv = h2 / scale;
    let rn = ru.cross(&rv);
    let m = Matrix3::from_columns(&[ru, rv, rn]);
    let basis = Matrix3::from_columns(&[u, v, n]);
    let rotation = nearest_rotation(&(m * basis.transpose()));
    let translation = h3 / scale - rotation * centroid;
    RigidTransform::new(rotation, translation)
}

fn init_general(board: &[Vector3<f64>], normalized: &[Vector2<f64>]) -> Result<RigidTransform> {
    let n = board.len() as f64;
    let c = board.iter().sum::<Vector3<f64>>() / n;
    let spread = board.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if spread > 0.0 { 3f64.sqrt() / spread } else { 1.0 };
    let t_src = Matrix4::new(
        s, 0.0, 0.0, -s * c.x, 0.0, s, 0.0, -s * c.y, 0.0, 0.0, s, -s * c.z, 0.0, 0.0, 0.0, 1.0,
    );
    let t_dst = normalize_2d(normalized);
    let mut a = DMatrix::zeros(2 * board.len(), 12);
    for (i, (p, q)) in board.iter().zip(normalized).enumerate() {
        let p = t_src * Vector4::new(p.x, p.y, p.z, 1.0);
        let q = apply_h(&t_dst, q);
        for j in 0..4 {
            a[(2 * i, j)] = p[j];
            a[(2 * i, 8 + j)] = -q.x * p[j];
            a[(2 * i + 1, 4 + j)] = p[j];
            a[(2 * i + 1, 8 + j)] = -q.y * p[j];
        }
    }
    let v = null_vector(&a);
    let pn = nalgebra::Matrix3x4::from_row_slice(&v);
    let t_dst_inv = t_dst
        .try_inverse()
        .ok_or_else(|| GeometryError::Degenerate("singular normalization".into()))?;
    let p = t_dst_inv * pn * t_src;
    let a3 = p.fixed_view::<3, 3>(0, 0).into_owned();
    let det = a3.determinant();
    if det.abs() < 1e-300 {
        return Err(GeometryError::Degenerate("projection matrix is singular".into()));
    }
    let scale = det.cbrt();
    let rotation = nearest_rotation(&(a3 / scale));
    let translation = p.column(3) / scale;
    RigidTransform::new(rotation, translation.into_owned())
}

fn reprojection_residuals(
    intr: &Intrinsics,
    t: &RigidTransform,
    corr: &[(Vector3<f64>, Vector2<f64>)],
) -> Option<Vec<f64>> {
    let mut r = Vec::with_capacity(corr.len() * 2);
    for (p, px) in corr {
        let proj = intr.project_camera_point(&t.apply(p)).ok()?;
        r.push(proj.x - px.x);
        r.push(proj.y - px.y);
    }
    Some(r)
}

fn perturb_pose(t: &RigidTransform, delta: &[f64]) -> RigidTransform {
    let omega = Vector3::new(delta[0], delta[1], delta[2]);
    let dr = RigidTransform::from_rotation_vector(&omega, Vector3::zeros());
    RigidTransform::new(
        dr.rotation() * t.rotation(),
        t.translation() + Vector3::new(delta[3], delta[4], delta[5]),
    )
    .unwrap_or(*t)
}

/// Camera pose from 2D–3D correspondences with known intrinsics.
///
/// Linear initialization (homography for planar boards, 12-parameter DLT
/// otherwise) followed by Levenberg–Marquardt refinement of the reprojection
/// error under the full distortion model.
pub fn solve_pnp(
    correspondences: &[(Vector3<f64>, Vector2<f64>)],
    intrinsics: &Intrinsics,
) -> Result<PnpSolution> {
    intrinsics.validate()?;
    if correspondences.len() < PNP_MIN_POINTS {
        return Err(GeometryError::Degenerate(format!(
            "need at least {PNP_MIN_POINTS} correspondences, got {}",
            correspondences.len()
        )));
    }
    let board: Vec<Vector3<f64>> = correspondences.iter().map(|c| c.0).collect();
    let normalized: Vec<Vector2<f64>> = correspondences
        .iter()
        .map(|c| intrinsics.normalize_pixel(&c.1))
        .collect();
    let (centroid, eig) = covariance_eigen(&board);
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if ev[0] <= 0.0 || ev[1] <= 1e-10 * ev[0] {
        return Err(GeometryError::Degenerate("board points are collinear".into()));
    }
    let init = if ev[2] <= 1e-9 * ev[0] {
        init_planar(&board, &normalized, &centroid, &eig)?
    } else {
        init_general(&board, &normalized)?
    };

    let cost = |t: &RigidTransform| {
        reprojection_residuals(intrinsics, t, correspondences)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>())
            .unwrap_or(f64::INFINITY)
    };
    let mut pose = init;
    let mut current = cost(&pose);
    if !current.is_finite() {
        return Err(GeometryError::Degenerate(
            "linear initialization places points behind the camera".into(),
        ));
    }
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < PNP_MAX_ITERS {
        iterations += 1;
        let r0 = reprojection_residuals(intrinsics, &pose, correspondences).unwrap();
        let m = r0.len();
        let mut jac = DMatrix::zeros(m, 6);
        for k in 0..6 {
            let h = 1e-7;
            let mut d = [0.0; 6];
            d[k] = h;
            let rp = reprojection_residuals(intrinsics, &perturb_pose(&pose, &d), correspondences);
            d[k] = -h;
            let rm = reprojection_residuals(intrinsics, &perturb_pose(&pose, &d), correspondences);
            if let (Some(rp), Some(rm)) = (rp, rm) {
                for i in 0..m {
                    jac[(i, k)] = (rp[i] - rm[i]) / (2.0 * h);
                }
            }
        }
        let r = nalgebra::DVector::from_vec(r0);
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * r;
        let mut accepted = false;
        for _ in 0..10 {
            let mut a = jtj.clone();
            for k in 0..6 {
                a[(k, k)] += lambda * (1.0 + jtj[(k, k)]);
            }
            let Some(step) = a.lu().solve(&(-&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = perturb_pose(&pose, step.as_slice());
            let c = cost(&candidate);
            if c <= current {
                let improvement = current - c;
                pose = candidate;
                let old = current;
                current = c;
                lambda = (lambda * 0.3).max(1e-12);
                accepted = true;
                if step.amax() < 1e-12 || improvement <= 1e-14 * old.max(1e-300) {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted || current < 1e-24 {
            // No descent direction left: at a (numerical) minimum.
            converged = true;
        }
        if converged {
            break;
        }
    }
    if !converged {
        return Err(GeometryError::NoConvergence(iterations));
    }
    let rms = (current / correspondences.len() as f64).sqrt();
    Ok(PnpSolution {
        transform: pose,
        rms_reprojection: rms,
        iterations,
    })
}

const MIN_RAY_ANGLE_DEG: f64 = 0.5;
const TRIANGULATE_MAX_ITERS: usize = 20;
const TRIANGULATE_STEP_TOL: f64 = 1e-10;

/// Point minimizing summed squared reprojection error over all views.
///
/// Linear DLT on undistorted normalized coordinates, then Gauss–Newton
/// refinement against the full projection model.
pub fn triangulate(views: &[(CameraModel, Vector2<f64>)]) -> Result<Vector3<f64>> {
    if views.len() < 2 {
        return Err(GeometryError::Underdetermined(views.len()));
    }
    let rays: Vec<Vector3<f64>> = views.iter().map(|(c, px)| c.ray_direction(px)).collect();
    let mut max_angle: f64 = 0.0;
    for i in 0..rays.len() {
        for j in (i + 1)..rays.len() {
            let cos = rays[i].dot(&rays[j]).clamp(-1.0, 1.0);
            max_angle = max_angle.max(cos.acos().to_degrees());
        }
    }
    if max_angle < MIN_RAY_ANGLE_DEG {
        return Err(GeometryError::IllConditioned(max_angle));
    }

    let mut ata = Matrix4::<f64>::zeros();
    for (cam, px) in views {
        let n = cam.intrinsics.normalize_pixel(px);
        let p = cam.extrinsic.to_homogeneous();
        let (r0, r1, r2) = (p.row(0), p.row(1), p.row(2));
        for row in [r2 * n.x - r0, r2 * n.y - r1] {
            ata += row.transpose() * row;
        }
    }
    let eig = SymmetricEigen::new(ata);
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    let h = eig.eigenvectors.column(imin);
    if h[3].abs() < 1e-15 {
        return Err(GeometryError::IllConditioned(max_angle));
    }
    let mut x = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);

    let residuals = |x: &Vector3<f64>| -> Option<Vec<f64>> {
        let mut r = Vec::with_capacity(views.len() * 2);
        for (cam, px) in views {
            let proj = cam.project(x).ok()?;
            r.push(proj.x - px.x);
            r.push(proj.y - px.y);
        }
        Some(r)
    };
    for _ in 0..TRIANGULATE_MAX_ITERS {
        let Some(r0) = residuals(&x) else { break };
        let mut jac = nalgebra::DMatrix::zeros(r0.len(), 3);
        let h = 1e-6 * x.norm().max(1.0);
        for k in 0..3 {
            let mut xp = x;
            xp[k] += h;
            let mut xm = x;
            xm[k] -= h;
            let (Some(rp), Some(rm)) = (residuals(&xp), residuals(&xm)) else {
                return Ok(x);
            };
            for i in 0..r0.len() {
                jac[(i, k)] = (rp[i] - rm[i]) / (2.0 * h);
            }
        }
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * nalgebra::DVector::from_vec(r0.clone());
        let Some(step) = jtj.lu().solve(&(-jtr)) else { break };
        let candidate = x + Vector3::new(step[0], step[1], step[2]);
        let c0: f64 = r0.iter().map(|v| v * v).sum();
        match residuals(&candidate) {
            Some(rc) if rc.iter().map(|v| v * v).sum::<f64>() <= c0 => x = candidate,
            _ => break,
        }
        if step.amax() < TRIANGULATE_STEP_TOL {
            break;
        }
    }
    Ok(x)
}
