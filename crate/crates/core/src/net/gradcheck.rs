use rand::Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::Result;
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, for near-zero gradients.
    pub floor: f64,
    /// Entries sampled per parameter tensor (all entries when the tensor is smaller).
    pub samples_per_param: usize,
    pub seed: u64,
    /// Negate analytic gradients before comparing (negative control).
    pub flip_sign: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-4,
            samples_per_param: 24,
            seed: 0,
            flip_sign: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric gradient at the worst entry.
    pub worst_values: (f64, f64),
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }
}

/// Compares analytic parameter gradients of the scalar built by `f` with
/// central finite differences, in double precision.
pub fn grad_check<F>(store: &ParamStore<f64>, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store, false);
        let out = f(&mut g)?;
        let grads = g.backward(out)?;
        store
            .ids()
            .map(|id| grads.param(id).map(|t| t.data().to_vec()))
            .collect::<Vec<_>>()
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(s, false);
        let out = f(&mut g)?;
        Ok(g.value(out).data()[0])
    };

    let mut rng = stream_rng(opts.seed, &[0x9c]);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
        worst_values: (0.0, 0.0),
        tolerance: opts.tolerance,
    };
    for id in store.ids() {
        let n = store.get(id).numel();
        let picks: Vec<usize> = if n <= opts.samples_per_param {
            (0..n).collect()
        } else {
            (0..opts.samples_per_param).map(|_| rng.random_range(0..n)).collect()
        };
        for k in picks {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + opts.step;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - opts.step;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let mut a = analytic[id.0].as_ref().map_or(0.0, |g| g[k]);
            if opts.flip_sign {
                a = -a;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.name(id).to_string(), k));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}
