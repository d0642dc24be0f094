//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, ParamId, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates sampled per parameter tensor (all of them if the tensor is smaller).
    pub coords_per_param: usize,
    /// Denominator floor of the relative error, so vanishing gradients compare absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, coords_per_param: 8, floor: 1e-6, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }

    pub fn coordinates(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backward-pass gradients of the scalar `f` with central differences
/// on a random subsample of every parameter's coordinates.
pub fn grad_check<F, E>(store: &ParamStore, opts: &GradCheckOptions, f: F) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Var, E>,
    E: From<TensorError>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    grad_check_subset(store, &ids, opts, f)
}

/// [`grad_check`] restricted to the parameters in `ids`.
pub fn grad_check_subset<F, E>(store: &ParamStore, ids: &[ParamId], opts: &GradCheckOptions, f: F) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let bound = store.bind(&mut g, true);
    let loss = f(&mut g, &bound)?;
    g.backward(loss)?;
    let analytic = bound.grads(&g);

    let eval = |s: &ParamStore| -> Result<f64, E> {
        let mut g = Graph::new();
        let bound = s.bind(&mut g, false);
        let out = f(&mut g, &bound)?;
        Ok(g.value(out).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = store.clone();
    let mut report = GradCheckReport::default();
    for &id in ids {
        let grad = &analytic[id.0];
        let n = store.tensor(id).numel();
        let picks = sample(&mut rng, n, opts.coords_per_param.min(n)).into_vec();
        let mut check = ParamCheck {
            name: store.entry(id).name.clone(),
            checked: picks.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &j in &picks {
            let orig = store.tensor(id).data()[j];
            probe.tensor_mut(id).data_mut()[j] = orig + opts.eps;
            let plus = eval(&probe)?;
            probe.tensor_mut(id).data_mut()[j] = orig - opts.eps;
            let minus = eval(&probe)?;
            probe.tensor_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = grad.data()[j];
            let err = relative_error(a, numeric, opts.floor);
            if err >= check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = j;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
