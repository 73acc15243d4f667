use crate::error::Result;

use super::{Graph, ParamStore, Tensor, Var};

/// Gradients smaller than this are compared in absolute rather than relative
/// terms, so an exactly-zero gradient does not divide by zero.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    fn new(tol: f64) -> Self {
        GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            coordinates: 0,
            tol,
            passed: true,
        }
    }

    fn record(&mut self, input: usize, coord: usize, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
        let err = (analytic - numeric).abs() / denom;
        self.coordinates += 1;
        if err.is_nan() || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = Some((input, coord));
        }
        self.passed = self.max_rel_error <= self.tol;
    }
}

fn scalar_of(g: &Graph<f64>, v: Var) -> f64 {
    g.value(v).item().unwrap_or(f64::NAN)
}

/// Compare the backward pass of `f` against central finite differences at
/// every coordinate of every input.
pub fn grad_check<F>(inputs: &[Tensor<f64>], f: F, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |point: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = point.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(scalar_of(&g, out))
    };

    let mut report = GradCheckReport::new(tol);
    let mut point: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for c in 0..inputs[i].numel() {
            let orig = inputs[i].data()[c];
            point[i].data_mut()[c] = orig + eps;
            let plus = eval(&point)?;
            point[i].data_mut()[c] = orig - eps;
            let minus = eval(&point)?;
            point[i].data_mut()[c] = orig;
            report.record(i, c, grad.data()[c], (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}

/// Finite-difference check of every trainable parameter in `store` for a
/// scalar model loss `f`. With `max_per_param = Some(n)`, at most `n`
/// evenly strided coordinates of each parameter are probed.
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    f: F,
    eps: f64,
    tol: f64,
    max_per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    g.backward(out)?;
    let grads = g.param_grads();

    let mut report = GradCheckReport::new(tol);
    let mut probe = store.clone();
    for (id, entry) in store.iter().filter(|(_, e)| e.trainable) {
        let numel = entry.value.numel();
        let analytic = grads
            .iter()
            .find(|(gid, _)| *gid == id)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| Tensor::zeros(entry.value.shape()));
        let stride = match max_per_param {
            Some(n) if n > 0 && numel > n => numel.div_ceil(n),
            _ => 1,
        };
        for c in (0..numel).step_by(stride) {
            let orig = entry.value.data()[c];
            probe.get_mut(id).value.data_mut()[c] = orig + eps;
            let mut gp = Graph::new();
            let out = f(&mut gp, &probe)?;
            let plus = scalar_of(&gp, out);
            probe.get_mut(id).value.data_mut()[c] = orig - eps;
            let mut gm = Graph::new();
            let out = f(&mut gm, &probe)?;
            let minus = scalar_of(&gm, out);
            probe.get_mut(id).value.data_mut()[c] = orig;
            report.record(id.index(), c, analytic.data()[c], (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}
