//! Central finite-difference gradient checking. This is the independent
//! oracle for every backward rule; the `grad-check` CLI subcommand and the
//! test suites both run through it.

/// Central finite differences of a scalar function at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f32], step: f32) -> Vec<f32>
where
    F: FnMut(&[f32]) -> f32,
{
    let mut x = x.to_vec();
    let mut grad = vec![0.0f32; x.len()];
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let hi = f(&x) as f64;
        x[i] = orig - step;
        let lo = f(&x) as f64;
        x[i] = orig;
        grad[i] = ((hi - lo) / (2.0 * step as f64)) as f32;
    }
    grad
}

/// Max over coordinates of |a−b| / max(|a|, |b|, floor). The floor keeps
/// near-zero gradients from blowing up the ratio on f32 rounding noise.
pub fn max_rel_error(analytic: &[f32], numeric: &[f32], floor: f32) -> f32 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0f32, f32::max)
}

/// Checks every input's analytic gradient against central finite
/// differences for a scalar-valued graph. `build` must construct the same
/// computation every call. Returns the max relative error over all inputs.
pub fn fd_check_multi<F>(inputs: &[super::Tensor], build: F, step: f32, floor: f32) -> f32
where
    F: Fn(&mut super::Graph, &[super::TensorId]) -> super::TensorId,
{
    use super::{Graph, Tensor};
    let mut graph = Graph::new();
    let ids: Vec<_> = inputs.iter().map(|t| graph.leaf(t.clone(), true)).collect();
    let out = build(&mut graph, &ids);
    graph.backward(out).expect("scalar output");
    let mut worst = 0.0f32;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = graph.grad(ids[i]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.numel()]);
        let f = |vals: &[f32]| {
            let mut g = Graph::new();
            let ids: Vec<_> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    let t = if j == i {
                        Tensor::new(t.shape().to_vec(), vals.to_vec())
                    } else {
                        t.clone()
                    };
                    g.leaf(t, false)
                })
                .collect();
            let out = build(&mut g, &ids);
            g.value(out).item()
        };
        let numeric = finite_diff_grad(f, input.data(), step);
        worst = worst.max(max_rel_error(&analytic, &numeric, floor));
    }
    worst
}

/// One named gradient-check result.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f32,
    pub tolerance: f32,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}
