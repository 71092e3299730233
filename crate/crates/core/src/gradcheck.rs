//! Central finite-difference gradient checking against [`Graph`] backprop.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Mat, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Absolute scale under which differences are compared absolutely rather
/// than relatively (guards components whose true gradient is ~0).
pub const REL_FLOOR: f64 = 1e-3;

pub fn random_mat<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), scale: f64) -> Mat {
    Mat::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal) * scale)
}

/// Builds `f` on a fresh graph with `x` as the only differentiable leaf,
/// backpropagates, and compares every component of the gradient with a
/// central difference of step `h`.
pub fn check_gradient<F>(x: &Mat, h: f64, f: F) -> GradCheck
where
    F: Fn(&mut Graph, Var) -> Var,
{
    check_gradients(std::slice::from_ref(x), h, |g, vars| f(g, vars[0]))
}

/// Multi-input variant of [`check_gradient`].
pub fn check_gradients<F>(inputs: &[Mat], h: f64, f: F) -> GradCheck
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |vals: &[Mat]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|m| g.constant(m.clone())).collect();
        let out = f(&mut g, &vars);
        g.scalar_value(out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
    let out = f(&mut g, &vars);
    assert_eq!(g.shape(out), (1, 1), "gradient check needs a scalar output");
    let grads = g.backward(out);

    let mut result = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let mut probe: Vec<Mat> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let zeros = Mat::zeros(inputs[k].dim());
        let analytic = grads.get(*var).unwrap_or(&zeros).clone();
        for idx in 0..inputs[k].len() {
            let pos = (idx / inputs[k].ncols(), idx % inputs[k].ncols());
            let orig = inputs[k][pos];
            probe[k][pos] = orig + h;
            let plus = eval(&probe);
            probe[k][pos] = orig - h;
            let minus = eval(&probe);
            probe[k][pos] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pos];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            result.max_abs_error = result.max_abs_error.max(abs);
            result.max_rel_error = result.max_rel_error.max(rel);
            result.checked += 1;
        }
    }
    result
}
