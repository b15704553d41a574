use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences. Returns the largest `|analytic - numeric| /
/// max(1, |numeric|)` over every coordinate of every input.
pub fn grad_check_many<F>(f: F, points: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.constant(p.clone())).collect();
        let root = f(&mut g, &vars)?;
        g.value(root).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = points.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("every input is a trainable leaf");
        for i in 0..points[k].len() {
            let orig = points[k].data()[i];
            probe[k].data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(point), step)
}
