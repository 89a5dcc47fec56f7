//! Central finite-difference gradient checking.

use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::rng::Rng;

/// Outcome of one gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest relative error over every input coordinate.
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of that error.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps coordinates whose
/// true gradient is zero from dividing rounding noise by nothing.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare reverse-mode gradients of `f` against central differences.
///
/// `f` builds an arbitrary-shaped output from the input leaves; it is
/// reduced to a scalar by a fixed random projection so every output
/// coordinate contributes.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, step: f64, projection_seed: u64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut proj: Option<Tensor> = None;
    let mut eval = |values: &[Tensor], grads: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars = values
            .iter()
            .map(|t| g.input(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        let p = proj
            .get_or_insert_with(|| {
                let mut rng = Rng::new(projection_seed);
                let shape = g.shape(out).to_vec();
                let n = shape.iter().product();
                Tensor::from_parts(shape, (0..n).map(|_| rng.normal()).collect())
            })
            .clone();
        let pv = g.constant(p)?;
        let prod = g.mul(out, pv)?;
        let loss = g.sum(prod)?;
        let value = g.value(loss).item()?;
        if !grads {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        let gs = vars
            .iter()
            .zip(values)
            .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, gs))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut work = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let x = t.data()[j];
            work[i].data_mut()[j] = x + step;
            let (up, _) = eval(&work, false)?;
            work[i].data_mut()[j] = x - step;
            let (down, _) = eval(&work, false)?;
            work[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * step);
            let err = relative_error(analytic[i].data()[j], numeric, 1e-3);
            report.coordinates += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}
