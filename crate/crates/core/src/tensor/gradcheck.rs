//! Central finite-difference oracle for analytic gradients.
//!
//! Perturbed evaluations replay the stop-gradient values of the unperturbed
//! graph (see [`Graph::replaying`]), so the oracle differentiates the same
//! surrogate function the tape does.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Relative error with a floor on the denominator, so that two gradients that
/// are both numerically zero compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-7);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug)]
pub struct GradProbe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub probes: Vec<GradProbe>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }
}

/// Compares the tape gradient of `f(inputs)` against central differences of
/// step `eps` at every element of every input (or at `probes` when given).
pub fn check<F>(inputs: &[Tensor<f64>], eps: f64, probes: Option<&[(usize, usize)]>, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let frozen = g.detached_values();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut h = Graph::replaying(frozen.clone());
        let vars: Vec<Var> = perturbed.iter().map(|t| h.leaf(t.clone())).collect();
        let loss = f(&mut h, &vars)?;
        Ok(h.scalar(loss))
    };

    let all: Vec<(usize, usize)>;
    let probes = match probes {
        Some(p) => p,
        None => {
            all = inputs.iter().enumerate().flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j))).collect();
            &all
        }
    };

    let mut report = GradReport::default();
    let mut work = inputs.to_vec();
    for &(i, j) in probes {
        let analytic = g.grad(vars[i]).map_or(0.0, |d| d[j]);
        let base = work[i].data()[j];
        work[i].data_mut()[j] = base + eps;
        let up = eval(&work)?;
        work[i].data_mut()[j] = base - eps;
        let down = eval(&work)?;
        work[i].data_mut()[j] = base;
        let numeric = (up - down) / (2.0 * eps);
        report.probes.push(GradProbe { input: i, index: j, analytic, numeric, rel_error: relative_error(analytic, numeric) });
    }
    Ok(report)
}
