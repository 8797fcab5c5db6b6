//! Selective state space sequence layers.

mod block;
mod gru;
pub mod kernel;
mod model;

pub use block::{SsdConfig, SsdLayer};
pub use gru::GruLayer;
pub use kernel::{ScanDims, ScanMode};
pub use model::{Backbone, Layer, SequenceModel, SequenceState};

use crate::error::Result;
use crate::tensor::{FusedOp, Graph, Real, Var};
use kernel::{Saved, ScanInputs};

#[derive(Debug)]
struct ScanOp<T> {
    dims: ScanDims,
    h0: Option<Vec<T>>,
    saved: Saved<T>,
}

impl<T: Real> FusedOp<T> for ScanOp<T> {
    fn name(&self) -> &'static str {
        "ssd_scan"
    }

    fn backward(&self, inputs: &[&[T]], _output: &[T], grad_out: &[T]) -> Vec<Option<Vec<T>>> {
        let inp = ScanInputs { x: inputs[0], log_a: inputs[1], b: inputs[2], c: inputs[3], h0: self.h0.as_deref() };
        let g = kernel::scan_backward(&self.dims, &inp, &self.saved, grad_out);
        vec![Some(g.dx), Some(g.dlog_a), Some(g.db), Some(g.dc)]
    }
}

/// Records the scan on the tape. `x: [b, l, h, p]`, `log_a: [b, l, h]`,
/// `b, c: [b, l, n]`; `h0` is carried state data (no gradient).
/// Returns `y: [b, l, h, p]` and the final state `[b, h, p, n]`.
pub fn scan<T: Real>(g: &mut Graph<T>, x: Var, log_a: Var, b: Var, c: Var, h0: Option<&[T]>, mode: ScanMode) -> Result<(Var, Vec<T>)> {
    let xs = g.shape(x).to_vec();
    let ns = g.shape(b).to_vec();
    if xs.len() != 4 || ns.len() != 3 {
        return Err(crate::Error::shape("ssd_scan", format!("x {xs:?}, B {ns:?}")));
    }
    let dims = ScanDims { batch: xs[0], len: xs[1], heads: xs[2], head_dim: xs[3], state: ns[2] };
    let inp = ScanInputs { x: g.value(x), log_a: g.value(log_a), b: g.value(b), c: g.value(c), h0 };
    let needs_grad = [x, log_a, b, c].iter().any(|&v| g.requires_grad(v));
    let out = kernel::scan(&dims, &inp, mode, needs_grad)?;
    let op = ScanOp { dims, h0: h0.map(|h| h.to_vec()), saved: out.saved };
    let y = g.fused(&[x, log_a, b, c], xs, out.y, Box::new(op))?;
    Ok((y, out.state))
}

#[cfg(test)]
mod tests;
