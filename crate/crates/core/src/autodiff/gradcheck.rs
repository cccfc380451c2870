use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Step used by [`check_gradients`].
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct CoordinateCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coordinates: Vec<CoordinateCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Relative error with a small floor, so vanishing gradients are compared
/// absolutely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Compares reverse-mode gradients of a scalar function with central
/// differences at `point`.
///
/// `f` receives a fresh graph and the input node and must return a node
/// holding a single value. Callers keep the point away from kinks.
pub fn check_gradients<F>(f: F, point: &Tensor, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let eval = |p: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.variable(p.clone());
        let y = f(&mut g, x)?;
        scalar_of(&g, y)
    };

    let mut g = Graph::new();
    let x = g.variable(point.clone());
    let y = f(&mut g, x)?;
    scalar_of(&g, y)?;
    let grad = g.backward(y, &[x], false)?.remove(0);

    let mut coordinates = Vec::with_capacity(point.numel());
    let mut max_rel_err: f64 = 0.0;
    for i in 0..point.numel() {
        let mut hi = point.clone();
        hi.data_mut()[i] += FD_STEP;
        let mut lo = point.clone();
        lo.data_mut()[i] -= FD_STEP;
        let numeric = (eval(&hi)? - eval(&lo)?) / (2.0 * FD_STEP);
        let analytic = grad.data()[i];
        let rel_err = relative_error(analytic, numeric);
        max_rel_err = if rel_err.is_nan() {
            f64::INFINITY
        } else {
            max_rel_err.max(rel_err)
        };
        coordinates.push(CoordinateCheck {
            index: i,
            analytic,
            numeric,
            rel_err,
        });
    }
    Ok(GradCheckReport {
        coordinates,
        max_rel_err,
        tol,
        passed: max_rel_err <= tol,
    })
}

fn scalar_of(g: &Graph, y: NodeId) -> Result<f64> {
    let v = g.value(y);
    if v.numel() != 1 {
        return Err(Error::usage(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}
