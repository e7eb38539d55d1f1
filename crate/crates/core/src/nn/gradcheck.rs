//! Central finite-difference oracle for analytic gradients.

use super::{named_params, Params};
use crate::error::{Error, Result};

/// Roundoff bound of a central difference: `f(x ± eps)` each carry about
/// `|f| * machine epsilon` of error, which the division by `2 eps`
/// amplifies. Analytic/numeric gaps below it count as agreement.
pub fn fd_resolution(up: f64, down: f64, eps: f64) -> f64 {
    16.0 * f64::EPSILON * up.abs().max(down.abs()).max(1.0) / eps
}

/// Relative error of one coordinate. When the gradient is so small that
/// roundoff dominates the difference quotient, a gap within the resolution
/// counts as exact; larger gradients are always compared relatively.
fn coordinate_error(analytic: f64, up: f64, down: f64, eps: f64) -> f64 {
    let numeric = (up - down) / (2.0 * eps);
    let resolution = fd_resolution(up, down, eps);
    let tiny = analytic.abs().max(numeric.abs()) < 1e3 * resolution;
    if tiny && (analytic - numeric).abs() < resolution {
        0.0
    } else {
        relative_error(analytic, numeric)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Maximum relative error between `analytic` and the central difference of
/// `f` around `x`, over every coordinate. Near-zero gradients are judged
/// against [`fd_resolution`]; this matters for coordinates whose true
/// gradient is identically zero, such as attention key biases.
pub fn grad_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], eps: f64) -> Result<f64> {
    if x.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "grad_check: {} inputs but {} analytic gradients",
            x.len(),
            analytic.len()
        )));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe);
        probe[i] = x[i] - eps;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() || !analytic[i].is_finite() {
            return Err(Error::NonFinite {
                context: "grad_check".into(),
                index: i,
            });
        }
        worst = worst.max(coordinate_error(analytic[i], up, down, eps));
    }
    Ok(worst)
}

/// Finite-difference check over every coordinate of every parameter of
/// `model`. `analytic` holds the gradient in the same layout. Returns the
/// worst relative error and the parameter it occurred in.
pub fn grad_check_params<M: Params<f64> + Clone>(
    model: &M,
    analytic: &M,
    f: impl Fn(&M) -> f64,
    eps: f64,
) -> Result<(f64, String)> {
    let grads: Vec<(String, Vec<f64>)> = named_params(analytic)
        .into_iter()
        .map(|(n, t)| (n, t.iter().copied().collect()))
        .collect();
    let shapes: Vec<usize> = named_params(model).iter().map(|(_, t)| t.len()).collect();
    if shapes.len() != grads.len() || shapes.iter().zip(&grads).any(|(&s, (_, g))| s != g.len()) {
        return Err(Error::Shape("grad_check_params: layout mismatch".into()));
    }

    let mut probe = model.clone();
    let mut worst = (0.0f64, String::new());
    for (p, (name, grad)) in grads.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let original = get(&probe, p, i);
            set(&mut probe, p, i, original + eps);
            let up = f(&probe);
            set(&mut probe, p, i, original - eps);
            let down = f(&probe);
            set(&mut probe, p, i, original);
            if !up.is_finite() || !down.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("grad_check_params {name}"),
                    index: i,
                });
            }
            let err = coordinate_error(a, up, down, eps);
            if err > worst.0 {
                worst = (err, format!("{name}[{i}]"));
            }
        }
    }
    Ok(worst)
}

fn get<M: Params<f64>>(m: &M, tensor: usize, index: usize) -> f64 {
    let params = named_params(m);
    params[tensor]
        .1
        .as_slice()
        .expect("parameters are contiguous")[index]
}

fn set<M: Params<f64>>(m: &mut M, tensor: usize, index: usize, value: f64) {
    let mut k = 0;
    m.visit_mut("", &mut |_, t| {
        if k == tensor {
            t.as_slice_mut().expect("parameters are contiguous")[index] = value;
        }
        k += 1;
    });
}
