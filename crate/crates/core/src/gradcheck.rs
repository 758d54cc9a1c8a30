//! Central finite-difference gradient checks over every element of every
//! trainable array.

use crate::tensor::{DenseArray, Params};

pub const STEP: f64 = 1e-5;
/// Fallback step for elements whose first probe straddles a ReLU kink.
pub const FINE_STEP: f64 = 1e-7;
pub const TOL: f64 = 1e-4;

/// Compares analytic gradients (visited in the same order as the
/// parameters) with central differences of `loss`. Returns the worst
/// `|analytic - numeric| / max(1, |numeric|)` and its array name.
///
/// Elements that miss `TOL` at `STEP` are probed again at `FINE_STEP`, and
/// the smaller error counts. A wrong gradient disagrees at both steps; a
/// kink within `STEP` of the parameter only spoils the coarse probe.
pub fn check<P: Params + Clone>(params: &P, analytic: &P, loss: &mut dyn FnMut(&P) -> f64) -> (f64, String) {
    let mut grads: Vec<(String, DenseArray)> = Vec::new();
    analytic.visit("", &mut |name, a, trainable| {
        if trainable {
            grads.push((name.to_string(), a.clone()))
        }
    });
    let mut worst = (0.0f64, String::new());
    let mut probe = params.clone();
    for (idx, (name, grad)) in grads.iter().enumerate() {
        for e in 0..grad.len() {
            let eval_at = |delta: f64, probe: &mut P| {
                let mut k = 0;
                probe.visit_mut("", &mut |_, a, trainable| {
                    if trainable {
                        if k == idx {
                            a.data[e] += delta;
                        }
                        k += 1;
                    }
                });
            };
            let mut err_at = |step: f64, probe: &mut P| {
                eval_at(step, probe);
                let plus = loss(probe);
                eval_at(-2.0 * step, probe);
                let minus = loss(probe);
                eval_at(step, probe);
                let numeric = (plus - minus) / (2.0 * step);
                (grad.data[e] - numeric).abs() / numeric.abs().max(1.0)
            };
            let mut err = err_at(STEP, &mut probe);
            if err >= TOL {
                err = err.min(err_at(FINE_STEP, &mut probe));
            }
            if err > worst.0 {
                worst = (err, format!("{name}[{e}]"));
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Linear;

    fn relu_sum(p: &Linear) -> f64 {
        p.w.data.iter().map(|&v| v.max(0.0)).sum()
    }

    #[test]
    fn kink_near_parameter_is_tolerated() {
        let mut p = Linear {
            w: DenseArray::zeros(&[1, 2]),
            b: DenseArray::zeros(&[2]),
        };
        p.w.data = vec![3e-6, 0.5];
        let mut g = p.clone();
        g.w.data = vec![1.0, 1.0];
        assert!(check(&p, &g, &mut relu_sum).0 < TOL);
    }

    #[test]
    fn wrong_gradient_fails() {
        let mut p = Linear {
            w: DenseArray::zeros(&[1, 2]),
            b: DenseArray::zeros(&[2]),
        };
        p.w.data = vec![3e-6, 0.5];
        let mut g = p.clone();
        g.w.data = vec![1.0, 0.9];
        let (err, at) = check(&p, &g, &mut relu_sum);
        assert!((err - 0.1).abs() < 1e-6);
        assert_eq!(at, "weight[1]");
    }
}
