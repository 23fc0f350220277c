use super::{Graph, Real, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over all coordinates of |analytic − cd| / max(|analytic|, |cd|, 1e-12).
    pub max_rel_error: f64,
    /// (input index, coordinate) where the max was attained.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h`.
///
/// `f` builds the computation on the given graph from one variable per input
/// and returns a scalar node.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(TensorError::Invalid(format!("step {h} outside [1e-6, 1e-3]")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(TensorError::Invalid(format!(
            "grad_check needs a scalar function, got shape {:?}",
            g.shape(out)
        )));
    }
    g.backward_scalar(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad_tensor(v)).collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for c in 0..input.len() {
            let x0 = input.data()[c];
            work[i].data_mut()[c] = x0 + h;
            let fp = eval(&work).map_err(|e| fail(i, c, e))?;
            work[i].data_mut()[c] = x0 - h;
            let fm = eval(&work).map_err(|e| fail(i, c, e))?;
            work[i].data_mut()[c] = x0;
            let cd = (fp - fm) / (2.0 * h);
            if !cd.is_finite() {
                return Err(TensorError::GradCheck {
                    input: i,
                    coord: c,
                    reason: "non-finite central difference".into(),
                });
            }
            let a = analytic[i].data()[c];
            let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-12);
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, c);
            }
        }
    }
    Ok(report)
}

fn fail(input: usize, coord: usize, e: TensorError) -> TensorError {
    TensorError::GradCheck {
        input,
        coord,
        reason: e.to_string(),
    }
}

/// Random-weighted reduction `Σ w ⊙ y` used to turn matrix-valued maps into
/// scalars for gradient checking.
pub fn weighted_sum<T: Real>(g: &mut Graph<T>, y: Var, weights: &Tensor<T>) -> Result<Var, TensorError> {
    let w = g.constant(weights.clone());
    let p = g.mul(y, w)?;
    g.sum(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_map_is_nearly_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[2, 4], 1.0, &mut rng);
        let r = grad_check(
            |g, v| {
                let y = g.linear(v[0], v[1])?;
                g.sum(y)
            },
            &[a, w],
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-10, "{r:?}");
    }

    #[test]
    fn corrupted_vjp_is_detected() {
        let x = Tensor::<f64>::vector(&[0.3, -1.2, 2.0]);
        let r = grad_check(
            |g, v| {
                let value = g.value(v[0]).map(|t| t * t);
                // true derivative is 2x; the rule below returns 3x
                let y = g.custom(
                    &[v[0]],
                    value,
                    Box::new(|ins, _out, dy| {
                        vec![ins[0].data().iter().zip(dy).map(|(&x, &g)| 3.0 * x * g).collect()]
                    }),
                )?;
                g.sum(y)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error > 1e-2, "{r:?}");
    }

    #[test]
    fn rejects_out_of_range_step() {
        let x = Tensor::<f64>::scalar(1.0);
        assert!(grad_check(|g, v| g.sum(v[0]), &[x], 1e-1).is_err());
    }
}
