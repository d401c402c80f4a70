use super::{NumericsError, ParamSet, Tape, Tensor, Var};

/// Result for one parameter: worst relative disagreement between
/// reverse-mode and central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| !e.flagged)
    }
}

/// Compare reverse-mode gradients of a scalar-valued model function
/// against central finite differences, parameter by parameter.
///
/// Runs in f64 only; relative error is |a - n| / max(1, |a|, |n|).
pub fn grad_check<M>(
    params: &ParamSet<f64>,
    eps: f64,
    tol: f64,
    model_fn: M,
) -> Result<GradCheckReport, NumericsError>
where
    M: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |ps: &ParamSet<f64>| -> Result<(f64, Vec<Option<Tensor<f64>>>), NumericsError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|(_, p)| tape.leaf(p.tensor.clone())).collect();
        let loss = model_fn(&mut tape, &vars);
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(NumericsError::NonFiniteLoss(lv));
        }
        let mut grads = tape.backward(loss);
        Ok((lv, vars.iter().map(|&v| grads.take(v)).collect()))
    };

    let (_, analytic) = eval(params)?;

    let mut work = params.clone();
    let mut entries = Vec::new();
    let mut max_rel = 0.0f64;
    for (id, p) in params.iter() {
        let n = p.tensor.numel();
        let mut worst = 0.0f64;
        for i in 0..n {
            let orig = work.get(id).tensor.data()[i];
            work.get_mut(id).tensor.data_mut()[i] = orig + eps;
            let (lp, _) = eval(&work)?;
            work.get_mut(id).tensor.data_mut()[i] = orig - eps;
            let (lm, _) = eval(&work)?;
            work.get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic[id.0].as_ref().map(|g| g.data()[i]).unwrap_or(0.0);
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
        max_rel = max_rel.max(worst);
        entries.push(GradCheckEntry {
            name: p.name.clone(),
            max_rel_err: worst,
            flagged: worst > tol,
        });
    }
    Ok(GradCheckReport { entries, max_rel_err: max_rel, tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn affine_layer_squared_loss_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::randn(&[3, 2], 0.5, &mut rng));
        ps.add("b", Tensor::randn(&[2], 0.5, &mut rng));
        let x = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let y = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng);
        let report = grad_check(&ps, 1e-5, 1e-6, |tape, vars| {
            let xv = tape.leaf(x.clone());
            let yv = tape.leaf(y.clone());
            let pred = tape.linear(xv, vars[0], vars[1]);
            tape.mse(pred, yv)
        })
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
        assert!(report.max_rel_err < 1e-6);
    }

    #[test]
    fn stop_gradient_path_reports_exact_zero() {
        // Blocked-path term: ||sg[z] - z0||^2 with z0 the base point. The
        // analytic gradient through sg is exactly zero; the central
        // difference is (eps^2 - eps^2)/2eps = 0 as well. An ordinary
        // quadratic term is added so the check still sees a live gradient.
        let z0 = Tensor::new(vec![2], vec![0.4, -0.3]);
        let mut ps = ParamSet::new();
        ps.add("z", z0.clone());
        let target = Tensor::new(vec![2], vec![1.0, -1.0]);
        let report = grad_check(&ps, 1e-5, 1e-6, |tape, vars| {
            let sg = tape.stop_gradient(vars[0]);
            let base = tape.leaf(z0.clone());
            let blocked = tape.mse(sg, base);
            let tv = tape.leaf(target.clone());
            let live = tape.mse(vars[0], tv);
            tape.add(blocked, live)
        })
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let mut ps = ParamSet::new();
        ps.add("x", Tensor::new(vec![1], vec![0.7]));
        // mse against 0 but with a bogus extra backward contribution via a
        // hand-built wrong analytic value: emulate by comparing a function
        // whose tape gradient path deliberately disagrees (+0.1 shift done
        // through straight_through misuse).
        let report = grad_check(&ps, 1e-5, 1e-6, |tape, vars| {
            // forward: x^2 + 0.1*x but gradient of the second term is
            // blocked, so analytic = 2x while numeric = 2x + 0.1.
            let sq = tape.mul(vars[0], vars[0]);
            let sg = tape.stop_gradient(vars[0]);
            let shift = tape.scale(sg, 0.1);
            let sum = tape.add(sq, shift);
            tape.sum_all(sum)
        })
        .unwrap();
        assert!(!report.passed());
        assert!(report.entries[0].max_rel_err > 0.05);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut ps = ParamSet::new();
        ps.add("x", Tensor::new(vec![1], vec![2.0]));
        let err = grad_check(&ps, 1e-5, 1e-6, |tape, vars| {
            let l = tape.sum_all(vars[0]);
            tape.scale(l, f64::NAN)
        });
        assert!(err.is_err());
    }

    #[test]
    fn straight_through_matches_frozen_offset_surrogate() {
        // The straight-through estimator forwards z_q and back-props the
        // identity to z, i.e. it differentiates the surrogate
        // f(z) = loss(z + c) with c = z_q - z frozen at the base point.
        // Analytic gradients from the real op must match central finite
        // differences of that surrogate.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z0 = Tensor::<f64>::randn(&[4, 8], 1.0, &mut rng);
        let zq = Tensor::<f64>::randn(&[4, 8], 1.0, &mut rng);
        let target = Tensor::<f64>::randn(&[4, 8], 1.0, &mut rng);

        // analytic: real straight_through graph
        let mut tape = Tape::new();
        let zv = tape.leaf(z0.clone());
        let zqv = tape.leaf(zq.clone());
        let tv = tape.leaf(target.clone());
        let out = tape.straight_through(zv, zqv);
        let loss = tape.mse(out, tv);
        let mut grads = tape.backward(loss);
        let analytic = grads.take(zv).unwrap();
        assert!(grads.get(zqv).is_none(), "z_q producer must receive nothing");

        // numeric: surrogate with the offset c = z_q - z0 held constant
        let offset: Vec<f64> = zq.data().iter().zip(z0.data()).map(|(&q, &z)| q - z).collect();
        let surrogate = |z: &[f64]| -> f64 {
            let n = z.len() as f64;
            z.iter()
                .zip(&offset)
                .zip(target.data())
                .map(|((&zi, &ci), &ti)| {
                    let d = zi + ci - ti;
                    d * d
                })
                .sum::<f64>()
                / n
        };
        let eps = 1e-5;
        let mut base = z0.data().to_vec();
        let mut max_rel = 0.0f64;
        for i in 0..base.len() {
            let orig = base[i];
            base[i] = orig + eps;
            let lp = surrogate(&base);
            base[i] = orig - eps;
            let lm = surrogate(&base);
            base[i] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-6, "max rel err {max_rel}");
    }
}
