use super::{NumericsError, ParamSet, Real, Tensor};

/// Adam hyperparameters plus global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Clip gradients to this global L2 norm before the moment update.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0) }
    }
}

/// Per-parameter first/second moment accumulators and a step counter.
pub struct OptimizerState<F> {
    pub cfg: AdamConfig,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    pub step: u64,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(cfg: AdamConfig, params: &ParamSet<F>) -> Self {
        let m = params.iter().map(|(_, p)| Tensor::zeros(p.tensor.shape())).collect();
        let v = params.iter().map(|(_, p)| Tensor::zeros(p.tensor.shape())).collect();
        OptimizerState { cfg, m, v, step: 0 }
    }
}

/// One Adam step with bias correction. `grads[i]` pairs with the i-th
/// parameter in `params` creation order; `None` means zero gradient.
/// Non-trainable parameters are never touched. `lr_scale` multiplies the
/// base learning rate (warmup schedules live in the caller).
pub fn adam_step<F: Real>(
    state: &mut OptimizerState<F>,
    params: &mut ParamSet<F>,
    grads: &[Option<Tensor<F>>],
    lr_scale: f64,
) -> Result<(), NumericsError> {
    assert_eq!(grads.len(), params.len(), "grad/param count mismatch");
    for (id, p) in params.iter() {
        if let Some(g) = &grads[id.0] {
            if !g.is_finite() {
                return Err(NumericsError::NonFiniteGrad(p.name.clone()));
            }
        }
    }

    let clip_scale = match state.cfg.clip_norm {
        Some(max_norm) => {
            let total: f64 = grads.iter().flatten().map(|g| g.sq_norm_f64()).sum();
            let norm = total.sqrt();
            if norm > max_norm { max_norm / norm } else { 1.0 }
        }
        None => 1.0,
    };

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.cfg.beta1, state.cfg.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let lr = state.cfg.lr * lr_scale;

    for (id, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let Some(g) = &grads[id.0] else { continue };
        let m = state.m[id.0].data_mut();
        let v = state.v[id.0].data_mut();
        let w = p.tensor.data_mut();
        for i in 0..w.len() {
            let gi = g.data()[i].f64() * clip_scale;
            let mi = b1 * m[i].f64() + (1.0 - b1) * gi;
            let vi = b2 * v[i].f64() + (1.0 - b2) * gi * gi;
            m[i] = F::of(mi);
            v[i] = F::of(vi);
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            w[i] = F::of(w[i].f64() - lr * mhat / (vhat.sqrt() + state.cfg.eps));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.add("x", Tensor::new(vec![1], vec![v]));
        ps
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut ps = one_param(1.25);
        let mut st = OptimizerState::new(AdamConfig::default(), &ps);
        for _ in 0..10 {
            adam_step(&mut st, &mut ps, &[Some(Tensor::zeros(&[1]))], 1.0).unwrap();
        }
        assert_eq!(ps.by_name("x").unwrap().tensor.data(), &[1.25]);
    }

    #[test]
    fn first_step_is_bias_corrected_lr() {
        // With g=1 and fresh moments, the bias-corrected first update is
        // exactly -lr / (1 + eps') which is ~ -0.1 for lr=0.1.
        let mut ps = one_param(0.0);
        let cfg = AdamConfig { lr: 0.1, clip_norm: None, ..AdamConfig::default() };
        let mut st = OptimizerState::new(cfg, &ps);
        adam_step(&mut st, &mut ps, &[Some(Tensor::new(vec![1], vec![1.0]))], 1.0).unwrap();
        let x = ps.by_name("x").unwrap().tensor.data()[0];
        assert!((x + 0.1).abs() < 1e-6, "got {x}");
    }

    #[test]
    fn quadratic_bowl_converges() {
        // minimize (x - 3)^2 starting from 0
        let mut ps = one_param(0.0);
        let cfg = AdamConfig { lr: 0.05, clip_norm: Some(1.0), ..AdamConfig::default() };
        let mut st = OptimizerState::new(cfg, &ps);
        for _ in 0..500 {
            let x = ps.by_name("x").unwrap().tensor.data()[0];
            let g = 2.0 * (x - 3.0);
            adam_step(&mut st, &mut ps, &[Some(Tensor::new(vec![1], vec![g]))], 1.0).unwrap();
        }
        let x = ps.by_name("x").unwrap().tensor.data()[0];
        assert!((x - 3.0).abs() < 1e-3, "got {x}");
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut ps = one_param(0.0);
        let mut st = OptimizerState::new(AdamConfig::default(), &ps);
        let err = adam_step(&mut st, &mut ps, &[Some(Tensor::new(vec![1], vec![f64::NAN]))], 1.0)
            .unwrap_err();
        assert!(err.to_string().contains("'x'"));
    }

    #[test]
    fn non_trainable_params_receive_no_update() {
        let mut ps = ParamSet::new();
        ps.add_frozen("frozen", Tensor::new(vec![1], vec![2.0]));
        let mut st = OptimizerState::new(AdamConfig::default(), &ps);
        adam_step(&mut st, &mut ps, &[Some(Tensor::new(vec![1], vec![1.0]))], 1.0).unwrap();
        assert_eq!(ps.by_name("frozen").unwrap().tensor.data(), &[2.0]);
    }
}
