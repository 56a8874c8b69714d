use super::tensor::ParamSet;
use crate::error::{invalid, shape_err, Error, Result};

/// Reference Adam constants; the learning rate comes from the experiment.
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_LR: f64 = 3e-4;
/// Target-network averaging coefficient.
pub const DEFAULT_TAU: f64 = 5e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: DEFAULT_LR, beta1: ADAM_BETA1, beta2: ADAM_BETA2, eps: ADAM_EPS }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First/second moment estimates and step count for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if cfg.lr <= 0.0 {
        return Err(invalid(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if !params.same_layout(grads) || !params.same_layout(&state.m) {
        return Err(shape_err("adam_step", "gradients/moments do not match parameters"));
    }
    for (name, g) in grads.iter() {
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient `{name}`")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .map(|(_, p)| p)
        .zip(grads.iter().map(|(_, g)| g))
        .zip(state.m.iter_mut().map(|(_, m)| m).zip(state.v.iter_mut().map(|(_, v)| v)))
    {
        for (((pp, &gg), mm), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mm = cfg.beta1 * *mm + (1.0 - cfg.beta1) * gg;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gg * gg;
            let mhat = *mm / bc1;
            let vhat = *vv / bc2;
            *pp -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// `target ← (1 − tau)·target + tau·online`.
pub fn polyak_update(target: &mut ParamSet, online: &ParamSet, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(invalid(format!("polyak coefficient must lie in (0, 1], got {tau}")));
    }
    if !target.same_layout(online) {
        return Err(shape_err("polyak_update", "target and online parameter sets differ"));
    }
    for ((_, t), (_, o)) in target.iter_mut().zip(online.iter()) {
        if tau == 1.0 {
            t.data_mut().copy_from_slice(o.data());
            continue;
        }
        for (tv, ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = (1.0 - tau) * *tv + tau * ov;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn single(name: &str, v: Vec<f64>) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::vector(v));
        p
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = single("w", vec![1.0, -2.0, 0.5]);
        let g = single("w", vec![0.3, -4.0, 1e-3]);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        let d = p.get("w").unwrap().data();
        let want = [1.0 - 3e-4, -2.0 + 3e-4, 0.5 - 3e-4];
        for (a, b) in d.iter().zip(want) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_is_exact_noop() {
        let mut p = single("w", vec![0.123, 4.5]);
        let before = p.clone();
        let g = p.zeros_like();
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn adam_rejects_bad_inputs() {
        let mut p = single("w", vec![1.0]);
        let mut st = AdamState::new(&p);
        let wrong = single("w", vec![1.0, 2.0]);
        assert!(adam_step(&mut p, &wrong, &mut st, &AdamConfig::default()).is_err());
        let nan = single("w", vec![f64::NAN]);
        assert!(adam_step(&mut p, &nan, &mut st, &AdamConfig::default()).is_err());
        assert_eq!(st.step, 0);
    }

    #[test]
    fn polyak_examples() {
        let online = single("w", vec![1.0, 1.0]);
        let mut target = single("w", vec![0.0, 0.0]);
        polyak_update(&mut target, &online, 0.005).unwrap();
        assert_eq!(target.get("w").unwrap().data(), &[0.005, 0.005]);

        let mut target = single("w", vec![-3.0, 7.0]);
        polyak_update(&mut target, &online, 1.0).unwrap();
        assert_eq!(target, online);

        let mut target = single("w", vec![0.0, 0.0]);
        for _ in 0..100 {
            polyak_update(&mut target, &online, 0.05).unwrap();
        }
        let gap = 1.0 - target.get("w").unwrap().data()[0];
        assert!((gap - 0.95f64.powi(100)).abs() < 1e-12);

        assert!(polyak_update(&mut target, &online, 0.0).is_err());
        assert!(polyak_update(&mut target, &single("v", vec![0.0, 0.0]), 0.5).is_err());
    }
}
