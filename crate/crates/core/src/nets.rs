//! MLPs (dense → layer norm → GELU) and diagonal-Gaussian primitives.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::kernels;
use crate::autodiff::{Bound, Graph, ParamSet, Tensor, Var};
use crate::error::{invalid, shape_err, Error, Result};

pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Shape of a GELU multilayer perceptron.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    /// Normalise each hidden pre-activation (with learned scale and shift).
    pub layer_norm: bool,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize, layer_norm: bool) -> Result<Self> {
        let cfg = Self { input_dim, hidden: hidden.to_vec(), output_dim, layer_norm };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(invalid("an MLP needs at least one hidden layer"));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(invalid(format!("MLP dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Multilayer perceptron whose parameters live in a separate [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub config: MlpConfig,
}

fn layer_names(i: usize) -> [String; 4] {
    [format!("h{i}/w"), format!("h{i}/b"), format!("h{i}/ln_scale"), format!("h{i}/ln_bias")]
}

impl Mlp {
    pub fn new(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// LeCun-normal weights, zero biases, unit layer-norm scales.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut p = ParamSet::new();
        let mut fan_in = self.config.input_dim;
        for (i, &h) in self.config.hidden.iter().enumerate() {
            let [w, b, s, sh] = layer_names(i);
            p.insert(w, lecun(fan_in, h, rng));
            p.insert(b, Tensor::zeros(&[h]));
            if self.config.layer_norm {
                p.insert(s, Tensor::filled(&[h], 1.0));
                p.insert(sh, Tensor::zeros(&[h]));
            }
            fan_in = h;
        }
        p.insert("out/w", lecun(fan_in, self.config.output_dim, rng));
        p.insert("out/b", Tensor::zeros(&[self.config.output_dim]));
        p
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return Err(shape_err(
                "mlp_forward",
                format!("expected [_, {}], got {shape:?}", self.config.input_dim),
            ));
        }
        Ok(())
    }

    /// Batched forward pass on the tape.
    pub fn forward(&self, g: &mut Graph, p: &Bound, input: Var) -> Result<Var> {
        self.check_input(g.value(input).shape())?;
        let mut x = input;
        for i in 0..self.config.hidden.len() {
            let [w, b, s, sh] = layer_names(i);
            x = g.matmul(x, p.var(&w))?;
            x = g.add_bias(x, p.var(&b))?;
            if self.config.layer_norm {
                x = g.layer_norm(x)?;
                x = g.mul_row(x, p.var(&s))?;
                x = g.add_bias(x, p.var(&sh))?;
            }
            x = g.gelu(x);
        }
        let x = g.matmul(x, p.var("out/w"))?;
        g.add_bias(x, p.var("out/b"))
    }

    /// Gradient-free forward pass; bit-identical to [`Mlp::forward`].
    pub fn apply(&self, p: &ParamSet, input: &Tensor) -> Result<Tensor> {
        self.check_input(input.shape())?;
        let get = |name: &str| p.get(name).ok_or_else(|| invalid(format!("missing parameter `{name}`")));
        let n = input.rows();
        let mut x = input.data().to_vec();
        let mut width = self.config.input_dim;
        for (i, &h) in self.config.hidden.iter().enumerate() {
            let [w, b, s, sh] = layer_names(i);
            let mut y = vec![0.0; n * h];
            kernels::matmul(n, width, h, &x, get(&w)?.data(), &mut y, false);
            add_row(&mut y, get(&b)?.data());
            if self.config.layer_norm {
                let mut z = vec![0.0; n * h];
                kernels::layer_norm_rows(&y, h, &mut z);
                mul_row(&mut z, get(&s)?.data());
                add_row(&mut z, get(&sh)?.data());
                y = z;
            }
            for v in &mut y {
                *v = kernels::gelu(*v);
            }
            x = y;
            width = h;
        }
        let m = self.config.output_dim;
        let mut out = vec![0.0; n * m];
        kernels::matmul(n, width, m, &x, get("out/w")?.data(), &mut out, false);
        add_row(&mut out, get("out/b")?.data());
        let t = Tensor::matrix(n, m, out)?;
        if !t.all_finite() {
            return Err(Error::NonFinite("mlp_forward".into()));
        }
        Ok(t)
    }
}

fn lecun<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let std = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("sized by construction")
}

fn add_row(x: &mut [f64], b: &[f64]) {
    for row in x.chunks_exact_mut(b.len()) {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn mul_row(x: &mut [f64], w: &[f64]) {
    for row in x.chunks_exact_mut(w.len()) {
        for (v, ww) in row.iter_mut().zip(w) {
            *v *= ww;
        }
    }
}

/// Diagonal Gaussian on the tape. `log_std` is already clamped.
#[derive(Debug, Clone, Copy)]
pub struct GaussianParams {
    pub mean: Var,
    pub log_std: Var,
}

impl GaussianParams {
    /// Split a `[n, 2d]` head into mean and clamped log-std.
    pub fn from_head(g: &mut Graph, head: Var, dim: usize) -> Result<Self> {
        let mean = g.slice_cols(head, 0, dim)?;
        let raw = g.slice_cols(head, dim, 2 * dim)?;
        let log_std = g.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
        Ok(Self { mean, log_std })
    }

    /// Mean with a fixed log-std (e.g. the unit-std policy).
    pub fn fixed_std(g: &mut Graph, mean: Var, log_std: f64) -> Self {
        let shape = g.value(mean).shape().to_vec();
        let log_std = g.constant(Tensor::filled(&shape, log_std));
        Self { mean, log_std }
    }
}

/// Reparameterised draw `mean + exp(log_std) ⊙ noise`.
pub fn gaussian_sample(g: &mut Graph, gp: &GaussianParams, noise: &Tensor) -> Result<Var> {
    if g.value(gp.mean).shape() != noise.shape() {
        return Err(shape_err(
            "gaussian_sample",
            format!("noise {:?} vs mean {:?}", noise.shape(), g.value(gp.mean).shape()),
        ));
    }
    let eps = g.constant(noise.clone());
    let std = g.exp(gp.log_std);
    let scaled = g.mul(std, eps)?;
    g.add(gp.mean, scaled)
}

/// Per-row diagonal-Gaussian log density, `[n, 1]`.
pub fn gaussian_log_prob(g: &mut Graph, gp: &GaussianParams, x: Var) -> Result<Var> {
    let mshape = g.value(gp.mean).shape().to_vec();
    if g.value(x).shape() != mshape.as_slice() {
        return Err(shape_err("gaussian_log_prob", format!("{:?} vs {mshape:?}", g.value(x).shape())));
    }
    let diff = g.sub(x, gp.mean)?;
    let neg_ls = g.scale(gp.log_std, -1.0);
    let inv_std = g.exp(neg_ls);
    let z = g.mul(diff, inv_std)?;
    let z2 = g.square(z);
    let half = g.scale(z2, -0.5);
    let t = g.sub(half, gp.log_std)?;
    let t = g.add_scalar(t, -HALF_LN_2PI);
    g.sum_cols(t)
}

/// Per-row `KL(N(mean, σ²) ‖ N(0, I))`, `[n, 1]`.
pub fn kl_to_standard_normal(g: &mut Graph, gp: &GaussianParams) -> Result<Var> {
    let m2 = g.square(gp.mean);
    let two_ls = g.scale(gp.log_std, 2.0);
    let var = g.exp(two_ls);
    let s = g.add(m2, var)?;
    let s = g.sub(s, two_ls)?;
    let s = g.add_scalar(s, -1.0);
    let s = g.scale(s, 0.5);
    g.sum_cols(s)
}

/// Diagonal-Gaussian action distribution with unit standard deviation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyModel {
    pub mlp: Mlp,
}

impl PolicyModel {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize]) -> Result<Self> {
        Ok(Self { mlp: Mlp::new(MlpConfig::new(state_dim, hidden, action_dim, true)?)? })
    }

    pub fn action_dim(&self) -> usize {
        self.mlp.config.output_dim
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        self.mlp.init(rng)
    }

    /// Distribution over actions for a batch of states.
    pub fn dist(&self, g: &mut Graph, p: &Bound, states: Var) -> Result<GaussianParams> {
        let mean = self.mlp.forward(g, p, states)?;
        Ok(GaussianParams::fixed_std(g, mean, 0.0))
    }

    /// Deterministic action (the mean).
    pub fn mean_action(&self, p: &ParamSet, states: &Tensor) -> Result<Tensor> {
        self.mlp.apply(p, states)
    }

    /// Behavioural-cloning loss `−E[log π(a|s)]`.
    pub fn bc_loss(&self, g: &mut Graph, p: &Bound, states: &Tensor, actions: &Tensor) -> Result<Var> {
        let s = g.constant(states.clone());
        let a = g.constant(actions.clone());
        let dist = self.dist(g, p, s)?;
        let lp = gaussian_log_prob(g, &dist, a)?;
        let m = g.mean(lp);
        Ok(g.scale(m, -1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::rng::{stream_rng, Stream};
    use proptest::prelude::*;

    fn identity(n: usize) -> Tensor {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n + i] = 1.0;
        }
        Tensor::matrix(n, n, d).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(MlpConfig::new(3, &[], 2, true).is_err());
        assert!(MlpConfig::new(0, &[4], 2, true).is_err());
        assert!(MlpConfig::new(3, &[4, 0], 2, true).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mlp = Mlp::new(MlpConfig::new(3, &[8, 8], 2, true).unwrap()).unwrap();
        let mut p = mlp.init(&mut stream_rng(0, Stream::Init, 0));
        for (_, t) in p.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let x = Tensor::randn(&[5, 3], &mut stream_rng(0, Stream::Data, 0));
        let y = mlp.apply(&p, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_reproduces_gelu() {
        let mlp = Mlp::new(MlpConfig::new(3, &[3], 3, false).unwrap()).unwrap();
        let mut p = ParamSet::new();
        p.insert("h0/w", identity(3));
        p.insert("h0/b", Tensor::zeros(&[3]));
        p.insert("out/w", identity(3));
        p.insert("out/b", Tensor::zeros(&[3]));
        let x = Tensor::matrix(2, 3, vec![-1.0, 0.0, 0.5, 2.0, -0.3, 1.2]).unwrap();
        let y = mlp.apply(&p, &x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, kernels::gelu(*b));
        }
        // 0.5·x·(1 + tanh(√(2/π)(x + 0.044715x³))) at x = 2
        let reference = 0.5 * 2.0 * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (2.0 + 0.044715 * 8.0)).tanh());
        assert!((y.data()[3] - reference).abs() < 1e-14);
    }

    #[test]
    fn tape_and_inference_paths_agree_bitwise() {
        let mlp = Mlp::new(MlpConfig::new(4, &[16, 16], 3, true).unwrap()).unwrap();
        let p = mlp.init(&mut stream_rng(1, Stream::Init, 0));
        let x = Tensor::randn(&[7, 4], &mut stream_rng(1, Stream::Data, 0));
        let mut g = Graph::new();
        let b = g.bind(&p);
        let xin = g.constant(x.clone());
        let y = mlp.forward(&mut g, &b, xin).unwrap();
        assert_eq!(g.value(y), &mlp.apply(&p, &x).unwrap());
        assert_eq!(mlp.apply(&p, &x).unwrap(), mlp.apply(&p, &x).unwrap());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mlp = Mlp::new(MlpConfig::new(4, &[8], 2, true).unwrap()).unwrap();
        let p = mlp.init(&mut stream_rng(0, Stream::Init, 0));
        assert!(mlp.apply(&p, &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn layer_norm_ignores_constant_shift() {
        let mlp = Mlp::new(MlpConfig::new(3, &[6], 2, true).unwrap()).unwrap();
        let p = mlp.init(&mut stream_rng(2, Stream::Init, 0));
        let mut shifted = p.clone();
        for v in shifted.get_mut("h0/b").unwrap().data_mut() {
            *v += 3.75;
        }
        let x = Tensor::randn(&[4, 3], &mut stream_rng(2, Stream::Data, 0));
        let a = mlp.apply(&p, &x).unwrap();
        let b = mlp.apply(&shifted, &x).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    fn gaussian_from(g: &mut Graph, mean: Vec<f64>, log_std: Vec<f64>) -> GaussianParams {
        let n = mean.len();
        let m = g.leaf(Tensor::matrix(1, n, mean).unwrap());
        let l = g.leaf(Tensor::matrix(1, n, log_std).unwrap());
        GaussianParams { mean: m, log_std: l }
    }

    #[test]
    fn sample_examples() {
        let mut g = Graph::new();
        let gp = gaussian_from(&mut g, vec![1.0, -2.0], vec![0.3, -0.7]);
        let s = gaussian_sample(&mut g, &gp, &Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, -2.0]);
        let gp = gaussian_from(&mut g, vec![1.0, -2.0], vec![0.0, 0.0]);
        let s = gaussian_sample(&mut g, &gp, &Tensor::matrix(1, 2, vec![0.5, 0.25]).unwrap()).unwrap();
        assert_eq!(g.value(s).data(), &[1.5, -1.75]);
        assert!(gaussian_sample(&mut g, &gp, &Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn sample_jacobian_wrt_mean_is_identity() {
        let mut ps = ParamSet::new();
        ps.insert("mean", Tensor::matrix(1, 3, vec![0.2, -0.4, 1.0]).unwrap());
        ps.insert("log_std", Tensor::matrix(1, 3, vec![0.1, -0.3, 0.5]).unwrap());
        let noise = Tensor::matrix(1, 3, vec![0.7, -1.1, 0.2]).unwrap();
        for j in 0..3 {
            let mut g = Graph::new();
            let b = g.bind(&ps);
            let gp = GaussianParams { mean: b.var("mean"), log_std: b.var("log_std") };
            let s = gaussian_sample(&mut g, &gp, &noise).unwrap();
            let sj = g.slice_cols(s, j, j + 1).unwrap();
            let l = g.sum(sj);
            let grads = g.grads(l, &b).unwrap();
            let row = grads.get("mean").unwrap().data().to_vec();
            for (k, v) in row.iter().enumerate() {
                assert_eq!(*v, if k == j { 1.0 } else { 0.0 });
            }
        }
        let r = finite_difference_check(
            |g, b| {
                let gp = GaussianParams { mean: b.var("mean"), log_std: b.var("log_std") };
                let s = gaussian_sample(g, &gp, &noise)?;
                let sq = g.square(s);
                Ok(g.sum(sq))
            },
            &ps,
            1e-5,
            100,
            0,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn log_prob_examples() {
        let mut g = Graph::new();
        let gp = gaussian_from(&mut g, vec![0.0], vec![0.0]);
        let x = g.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let lp = gaussian_log_prob(&mut g, &gp, x).unwrap();
        assert!((g.value(lp).item() + 0.9189385332046727).abs() < 1e-12);

        let ls = vec![0.4f64, -1.3, 0.0];
        let gp = gaussian_from(&mut g, vec![1.0, 2.0, 3.0], ls.clone());
        let x = g.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let lp = gaussian_log_prob(&mut g, &gp, x).unwrap();
        let want: f64 = -ls.iter().map(|l| l + 0.5 * (2.0 * std::f64::consts::PI).ln()).sum::<f64>();
        assert!((g.value(lp).item() - want).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let cases = [(0.0, 0.0, 0.0), (1.0, 0.0, 0.5), (0.0, 2f64.ln(), 1.5 - 2f64.ln())];
        for (m, ls, want) in cases {
            let mut g = Graph::new();
            let gp = gaussian_from(&mut g, vec![m], vec![ls]);
            let kl = kl_to_standard_normal(&mut g, &gp).unwrap();
            assert!((g.value(kl).item() - want).abs() < 1e-12, "{m} {ls}");
        }
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(mean in proptest::collection::vec(-5.0f64..5.0, 3), ls in proptest::collection::vec(-5.0f64..2.0, 3)) {
            let mut g = Graph::new();
            let zero = mean.iter().all(|&m| m == 0.0) && ls.iter().all(|&l| l == 0.0);
            let gp = gaussian_from(&mut g, mean, ls);
            let klv = kl_to_standard_normal(&mut g, &gp).unwrap();
            let kl = g.value(klv).item();
            prop_assert!(kl >= -1e-12);
            if !zero {
                prop_assert!(kl > 0.0);
            }
        }

        #[test]
        fn log_prob_translation_invariant(x in proptest::collection::vec(-3.0f64..3.0, 2), shift in proptest::collection::vec(-3.0f64..3.0, 2)) {
            let mean = vec![0.3, -0.2];
            let ls = vec![0.1, -0.4];
            let eval = |xs: Vec<f64>, ms: Vec<f64>| {
                let mut g = Graph::new();
                let gp = gaussian_from(&mut g, ms, ls.clone());
                let xv = g.constant(Tensor::matrix(1, 2, xs).unwrap());
                let lp = gaussian_log_prob(&mut g, &gp, xv).unwrap();
                g.value(lp).item()
            };
            let base = eval(x.clone(), mean.clone());
            let moved = eval(
                x.iter().zip(&shift).map(|(a, b)| a + b).collect(),
                mean.iter().zip(&shift).map(|(a, b)| a + b).collect(),
            );
            prop_assert!((base - moved).abs() < 1e-9);
        }
    }
}
