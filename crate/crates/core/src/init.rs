//! Weight initialization schemes.
//!
//! Base draws (Kaiming uniform or truncated normal) fill every weight. MLP
//! first-layer weights `W1 ∈ R^{p×n}` can then be mean-shifted:
//!
//! * constant: `W1' = W1 + b·1_p·1_nᵀ`, every entry moves by the scalar `b`;
//! * rowvec: `W1' = W1 + 1_p·b_nᵀ` with `b_n ~ N(0, sigma_b²·I_n)`, every row
//!   receives the same offset vector so column `j` shifts by `b_n[j]`.
//!
//! The optional anticorrelated variant replaces `W1` by `½(W1 − W2ᵀ)`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Role, TinyModel};
use crate::seed;
use crate::tensor::Tensor;

/// Distribution used for every weight before any mean shift.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseInit {
    /// `U(-bound, bound)` with `bound = gain·√3/√fan_in`. The default gain
    /// `√(1/3)` matches PyTorch's default for linear layers, so
    /// `bound = 1/√fan_in`.
    KaimingUniform {
        #[serde(default = "default_gain")]
        gain: f64,
    },
    /// `N(0, std²)` truncated at ±2 std.
    TruncNormal {
        #[serde(default = "default_trunc_std")]
        std: f64,
    },
}

fn default_gain() -> f64 {
    (1.0f64 / 3.0).sqrt()
}

fn default_trunc_std() -> f64 {
    0.02
}

impl Default for BaseInit {
    fn default() -> Self {
        BaseInit::KaimingUniform { gain: default_gain() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MlpMeanMode {
    #[default]
    None,
    Constant {
        b: f64,
    },
    Rowvec {
        sigma_b: f64,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LinearBiasInit {
    #[default]
    Zero,
    Constant {
        c: f64,
    },
}

/// Declarative initialization recipe for a whole model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSpec {
    pub base: BaseInit,
    pub mlp_mean: MlpMeanMode,
    pub anticorrelate_w1_w2: bool,
    /// Initial value of every MLP first-layer bias `b1`.
    pub linear_bias_init: LinearBiasInit,
    /// Adds a trainable scalar `s` per block with `W1_eff = W1 + s·1_p·1_nᵀ`.
    pub learnable_scalar_bias: bool,
    pub scalar_bias_init: f64,
    /// Seed of the mean-shift offset stream; defaults to the model seed.
    pub rng_seed: Option<u64>,
}

impl InitSpec {
    pub fn validate(&self) -> Result<()> {
        match self.mlp_mean {
            MlpMeanMode::Constant { b } if !b.is_finite() => {
                return Err(Error::Config(format!("constant mean b must be finite, got {b}")))
            }
            MlpMeanMode::Rowvec { sigma_b } if !(sigma_b.is_finite() && sigma_b >= 0.0) => {
                return Err(Error::Config(format!("sigma_b must be finite and >= 0, got {sigma_b}")))
            }
            _ => {}
        }
        match self.base {
            BaseInit::KaimingUniform { gain } if !(gain.is_finite() && gain > 0.0) => {
                Err(Error::Config(format!("kaiming gain must be positive, got {gain}")))
            }
            BaseInit::TruncNormal { std } if !(std.is_finite() && std > 0.0) => {
                Err(Error::Config(format!("trunc_normal std must be positive, got {std}")))
            }
            _ => Ok(()),
        }
    }

    /// Applies a command-line init mode (`none`, `constant:B`, `rowvec:S`,
    /// `anticorr`) on top of this spec.
    pub fn with_mode(&self, mode: &str) -> Result<InitSpec> {
        let mut spec = self.clone();
        let bad = || Error::Config(format!("unknown init mode '{mode}' (none|constant:B|rowvec:S|anticorr)"));
        let parse = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
        match mode.split_once(':') {
            None if mode == "none" => {
                spec.mlp_mean = MlpMeanMode::None;
                spec.anticorrelate_w1_w2 = false;
            }
            None if mode == "anticorr" => {
                spec.mlp_mean = MlpMeanMode::None;
                spec.anticorrelate_w1_w2 = true;
            }
            Some(("constant", v)) => spec.mlp_mean = MlpMeanMode::Constant { b: parse(v)? },
            Some(("rowvec", v)) => spec.mlp_mean = MlpMeanMode::Rowvec { sigma_b: parse(v)? },
            _ => return Err(bad()),
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Half-width of the Kaiming uniform interval.
pub fn kaiming_bound(fan_in: usize, gain: f64) -> f64 {
    gain * 3f64.sqrt() / (fan_in as f64).sqrt()
}

/// Input fan of a weight: the product of all axes but the first
/// (`[out, in]` gives `in`, depthwise `[c, f, f]` gives `f²`).
pub fn fan_in(shape: &[usize]) -> usize {
    shape.iter().skip(1).product::<usize>().max(1)
}

pub fn base_init<R: Rng>(shape: &[usize], base: &BaseInit, rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(shape);
    match *base {
        BaseInit::KaimingUniform { gain } => {
            let bound = kaiming_bound(fan_in(shape), gain);
            for v in t.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        BaseInit::TruncNormal { std } => {
            for v in t.data_mut() {
                *v = loop {
                    let z: f64 = StandardNormal.sample(rng);
                    if z.abs() <= 2.0 {
                        break z * std;
                    }
                };
            }
        }
    }
    t
}

/// `W1 + b·1_p·1_nᵀ`.
pub fn apply_constant_mean(w1: &Tensor, b: f64) -> Tensor {
    w1.map(|v| v + b)
}

/// `W1 + 1_p·b_nᵀ` for a given offset vector `b_n` of length `n`.
pub fn apply_row_offsets(w1: &Tensor, offsets: &[f64]) -> Result<Tensor> {
    let shape = w1.shape();
    if shape.len() != 2 || shape[1] != offsets.len() {
        return Err(Error::Shape(format!("row offsets of length {} do not fit W1 {shape:?}", offsets.len())));
    }
    let mut out = w1.clone();
    for row in out.data_mut().chunks_mut(offsets.len()) {
        row.iter_mut().zip(offsets).for_each(|(w, b)| *w += b);
    }
    Ok(out)
}

/// Draws `b_n ~ N(0, sigma_b²·I_n)` and returns `(W1 + 1_p·b_nᵀ, b_n)`.
pub fn apply_rowvec_mean<R: Rng>(w1: &Tensor, sigma_b: f64, rng: &mut R) -> Result<(Tensor, Vec<f64>)> {
    if w1.rank() != 2 {
        return Err(Error::Shape(format!("W1 must be a matrix, got {:?}", w1.shape())));
    }
    let n = w1.shape()[1];
    let offsets: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * sigma_b
        })
        .collect();
    Ok((apply_row_offsets(w1, &offsets)?, offsets))
}

/// `½(W1 − W2ᵀ)`; `W2` is left unchanged.
pub fn apply_anticorrelated(w1: &Tensor, w2: &Tensor) -> Result<Tensor> {
    let (s1, s2) = (w1.shape(), w2.shape());
    if s1.len() != 2 || s2.len() != 2 || s1[0] != s2[1] || s1[1] != s2[0] {
        return Err(Error::Shape(format!("W1 {s1:?} and W2 {s2:?} are not mutually transposed")));
    }
    let w2t = w2.t()?;
    let data = w1.data().iter().zip(w2t.data()).map(|(a, b)| 0.5 * (a - b)).collect();
    Tensor::new(s1.to_vec(), data)
}

/// Initializes every parameter of `model` according to `spec`.
///
/// Base draws come from the `init` stream of `model_seed` in registry order,
/// so they are identical for any choice of mean mode. Order of the remaining
/// steps: anticorrelation, then mean shift (the shift is therefore exact).
pub fn initialize_model(model: &mut TinyModel, spec: &InitSpec, model_seed: u64) -> Result<()> {
    spec.validate()?;
    let mut rng = seed::stream(model_seed, seed::INIT);
    for p in model.params_mut() {
        p.value = match p.role {
            Role::Weight | Role::MlpW1 | Role::MlpW2 | Role::ConvKernel => {
                base_init(p.value.shape(), &spec.base, &mut rng)
            }
            Role::NormGamma => Tensor::ones(p.value.shape()),
            Role::MlpB1 => match spec.linear_bias_init {
                LinearBiasInit::Zero => Tensor::zeros(p.value.shape()),
                LinearBiasInit::Constant { c } => Tensor::full(p.value.shape(), c),
            },
            Role::ScalarBias => Tensor::full(p.value.shape(), spec.scalar_bias_init),
            Role::Bias | Role::NormBeta | Role::PosEmbed | Role::Head => Tensor::zeros(p.value.shape()),
        };
    }

    let mut offset_rng = seed::stream(spec.rng_seed.unwrap_or(model_seed), seed::MLP_MEAN);
    for layer in 0..model.config().depth {
        let (w1_name, w2_name) = (TinyModel::w1_name(layer), TinyModel::w2_name(layer));
        let mut w1 = model.param(&w1_name)?.clone();
        if spec.anticorrelate_w1_w2 {
            w1 = apply_anticorrelated(&w1, model.param(&w2_name)?)?;
        }
        w1 = match spec.mlp_mean {
            MlpMeanMode::None => w1,
            MlpMeanMode::Constant { b } => apply_constant_mean(&w1, b),
            MlpMeanMode::Rowvec { sigma_b } => apply_rowvec_mean(&w1, sigma_b, &mut offset_rng)?.0,
        };
        *model.param_mut(&w1_name)? = w1;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    #[test]
    fn kaiming_bound_and_mean() {
        let base = BaseInit::default();
        // PyTorch linear default: bound = 1/sqrt(fan_in)
        assert!((kaiming_bound(16, default_gain()) - 0.25).abs() < 1e-15);
        let t = base_init(&[32, 16], &base, &mut rng(1));
        assert!(t.data().iter().all(|v| v.abs() <= 0.25));

        // mean over 1e5 draws within 3 standard errors; U(-a,a) has sd a/sqrt(3)
        let big = base_init(&[1000, 100], &BaseInit::KaimingUniform { gain: default_gain() }, &mut rng(2));
        let a = kaiming_bound(100, default_gain());
        let se = a / 3f64.sqrt() / (1e5f64).sqrt();
        assert!(big.mean().abs() < 3.0 * se, "{} vs {}", big.mean(), se);
    }

    #[test]
    fn trunc_normal_bounds_and_determinism() {
        let base = BaseInit::TruncNormal { std: 0.02 };
        let t = base_init(&[64, 64], &base, &mut rng(3));
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        assert_eq!(t, base_init(&[64, 64], &base, &mut rng(3)));
    }

    #[test]
    fn constant_mean_examples() {
        let z = Tensor::zeros(&[2, 3]);
        assert!(apply_constant_mean(&z, 0.02).data().iter().all(|&v| v == 0.02));
        let w = base_init(&[32, 16], &BaseInit::default(), &mut rng(4));
        assert_eq!(apply_constant_mean(&w, 0.0), w);
        let shifted = apply_constant_mean(&w, 0.05);
        assert!((shifted.mean() - w.mean() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn rowvec_mean_examples() {
        let w = base_init(&[8, 4], &BaseInit::default(), &mut rng(5));
        let (same, _) = apply_rowvec_mean(&w, 0.0, &mut rng(6)).unwrap();
        assert_eq!(same, w);

        let out = apply_row_offsets(&Tensor::zeros(&[3, 2]), &[0.1, -0.1]).unwrap();
        assert_eq!(out.data(), &[0.1, -0.1, 0.1, -0.1, 0.1, -0.1]);

        let (shifted, b_n) = apply_rowvec_mean(&w, 0.3, &mut rng(7)).unwrap();
        for (j, &bj) in b_n.iter().enumerate() {
            let col_mean = (0..8).map(|i| shifted.at(&[i, j]) - w.at(&[i, j])).sum::<f64>() / 8.0;
            assert!((col_mean - bj).abs() < 1e-15);
        }
    }

    #[test]
    fn anticorrelated_examples() {
        let w1 = base_init(&[6, 3], &BaseInit::default(), &mut rng(8));
        let zero = apply_anticorrelated(&w1, &w1.t().unwrap()).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let half = apply_anticorrelated(&w1, &Tensor::zeros(&[3, 6])).unwrap();
        assert_eq!(half, w1.map(|v| 0.5 * v));
        assert!(apply_anticorrelated(&w1, &w1).is_err());
    }

    #[test]
    fn anticorrelated_population_correlation() {
        // Monte Carlo over 1e3 independent base draws. For iid equal-variance
        // bases, corr(½(W1 − W2ᵀ), W2ᵀ) = −1/√2.
        let base = BaseInit::TruncNormal { std: 1.0 };
        let mut r = rng(9);
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for _ in 0..1000 {
            let w1 = base_init(&[4, 2], &base, &mut r);
            let w2 = base_init(&[2, 4], &base, &mut r);
            let out = apply_anticorrelated(&w1, &w2).unwrap();
            xs.push(out.at(&[1, 0]));
            ys.push(w2.at(&[0, 1]));
        }
        let corr = pearson(&xs, &ys);
        assert!(corr < 0.0);
        assert!((corr + 1.0 / 2f64.sqrt()).abs() < 0.1, "corr {corr}");
    }

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        sxy / (sxx * syy).sqrt()
    }

    #[test]
    fn mode_parsing() {
        let s = InitSpec::default();
        assert_eq!(s.with_mode("constant:0.02").unwrap().mlp_mean, MlpMeanMode::Constant { b: 0.02 });
        assert_eq!(s.with_mode("rowvec:0.1").unwrap().mlp_mean, MlpMeanMode::Rowvec { sigma_b: 0.1 });
        assert!(s.with_mode("anticorr").unwrap().anticorrelate_w1_w2);
        assert!(s.with_mode("rowvec:-1").is_err());
        assert!(s.with_mode("bogus").is_err());
    }
}
