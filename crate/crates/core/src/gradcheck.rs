//! Central finite-difference checks of every differentiable primitive and of
//! the two model families end to end.
//!
//! Each check contracts the output with a fixed random probe tensor `r`,
//! `L = Σ r ⊙ f(inputs)`, and compares the tape gradient of `L` against
//! `(L(x + h) − L(x − h)) / 2h` for every input entry. The reported error is
//! `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over all inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Fault, Tape, Var};
use crate::error::Result;
use crate::model::{build_model, multi_head_self_attention, Family, ModelConfig};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-6;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_POINTS: usize = 100;
const MODEL_POINTS: usize = 2;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync>;

type Inputs = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor> + Send + Sync>;

struct Case {
    name: &'static str,
    tolerance: f64,
    points: usize,
    /// Draws the inputs of one check point.
    inputs: Inputs,
    build: Build,
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub worst_rel_err: f64,
    pub points: usize,
    pub tolerance: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.worst_rel_err <= self.tolerance
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Only run cases whose name is listed; empty runs everything.
    pub ops: Vec<String>,
    pub points: usize,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { ops: Vec::new(), points: DEFAULT_POINTS, seed: 0, fault: None }
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

fn tape_for(fault: Option<Fault>) -> Tape {
    match fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    }
}

/// Relative error between tape and finite-difference gradients of
/// `Σ probe ⊙ build(inputs)` with respect to all `inputs`.
pub fn check_point(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    rng: &mut ChaCha8Rng,
    fault: Option<Fault>,
) -> Result<f64> {
    let mut tape = tape_for(fault);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let out_shape = tape.value(out).shape().to_vec();
    let probe = gaussian(&out_shape, rng);
    let pv = tape.constant(probe.clone());
    let prod = tape.mul(out, pv)?;
    let loss = tape.sum(prod);
    tape.backward(loss)?;
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|&v| tape.grad(v).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = build(&mut t, &vs)?;
        Ok(t.value(o).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for j in 0..xs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + STEP;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = orig - STEP;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = StandardNormal.sample(rng);
    }
    t
}

fn gaussians(shapes: &'static [&'static [usize]]) -> Inputs {
    Box::new(move |rng| shapes.iter().map(|s| gaussian(s, rng)).collect())
}

fn primitive(
    name: &'static str,
    shapes: &'static [&'static [usize]],
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync + 'static,
) -> Case {
    Case {
        name,
        tolerance: PRIMITIVE_TOLERANCE,
        points: DEFAULT_POINTS,
        inputs: gaussians(shapes),
        build: Box::new(build),
    }
}

fn cases() -> Vec<Case> {
    let mut cases = vec![
        primitive("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1])),
        primitive("matmul_batched", &[&[2, 3, 4], &[2, 4, 2]], |t, v| t.matmul(v[0], v[1])),
        primitive("add", &[&[2, 3, 4], &[4]], |t, v| t.add(v[0], v[1])),
        primitive("mul", &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1])),
        primitive("scale", &[&[3, 4]], |t, v| Ok(t.scale(v[0], -1.7))),
        primitive("gelu", &[&[5, 4]], |t, v| Ok(t.gelu(v[0]))),
        primitive("layernorm", &[&[3, 6], &[6], &[6]], |t, v| t.layernorm(v[0], v[1], v[2], 1e-5)),
        primitive("softmax", &[&[3, 5]], |t, v| t.softmax(v[0])),
        primitive("depthwise_conv2d", &[&[2, 3, 5, 5], &[3, 3, 3]], |t, v| t.depthwise_conv2d(v[0], v[1])),
        primitive("cross_entropy", &[&[4, 5]], |t, v| t.cross_entropy(v[0], &[0, 3, 4, 3])),
        primitive("mean_tokens", &[&[2, 4, 3]], |t, v| t.mean_tokens(v[0])),
        primitive("sum", &[&[3, 4]], |t, v| Ok(t.sum(v[0]))),
        primitive("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4])),
        primitive("transpose", &[&[2, 3, 4]], |t, v| t.transpose(v[0], 1, 2)),
        primitive("patchify", &[&[2, 3, 4, 4]], |t, v| t.patchify(v[0], 2)),
        primitive("linear", &[&[2, 3, 4], &[5, 4], &[5]], |t, v| t.linear(v[0], v[1], Some(v[2]))),
        primitive("attention", &[&[2, 3, 4], &[4, 4], &[4, 4], &[4, 4], &[4, 4]], |t, v| {
            multi_head_self_attention(t, v[0], [v[1], v[2], v[3], v[4]], 2)
        }),
    ];
    cases.push(model_case("model_convnext", Family::Convnext));
    cases.push(model_case("model_vit", Family::Vit));
    cases
}

/// Small 2-block model on a 2-sample batch. All parameters are redrawn
/// from N(0, 0.5²) so the zero-initialized head does not mask any path.
fn model_config(family: Family) -> ModelConfig {
    let mut cfg = ModelConfig {
        embed_dim: 8,
        depth: 2,
        image_size: 8,
        num_classes: 5,
        ..if family == Family::Convnext { ModelConfig::convnext(8) } else { ModelConfig::vit(8) }
    };
    cfg.heads = 2;
    cfg.init.learnable_scalar_bias = family == Family::Convnext;
    cfg
}

fn model_case(name: &'static str, family: Family) -> Case {
    let cfg = model_config(family);
    let template = build_model(&cfg).expect("valid gradcheck config");
    let shapes: Vec<Vec<usize>> = template.params().iter().map(|p| p.value.shape().to_vec()).collect();
    let img = vec![2, cfg.in_channels, cfg.image_size, cfg.image_size];
    let inputs = move |rng: &mut ChaCha8Rng| {
        let mut xs: Vec<Tensor> = shapes.iter().map(|s| gaussian(s, rng).map(|v| 0.5 * v)).collect();
        xs.push(gaussian(&img, rng));
        xs
    };
    let build = move |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let (params, images) = vars.split_at(vars.len() - 1);
        let logits = template.forward_bound(tape, params, images[0])?;
        tape.cross_entropy(logits, &[1, 3])
    };
    Case { name, tolerance: MODEL_TOLERANCE, points: MODEL_POINTS, inputs: Box::new(inputs), build: Box::new(build) }
}

/// Runs the suite; one result per selected case.
pub fn run_suite(opts: &GradcheckOptions) -> Result<Vec<CaseResult>> {
    let mut results = Vec::new();
    for case in cases() {
        if !opts.ops.is_empty() && !opts.ops.iter().any(|o| o == case.name) {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let points = if case.points == DEFAULT_POINTS { opts.points } else { case.points };
        let mut worst = 0.0f64;
        for _ in 0..points {
            let xs = (case.inputs)(&mut rng);
            let err = check_point(&xs, &case.build, &mut rng, opts.fault)?;
            worst = worst.max(err);
        }
        results.push(CaseResult {
            name: case.name.to_string(),
            worst_rel_err: worst,
            points,
            tolerance: case.tolerance,
        });
    }
    Ok(results)
}

pub fn case_names() -> Vec<&'static str> {
    cases().into_iter().map(|c| c.name).collect()
}
