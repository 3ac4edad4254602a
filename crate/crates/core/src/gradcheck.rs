//! Central finite-difference verification of tape gradients.
//!
//! The oracle here only ever calls forward ops; it never touches
//! [`Tape::backward`] output when forming its estimate.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{Model, ModelConfig, ModelKind};
use crate::params::Bound;
use crate::sinr::{fourier_features, make_coords};
use crate::tensor::{InterpPlan, Tape, Tensor, Var};
use crate::training::l1_loss;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Floor added to the finite-difference magnitude in the relative error.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel_error: f64,
    pub entries_checked: usize,
}

/// Options for [`check`].
#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub step: f64,
    /// Upper bound on entries probed per input tensor (all when `None`).
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: DEFAULT_STEP,
            max_entries: None,
            seed: 0,
        }
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + REL_FLOOR)
}

/// Checks the gradient of `sum(w * build(inputs))` with respect to every
/// input, where `w` is a fixed random weighting of the output.
pub fn check<F>(name: &str, inputs: &[Tensor], build: F, opts: &CheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut weights: Option<Tensor> = None;

    let mut objective = |inputs: &[Tensor], tape: &mut Tape| -> Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(tape, &vars)?;
        let w = weights
            .get_or_insert_with(|| {
                let shape = tape.shape(out).to_vec();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
                Tensor::from_parts(shape, data)
            })
            .clone();
        let w = tape.constant(w);
        let weighted = tape.mul(out, w)?;
        Ok((tape.sum(weighted)?, vars))
    };

    let mut tape = Tape::new();
    let (root, vars) = objective(inputs, &mut tape)?;
    let grads = tape.backward(root)?;

    let mut pick_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for (i, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < input.len() => sample(&mut pick_rng, input.len(), k).into_vec(),
            _ => (0..input.len()).collect(),
        };
        for j in entries {
            let mut probe = inputs.to_vec();
            let base = probe[i].data()[j];
            probe[i].data_mut()[j] = base + opts.step;
            let plus = eval(&mut objective, &probe)?;
            probe[i].data_mut()[j] = base - opts.step;
            let minus = eval(&mut objective, &probe)?;
            let numeric = (plus - minus) / (2.0 * opts.step);
            max_rel = max_rel.max(rel_error(analytic.data()[j], numeric));
            checked += 1;
        }
    }
    Ok(GradReport {
        name: name.to_string(),
        max_rel_error: max_rel,
        entries_checked: checked,
    })
}

fn eval<F>(objective: &mut F, inputs: &[Tensor]) -> Result<f64>
where
    F: FnMut(&[Tensor], &mut Tape) -> Result<(Var, Vec<Var>)>,
{
    let mut tape = Tape::new();
    let (root, _) = objective(inputs, &mut tape)?;
    Ok(tape.value(root).item())
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Builds the checked expression from tape handles of the case inputs.
pub type BuildFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync>;

/// One differentiable operation together with input shapes to probe it on.
pub struct Case {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: BuildFn,
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync + 'static,
) -> Case {
    Case {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
    }
}

/// Every differentiable tape operation, plus the L1 loss and the Fourier
/// encoding built from them.
pub fn op_cases() -> Vec<Case> {
    vec![
        case("add", &[&[3, 2], &[2]], |t, v| t.add(v[0], v[1])),
        case("sub", &[&[3, 2], &[3, 2]], |t, v| t.sub(v[0], v[1])),
        case("mul", &[&[2, 3], &[3]], |t, v| t.mul(v[0], v[1])),
        case("div", &[&[2, 3], &[3]], |t, v| {
            let shifted = t.add_scalar(v[1], 3.0)?;
            t.div(v[0], shifted)
        }),
        case("add_scalar", &[&[4]], |t, v| t.add_scalar(v[0], -0.7)),
        case("mul_scalar", &[&[4]], |t, v| t.mul_scalar(v[0], 2.5)),
        case("scale_by", &[&[4], &[1]], |t, v| t.scale_by(v[0], v[1])),
        case("exp", &[&[5]], |t, v| t.exp(v[0])),
        case("sin", &[&[5]], |t, v| t.sin(v[0])),
        case("cos", &[&[5]], |t, v| t.cos(v[0])),
        case("abs", &[&[6]], |t, v| t.abs(v[0])),
        case("relu", &[&[6]], |t, v| t.relu(v[0])),
        case("sum", &[&[2, 3]], |t, v| t.sum(v[0])),
        case("mean", &[&[6]], |t, v| t.mean(v[0])),
        case("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1])),
        case("linear", &[&[2, 2, 3], &[3, 4], &[4]], |t, v| t.linear(v[0], v[1], v[2])),
        case("softmax", &[&[3, 4]], |t, v| t.softmax(v[0], 1)),
        case("softmax_axis0", &[&[3, 4]], |t, v| t.softmax(v[0], 0)),
        case("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4])),
        case("permute", &[&[2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1])),
        case("transpose", &[&[2, 3]], |t, v| t.transpose(v[0])),
        case("broadcast_to", &[&[3]], |t, v| t.broadcast_to(v[0], &[2, 2, 3])),
        case("concat", &[&[2, 1, 3], &[2, 2, 3]], |t, v| t.concat(&[v[0], v[1]], 1)),
        case("index_select", &[&[2, 4, 2]], |t, v| t.index_select(v[0], 1, &[3, 0, 3])),
        case("conv_spatial", &[&[4, 4, 2, 2], &[3, 3, 2, 2], &[2]], |t, v| {
            t.conv_spatial(v[0], v[1], v[2])
        }),
        case("conv_spectral3", &[&[2, 3, 4, 2], &[3, 2, 3], &[3]], |t, v| {
            t.conv_spectral3(v[0], v[1], v[2])
        }),
        case("avg_pool_spatial", &[&[3, 2, 2, 2]], |t, v| t.avg_pool_spatial(v[0])),
        case("interp_spectral", &[&[2, 2, 3, 2]], |t, v| {
            let plan = InterpPlan::new(3, make_coords(7)?.values())?;
            t.interp_spectral(v[0], &plan)
        }),
        case("l1_loss", &[&[2, 2, 4], &[2, 2, 4]], |t, v| l1_loss(t, v[0], v[1], &[0, 2, 3])),
        case("fourier_features", &[&[3]], |t, v| {
            let w = t.mul_scalar(v[0], 6.0)?;
            fourier_features(t, &make_coords(5)?, w)
        }),
    ]
}

/// Worst relative error of `case` over `trials` random draws in `[-1, 1]`.
pub fn check_case(case: &Case, trials: u64) -> Result<GradReport> {
    let mut worst = GradReport {
        name: case.name.to_string(),
        max_rel_error: 0.0,
        entries_checked: 0,
    };
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let inputs: Vec<Tensor> = case.shapes.iter().map(|s| random_tensor(&mut rng, s, -1.0, 1.0)).collect();
        let opts = CheckOptions {
            seed: trial,
            ..CheckOptions::default()
        };
        let r = check(case.name, &inputs, &case.build, &opts)?;
        worst.max_rel_error = worst.max_rel_error.max(r.max_rel_error);
        worst.entries_checked += r.entries_checked;
    }
    Ok(worst)
}

/// Gradient of a whole model with respect to all parameters and the input,
/// probing at most `max_entries` entries per tensor. The input is
/// `H x W x D` in `[0, 1]`; the output is reconstructed at `out_bands`.
pub fn check_model(
    config: ModelConfig,
    input_shape: [usize; 3],
    out_bands: usize,
    max_entries: Option<usize>,
    seed: u64,
) -> Result<GradReport> {
    let model = Model::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = model.params.tensors().to_vec();
    inputs.push(random_tensor(&mut rng, &input_shape, 0.0, 1.0));
    let n = model.params.len();
    let name = match config.kind {
        ModelKind::Sinr => "sinr_end_to_end",
        ModelKind::Trilinear => "trilinear_end_to_end",
    };
    check(
        name,
        &inputs,
        |tape, vars| {
            let bound = Bound::from_vars(vars[..n].to_vec());
            model.forward(tape, &bound, vars[n], out_bands)
        },
        &CheckOptions {
            max_entries,
            seed,
            ..CheckOptions::default()
        },
    )
}

/// Small SINR used for the end-to-end check: `C = 4`, one residual block
/// pair, `L = 2` Fourier frequencies, every component enabled.
pub fn small_sinr_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.sinr.encoder.channels = 4;
    cfg.sinr.fce_dim = 2;
    cfg
}

/// The full suite: every op over `trials` draws, then the end-to-end SINR
/// (4x4x3 input reconstructed at 3 bands) and the interpolation baseline.
pub fn suite(trials: u64, max_entries: Option<usize>) -> Result<Vec<GradReport>> {
    let mut reports = op_cases()
        .iter()
        .map(|c| check_case(c, trials))
        .collect::<Result<Vec<_>>>()?;
    reports.push(check_model(small_sinr_config(), [4, 4, 3], 3, max_entries, 7)?);
    let trilinear = ModelConfig {
        kind: ModelKind::Trilinear,
        ..small_sinr_config()
    };
    reports.push(check_model(trilinear, [4, 4, 3], 6, max_entries, 8)?);
    Ok(reports)
}
