//! Loss, optimiser, training loop and evaluation.
//!
//! Each training step draws a batch of scenes, augments them, simulates the
//! snapshot measurement, reconstructs at the native band count and takes one
//! Adam step on the L1 loss. Batch elements run on independent tapes (in
//! parallel when more than one thread is allowed); their gradients are then
//! summed in batch order, so results do not depend on the thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Quality;
use crate::model::{Model, ModelConfig};
use crate::optics::{forward_cassi, init_input, HsiCube, Mask, DEFAULT_SHIFT};
use crate::scene::{sample_bands, Augmentation, Dataset, DatasetConfig, Scene};
use crate::tensor::{Tape, Tensor, Var};

/// Mean absolute error over the bands in `bands` (axis 2 of `[H, W, D]`).
pub fn l1_loss(tape: &mut Tape, pred: Var, target: Var, bands: &[usize]) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::dim(format!(
            "l1_loss: prediction {:?} vs target {:?}",
            tape.shape(pred),
            tape.shape(target)
        )));
    }
    let (p, t) = if bands.len() == tape.shape(pred)[2] && bands.iter().enumerate().all(|(i, &b)| i == b) {
        (pred, target)
    } else {
        (tape.index_select(pred, 2, bands)?, tape.index_select(target, 2, bands)?)
    };
    let diff = tape.sub(p, t)?;
    let abs = tape.abs(diff)?;
    tape.mean(abs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Bias-corrected Adam update, walking parameters in order.
    pub fn step(&mut self, cfg: &AdamConfig, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::dim("adam: parameter, gradient and state counts differ"));
        }
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(Error::dim(format!("adam: gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *p -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub adam: AdamConfig,
    pub steps: usize,
    pub batch: usize,
    /// Fraction of bands supervised per element.
    pub band_fraction: f64,
    /// Dispersion step in pixels per band.
    pub shift: usize,
    pub mask_seed: u64,
    /// Seeds batch sampling, augmentation and band selection.
    pub seed: u64,
    /// Ground truth and output band count are `train_scale * bands`.
    pub train_scale: usize,
    /// Train on random square crops of this size instead of whole scenes.
    pub patch: Option<usize>,
    /// Checkpoint interval in steps; 0 for final only.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            dataset: DatasetConfig::default(),
            adam: AdamConfig::default(),
            steps: 2000,
            batch: 4,
            band_fraction: 1.0,
            shift: DEFAULT_SHIFT,
            mask_seed: 0,
            seed: 0,
            train_scale: 1,
            patch: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.train_scale == 0 {
            return Err(Error::contract("batch and train scale must be positive"));
        }
        if let Some(p) = self.patch {
            if p == 0 || p > self.dataset.height || p > self.dataset.width {
                return Err(Error::contract(format!("patch {p} does not fit the scenes")));
            }
        }
        if !(self.band_fraction > 0.0 && self.band_fraction <= 1.0) {
            return Err(Error::contract("band fraction must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Worker count from `SINR_THREADS`, else the machine's parallelism.
pub fn default_threads() -> usize {
    std::env::var("SINR_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Reverse-dispersed network input for a cube observed through `mask`.
pub fn simulate_input(cube: &HsiCube, mask: &Mask, shift: usize) -> Result<HsiCube> {
    let y = forward_cassi(cube, mask, shift)?;
    init_input(&y, mask, shift, cube.bands())
}

/// One prepared batch element.
struct Sample {
    input: Tensor,
    target: Tensor,
    bands: Vec<usize>,
}

/// Loss and per-parameter gradients for one element on its own tape.
fn element_gradients(model: &Model, s: &Sample) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let x = tape.constant(s.input.clone());
    let target = tape.constant(s.target.clone());
    let pred = model.forward(&mut tape, &bound, x, s.target.shape()[2])?;
    let loss = l1_loss(&mut tape, pred, target, &s.bands)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let g = model
        .params
        .tensors()
        .iter()
        .zip(bound.vars())
        .map(|(p, &v)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, g))
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a Dataset,
    model: Model,
    adam: AdamState,
    mask: Mask,
    /// Train scenes rendered at the native and at the target band count.
    native: Vec<HsiCube>,
    truth: Vec<HsiCube>,
    step: usize,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a Dataset, threads: usize) -> Result<Self> {
        let model = Model::new(cfg.model)?;
        let adam = AdamState::new(model.params.tensors());
        Self::resume(cfg, data, threads, model, adam, 0)
    }

    /// Continues from a saved model and optimiser state after `step` steps.
    pub fn resume(
        cfg: TrainConfig,
        data: &'a Dataset,
        threads: usize,
        model: Model,
        adam: AdamState,
        step: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.train.is_empty() {
            return Err(Error::contract("training set is empty"));
        }
        let (h, w, d) = (data.height, data.width, data.bands);
        let render = |bands: usize| -> Result<Vec<HsiCube>> {
            data.train.iter().map(|s| s.render(h, w, bands)).collect()
        };
        let native = render(d)?;
        let truth = if cfg.train_scale == 1 {
            native.clone()
        } else {
            render(d * cfg.train_scale)?
        };
        let pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| Error::contract(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Trainer {
            mask: Mask::random(h, w, cfg.mask_seed),
            cfg,
            data,
            model,
            adam,
            native,
            truth,
            step,
            pool,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    /// Draws step `step`'s batch from its own generator stream, so a resumed
    /// run sees the same batches as an uninterrupted one.
    fn draw_batch(&self) -> Result<Vec<Sample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.step as u64);
        let (h, w) = (self.data.height, self.data.width);
        (0..self.cfg.batch)
            .map(|_| {
                let idx = rng.gen_range(0..self.native.len());
                let (mut native, mut truth) = (self.native[idx].clone(), self.truth[idx].clone());
                let mut mask = self.mask.clone();
                if let Some(p) = self.cfg.patch {
                    let (top, left) = (rng.gen_range(0..=h - p), rng.gen_range(0..=w - p));
                    native = native.crop(top, left, p, p)?;
                    truth = truth.crop(top, left, p, p)?;
                    mask = mask.crop(top, left, p, p)?;
                }
                let aug = Augmentation::draw(&mut rng);
                let (native, truth) = (aug.apply(&native), aug.apply(&truth));
                let bands = sample_bands(truth.bands(), self.cfg.band_fraction, &mut rng)?;
                Ok(Sample {
                    input: simulate_input(&native, &mask, self.cfg.shift)?.to_tensor(),
                    target: truth.to_tensor(),
                    bands,
                })
            })
            .collect()
    }

    /// Runs one optimisation step and returns the batch-mean loss.
    pub fn step(&mut self) -> Result<f64> {
        let batch = self.draw_batch()?;
        let model = &self.model;
        let results: Vec<Result<(f64, Vec<Tensor>)>> = match &self.pool {
            Some(pool) => pool.install(|| batch.par_iter().map(|s| element_gradients(model, s)).collect()),
            None => batch.iter().map(|s| element_gradients(model, s)).collect(),
        };
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut total: Option<Vec<Tensor>> = None;
        for r in results {
            let (l, g) = r?;
            loss += l;
            match &mut total {
                None => total = Some(g),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&g) {
                        a.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
        let mut grads = total.expect("batch is non-empty");
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v /= n));
        self.adam
            .step(&self.cfg.adam, self.model.params.tensors_mut(), &grads)?;
        self.step += 1;
        let loss = loss / n;
        if !loss.is_finite() {
            return Err(Error::contract(format!("loss diverged at step {}", self.step)));
        }
        Ok(loss)
    }
}

/// One evaluation result row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub scale: usize,
    pub model: String,
    pub quality: Quality,
}

impl EvalRow {
    pub const CSV_HEADER: &'static str = "scale,model,psnr,ssim,sam,uqi";

    pub fn csv(&self) -> String {
        format!("{},{},{}", self.scale, self.model, self.quality.csv_row())
    }
}

/// Mean metrics over `scenes` for each magnification in `scales`. Inputs are
/// simulated at the dataset's native band count; ground truth is rendered at
/// `scale * bands`.
pub fn evaluate(
    model: &Model,
    scenes: &[Scene],
    data: &Dataset,
    mask: &Mask,
    shift: usize,
    scales: &[usize],
) -> Result<Vec<EvalRow>> {
    if scenes.is_empty() {
        return Err(Error::contract("no scenes to evaluate"));
    }
    let (h, w, d) = (data.height, data.width, data.bands);
    let inputs: Vec<HsiCube> = scenes
        .iter()
        .map(|s| simulate_input(&s.render(h, w, d)?, mask, shift))
        .collect::<Result<_>>()?;
    scales
        .iter()
        .map(|&r| {
            let q: Vec<Quality> = scenes
                .par_iter()
                .zip(&inputs)
                .map(|(s, x)| {
                    let truth = s.render(h, w, d * r)?;
                    let pred = model.reconstruct(x, d * r)?;
                    Quality::measure(&pred, &truth)
                })
                .collect::<Result<_>>()?;
            Ok(EvalRow {
                scale: r,
                model: model.config.kind.name().to_string(),
                quality: Quality::mean(&q).expect("non-empty"),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::gradcheck::{check, random_tensor, CheckOptions};
    use crate::model::ModelKind;

    #[test]
    fn l1_examples() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_tensor(&mut rng, &[3, 3, 4], 0.0, 1.0);
        let av = tape.constant(a.clone());
        let l = l1_loss(&mut tape, av, av, &[0, 1, 2, 3]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let b = tape.constant(a.map(|v| v + 0.2));
        let l = l1_loss(&mut tape, av, b, &[0, 1, 2, 3]).unwrap();
        assert!((tape.value(l).item() - 0.2).abs() < 1e-12);
        let l = l1_loss(&mut tape, av, b, &[1, 3]).unwrap();
        assert!((tape.value(l).item() - 0.2).abs() < 1e-12);
        let c = tape.constant(Tensor::zeros([3, 3, 2]));
        assert!(l1_loss(&mut tape, av, c, &[0]).is_err());
    }

    #[test]
    fn l1_gradient_is_sign_over_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_tensor(&mut rng, &[2, 3, 4], 0.0, 1.0);
        let t = random_tensor(&mut rng, &[2, 3, 4], 0.0, 1.0);
        let mut tape = Tape::new();
        let (pv, tv) = (tape.param(p.clone()), tape.constant(t.clone()));
        let l = l1_loss(&mut tape, pv, tv, &[0, 2]).unwrap();
        let g = tape.backward(l).unwrap();
        let g = g.get(pv).unwrap();
        for i in 0..24 {
            let k = i % 4;
            let want = if k == 0 || k == 2 { (p.data()[i] - t.data()[i]).signum() / 12.0 } else { 0.0 };
            assert_eq!(g.data()[i], want);
        }
        let report = check(
            "l1",
            &[p],
            |tape, v| {
                let tv = tape.constant(t.clone());
                l1_loss(tape, v[0], tv, &[0, 1, 3])
            },
            &CheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4);
    }

    #[test]
    fn adam_examples() {
        let cfg = AdamConfig::default();
        let mut p = vec![Tensor::from_vec(vec![1.0, -2.0])];
        let mut st = AdamState::new(&p);
        st.step(&cfg, &mut p, &[Tensor::zeros([2])]).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);

        let mut p = vec![Tensor::from_vec(vec![1.0, 1.0])];
        let mut st = AdamState::new(&p);
        st.step(&cfg, &mut p, &[Tensor::from_vec(vec![0.5, -3.0])]).unwrap();
        assert!((p[0].data()[0] - (1.0 - 4e-4)).abs() < 1e-10);
        assert!((p[0].data()[1] - (1.0 + 4e-4)).abs() < 1e-10);
    }

    #[test]
    fn adam_minimises_parabola() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut p = vec![Tensor::scalar(1.0)];
        let mut st = AdamState::new(&p);
        for _ in 0..100 {
            let g = Tensor::scalar(2.0 * p[0].item());
            st.step(&cfg, &mut p, &[g]).unwrap();
        }
        // Scalar oracle of the same recurrence.
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            x -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert!((p[0].item() - x).abs() < 1e-15);
        assert!(x.abs() < 0.1);
    }

    fn tiny_config(kind: ModelKind) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.model.kind = kind;
        cfg.model.sinr.encoder = EncoderConfig {
            channels: 8,
            blocks: 1,
        };
        cfg.model.sinr.fce_dim = 2;
        cfg.dataset = DatasetConfig {
            train: 4,
            test: 2,
            height: 8,
            width: 8,
            bands: 4,
            ..Default::default()
        };
        cfg.steps = 3;
        cfg.batch = 2;
        cfg
    }

    fn losses(cfg: &TrainConfig, threads: usize) -> Vec<f64> {
        let data = Dataset::synthetic(&cfg.dataset);
        let mut t = Trainer::new(cfg.clone(), &data, threads).unwrap();
        (0..cfg.steps).map(|_| t.step().unwrap()).collect()
    }

    #[test]
    fn one_step_smoke() {
        let mut cfg = tiny_config(ModelKind::Sinr);
        cfg.steps = 1;
        let l = losses(&cfg, 1);
        assert!(l[0].is_finite() && l[0] > 0.0);
    }

    #[test]
    fn deterministic_across_runs_and_threads() {
        let cfg = tiny_config(ModelKind::Sinr);
        let a = losses(&cfg, 1);
        let b = losses(&cfg, 1);
        let c = losses(&cfg, 3);
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = tiny_config(ModelKind::Sinr);
        let data = Dataset::synthetic(&cfg.dataset);
        let full = losses(&cfg, 1);
        let mut t = Trainer::new(cfg.clone(), &data, 1).unwrap();
        t.step().unwrap();
        let (model, adam) = (t.model().clone(), t.adam().clone());
        let mut r = Trainer::resume(cfg, &data, 1, model, adam, 1).unwrap();
        assert_eq!(r.step().unwrap(), full[1]);
        assert_eq!(r.step().unwrap(), full[2]);
    }

    #[test]
    fn patches_scales_and_band_fractions_train() {
        let mut cfg = tiny_config(ModelKind::Trilinear);
        cfg.patch = Some(4);
        cfg.train_scale = 2;
        cfg.band_fraction = 0.5;
        assert!(losses(&cfg, 1).iter().all(|l| l.is_finite()));
        cfg.patch = Some(9);
        let data = Dataset::synthetic(&cfg.dataset);
        assert!(Trainer::new(cfg, &data, 1).is_err());
    }

    #[test]
    fn evaluation_rows() {
        let cfg = tiny_config(ModelKind::Sinr);
        let data = Dataset::synthetic(&cfg.dataset);
        let model = Model::new(cfg.model).unwrap();
        let mask = Mask::random(8, 8, 0);
        let rows = evaluate(&model, &data.train, &data, &mask, 2, &[1, 2]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].scale, 2);
        for r in &rows {
            assert!(r.quality.psnr.is_finite() && r.quality.sam >= 0.0);
        }
        assert!(rows[0].csv().starts_with("1,sinr,"));
    }
}
