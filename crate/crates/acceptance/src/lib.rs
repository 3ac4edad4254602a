//! Training runs shared by the acceptance checks.

use std::time::Instant;

use sinr::scene::Dataset;
use sinr::training::{evaluate, TrainConfig, Trainer};
use sinr::Result;

/// One training run followed by test-set evaluation.
#[derive(Debug, Clone)]
pub struct Run {
    pub losses: Vec<f64>,
    /// `(scale, mean test PSNR)` per evaluated magnification.
    pub psnr: Vec<(usize, f64)>,
    pub seconds: f64,
}

impl Run {
    pub fn psnr_at(&self, scale: usize) -> Option<f64> {
        self.psnr.iter().find(|(s, _)| *s == scale).map(|(_, p)| *p)
    }

    /// Mean loss over the first and last `n` steps.
    pub fn loss_windows(&self, n: usize) -> (f64, f64) {
        let n = n.min(self.losses.len()).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        (mean(&self.losses[..n]), mean(&self.losses[self.losses.len() - n..]))
    }
}

pub fn train_and_evaluate(cfg: TrainConfig, data: &Dataset, scales: &[usize], threads: usize) -> Result<Run> {
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg, data, threads)?;
    let steps = trainer.config().steps;
    let losses = (0..steps).map(|_| trainer.step()).collect::<Result<Vec<_>>>()?;
    let shift = trainer.config().shift;
    let rows = evaluate(trainer.model(), &data.test, data, trainer.mask(), shift, scales)?;
    Ok(Run {
        losses,
        psnr: rows.iter().map(|r| (r.scale, r.quality.psnr)).collect(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// The same configuration with both the data-order seed and the
/// initialisation seed set to `seed`.
pub fn seeded(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    cfg.model.init_seed = seed;
    cfg
}
