//! A trainable reconstruction model: configuration, parameters, and the
//! architecture they belong to.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::TrilinearParams;
use crate::error::{Error, Result};
use crate::optics::HsiCube;
use crate::params::{Bound, ParamStore};
use crate::sinr::{SinrConfig, SinrParams};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Sinr,
    Trilinear,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Sinr => "sinr",
            ModelKind::Trilinear => "trilinear",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinr" => Ok(ModelKind::Sinr),
            "trilinear" => Ok(ModelKind::Trilinear),
            other => Err(Error::contract(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// The baseline uses only the encoder part.
    pub sinr: SinrConfig,
    /// Parameter initialisation seed.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Sinr,
            sinr: SinrConfig::default(),
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    Sinr(SinrParams),
    Trilinear(TrilinearParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub arch: Architecture,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let arch = match config.kind {
            ModelKind::Sinr => Architecture::Sinr(SinrParams::init(&mut params, &mut rng, &config.sinr)?),
            ModelKind::Trilinear => {
                Architecture::Trilinear(TrilinearParams::init(&mut params, &mut rng, config.sinr.encoder)?)
            }
        };
        Ok(Model { config, params, arch })
    }

    /// `f_y: [H, W, D]` to `[H, W, out_bands]` on `tape`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, f_y: Var, out_bands: usize) -> Result<Var> {
        match &self.arch {
            Architecture::Sinr(p) => p.forward(tape, bound, f_y, out_bands),
            Architecture::Trilinear(p) => p.forward(tape, bound, f_y, out_bands),
        }
    }

    /// Inference on a plain cube. The output keeps the input wavelength range.
    pub fn reconstruct(&self, f_y: &HsiCube, out_bands: usize) -> Result<HsiCube> {
        let mut tape = Tape::new();
        let bound = self.params.bind_constant(&mut tape);
        let x = tape.constant(f_y.to_tensor());
        let y = self.forward(&mut tape, &bound, x, out_bands)?;
        HsiCube::from_tensor(tape.value(y), f_y.range())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn small(kind: ModelKind) -> ModelConfig {
        let mut cfg = ModelConfig {
            kind,
            ..Default::default()
        };
        cfg.sinr.encoder = EncoderConfig {
            channels: 4,
            blocks: 1,
        };
        cfg.sinr.fce_dim = 2;
        cfg
    }

    #[test]
    fn kinds_parse_and_print() {
        for k in [ModelKind::Sinr, ModelKind::Trilinear] {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
        }
        assert!("bicubic".parse::<ModelKind>().is_err());
    }

    #[test]
    fn reconstruct_shapes() {
        let mut cube = HsiCube::zeros(4, 5, 3);
        cube.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (i % 7) as f64 / 7.0);
        for kind in [ModelKind::Sinr, ModelKind::Trilinear] {
            let m = Model::new(small(kind)).unwrap();
            let out = m.reconstruct(&cube, 12).unwrap();
            assert_eq!(out.dims(), (4, 5, 12));
            assert_eq!(out.range(), cube.range());
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::new(small(ModelKind::Sinr)).unwrap();
        let b = Model::new(small(ModelKind::Sinr)).unwrap();
        assert_eq!(a, b);
        let mut cfg = small(ModelKind::Sinr);
        cfg.init_seed = 1;
        assert_ne!(Model::new(cfg).unwrap().params, a.params);
    }
}
