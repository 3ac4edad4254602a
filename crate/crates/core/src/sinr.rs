//! The spectral implicit head: latent codes on a cell-centred spectral grid
//! are resampled to arbitrary query coordinates, mixed across bands by
//! spectral-wise attention, and decoded per query by an MLP that also sees
//! the raw coordinate, its Fourier features, and the magnification ratio.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::params::{Bound, Layer, ParamId, ParamStore};
use crate::tensor::{InterpPlan, Tape, Tensor, Var};

/// Hidden width of the reconstruction MLP.
pub const RH_HIDDEN: usize = 256;

/// Default number of Fourier frequencies.
pub const DEFAULT_FCE_DIM: usize = 12;

/// Strictly increasing spectral coordinates on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCoords(Vec<f64>);

impl SpectralCoords {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("spectral coordinates must be non-empty"));
        }
        if values.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::contract("spectral coordinates must lie in [-1, 1]"));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::contract("spectral coordinates must be strictly increasing"));
        }
        Ok(SpectralCoords(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Cell-centred grid `x_k = -1 + (2k + 1) / n`.
pub fn make_coords(n: usize) -> Result<SpectralCoords> {
    if n == 0 {
        return Err(Error::contract("coordinate count must be positive"));
    }
    SpectralCoords::new((0..n).map(|k| -1.0 + (2 * k + 1) as f64 / n as f64).collect())
}

/// Initial Fourier frequencies for `i = 1..=L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FceInit {
    /// `2 * e^i`
    #[default]
    Literal,
    /// `2^i * pi`
    Pow2,
}

impl FceInit {
    pub fn frequencies(self, dim: usize) -> Vec<f64> {
        (1..=dim)
            .map(|i| match self {
                FceInit::Literal => 2.0 * (i as f64).exp(),
                FceInit::Pow2 => 2f64.powi(i as i32) * PI,
            })
            .collect()
    }
}

/// Component switches for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub swa: bool,
    pub fce: bool,
    pub sf: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            swa: true,
            fce: true,
            sf: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinrConfig {
    pub encoder: EncoderConfig,
    pub fce_dim: usize,
    pub fce_init: FceInit,
    pub toggles: Toggles,
}

impl Default for SinrConfig {
    fn default() -> Self {
        SinrConfig {
            encoder: EncoderConfig::default(),
            fce_dim: DEFAULT_FCE_DIM,
            fce_init: FceInit::default(),
            toggles: Toggles::default(),
        }
    }
}

impl SinrConfig {
    /// Width of the reconstruction head input: latent, coordinate, Fourier
    /// features and scale.
    pub fn head_input_dim(&self) -> usize {
        let fce = if self.toggles.fce { 2 * self.fce_dim } else { 0 };
        self.encoder.channels + 1 + fce + usize::from(self.toggles.sf)
    }
}

/// Spectral-wise attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SwaParams {
    pub query: Layer,
    pub key: Layer,
    pub value: Layer,
    /// Stored as `log(sigma)` so the temperature stays positive.
    pub log_sigma: ParamId,
    pub pos_linear: Layer,
    pub pos_conv1: Layer,
    pub pos_conv2: Layer,
}

/// Attention output plus the `D' x D'` weight matrix, exposed for inspection.
#[derive(Debug, Clone, Copy)]
pub struct SwaOutput {
    pub out: Var,
    pub attention: Var,
}

impl SwaParams {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, channels: usize) -> Self {
        let c = channels;
        SwaParams {
            query: Layer::linear(store, rng, "swa.query", c, c),
            key: Layer::linear(store, rng, "swa.key", c, c),
            value: Layer::linear(store, rng, "swa.value", c, c),
            log_sigma: store.add("swa.log_sigma", Tensor::scalar(-0.5 * (c as f64).ln())),
            pos_linear: Layer::linear(store, rng, "swa.pos.linear", c, c),
            pos_conv1: Layer::conv3x3(store, rng, "swa.pos.conv1", c, c),
            pos_conv2: Layer::conv3x3(store, rng, "swa.pos.conv2", c, c),
        }
    }

    /// `z_hr: [H, W, D', C]` to `[H, W, D', C]`.
    ///
    /// Queries and keys come from the spatially pooled codes (`D' x C`), values
    /// keep full resolution. Row `i` of the softmax over keys weights the value
    /// slices for output band `i`. With `with_position`, the position branch
    /// (linear, 3x3 conv, ReLU, 3x3 conv) is added; its kernels span
    /// (band, row) so the result depends on band order.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, z_hr: Var, with_position: bool) -> Result<SwaOutput> {
        let s = tape.shape(z_hr).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(format!("attention input must be H x W x D' x C, got {s:?}")));
        }
        let (h, w, d, c) = (s[0], s[1], s[2], s[3]);

        let pooled = tape.avg_pool_spatial(z_hr)?;
        let pooled = tape.reshape(pooled, &[d, c])?;
        let q = self.query.apply_linear(tape, bound, pooled)?;
        let k = self.key.apply_linear(tape, bound, pooled)?;
        let v = self.value.apply_linear(tape, bound, z_hr)?;

        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let sigma = tape.exp(bound.var(self.log_sigma))?;
        let scores = tape.scale_by(scores, sigma)?;
        let attention = tape.softmax(scores, 1)?;

        // Band-major view of V: [D', H, W, C].
        let v_bands = tape.permute(v, &[2, 0, 1, 3])?;
        let flat = tape.reshape(v_bands, &[d, h * w * c])?;
        let mixed = tape.matmul(attention, flat)?;
        let mixed = tape.reshape(mixed, &[d, h, w, c])?;
        let mut out = tape.permute(mixed, &[1, 2, 0, 3])?;

        if with_position {
            let p = self.pos_linear.apply_linear(tape, bound, v_bands)?;
            let p = self.pos_conv1.apply_conv_spatial(tape, bound, p)?;
            let p = tape.relu(p)?;
            let p = self.pos_conv2.apply_conv_spatial(tape, bound, p)?;
            let p = tape.permute(p, &[1, 2, 0, 3])?;
            out = tape.add(out, p)?;
        }
        Ok(SwaOutput { out, attention })
    }
}

/// Trainable Fourier frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct FceParams {
    pub omegas: ParamId,
    pub dim: usize,
}

impl FceParams {
    pub fn init(store: &mut ParamStore, dim: usize, init: FceInit) -> Self {
        FceParams {
            omegas: store.add("fce.omegas", Tensor::from_vec(init.frequencies(dim))),
            dim,
        }
    }
}

/// `[D'] x [L] -> [D', 2L]`, row `k` being
/// `[cos(w_1 x_k), sin(w_1 x_k), ..., cos(w_L x_k), sin(w_L x_k)]`.
pub fn fourier_features(tape: &mut Tape, coords: &SpectralCoords, omegas: Var) -> Result<Var> {
    let l = tape.value(omegas).len();
    let d = coords.len();
    let x = tape.constant(Tensor::from_parts(vec![d, 1], coords.values().to_vec()));
    let w = tape.reshape(omegas, &[1, l])?;
    let phase = tape.matmul(x, w)?;
    let cos = tape.cos(phase)?;
    let sin = tape.sin(phase)?;
    let cos = tape.reshape(cos, &[d, l, 1])?;
    let sin = tape.reshape(sin, &[d, l, 1])?;
    let pairs = tape.concat(&[cos, sin], 2)?;
    tape.reshape(pairs, &[d, 2 * l])
}

/// Reconstruction MLP: `in -> 256 -> 256 -> 1` with ReLU between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct RhParams {
    pub layers: [Layer; 3],
    pub input_dim: usize,
}

impl RhParams {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, input_dim: usize) -> Self {
        RhParams {
            layers: [
                Layer::linear(store, rng, "rh.fc1", input_dim, RH_HIDDEN),
                Layer::linear(store, rng, "rh.fc2", RH_HIDDEN, RH_HIDDEN),
                Layer::linear(store, rng, "rh.out", RH_HIDDEN, 1),
            ],
            input_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let [fc1, fc2, out] = &self.layers;
        let a = fc1.apply_linear(tape, bound, x)?;
        let a = tape.relu(a)?;
        let a = fc2.apply_linear(tape, bound, a)?;
        let a = tape.relu(a)?;
        out.apply_linear(tape, bound, a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinrParams {
    pub encoder: EncoderParams,
    pub swa: Option<SwaParams>,
    pub fce: Option<FceParams>,
    pub rh: RhParams,
    pub toggles: Toggles,
}

impl SinrParams {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, cfg: &SinrConfig) -> Result<Self> {
        let encoder = EncoderParams::init(store, rng, cfg.encoder)?;
        let c = cfg.encoder.channels;
        let swa = cfg.toggles.swa.then(|| SwaParams::init(store, rng, c));
        let fce = (cfg.toggles.fce && cfg.fce_dim > 0)
            .then(|| FceParams::init(store, cfg.fce_dim, cfg.fce_init));
        let rh = RhParams::init(store, rng, cfg.head_input_dim());
        Ok(SinrParams {
            encoder,
            swa,
            fce,
            rh,
            toggles: cfg.toggles,
        })
    }

    /// Per-band query features `[D', 1 + 2L + 1]`: coordinate, Fourier
    /// features (if enabled) and magnification ratio (if enabled).
    pub fn query_features(&self, tape: &mut Tape, bound: &Bound, coords: &SpectralCoords, scale: f64) -> Result<Var> {
        let d = coords.len();
        let mut parts = vec![tape.constant(Tensor::from_parts(vec![d, 1], coords.values().to_vec()))];
        if let Some(fce) = &self.fce {
            parts.push(fourier_features(tape, coords, bound.var(fce.omegas))?);
        }
        if self.toggles.sf {
            parts.push(tape.constant(Tensor::full([d, 1], scale)));
        }
        tape.concat(&parts, 1)
    }

    /// Reconstructs `[H, W, D']` from the initialised input `f_y: [H, W, D]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, f_y: Var, out_bands: usize) -> Result<Var> {
        let s = tape.shape(f_y).to_vec();
        if s.len() != 3 {
            return Err(Error::dim(format!("input must be H x W x D, got {s:?}")));
        }
        let (h, w, d) = (s[0], s[1], s[2]);
        let coords = make_coords(out_bands)?;
        let z = self.encoder.encode(tape, bound, f_y)?;
        let z_hr = tape.interp_spectral(z, &InterpPlan::new(d, coords.values())?)?;
        let a_out = match &self.swa {
            Some(swa) => swa.forward(tape, bound, z_hr, true)?.out,
            None => z_hr,
        };
        let feats = self.query_features(tape, bound, &coords, out_bands as f64 / d as f64)?;
        let f = tape.shape(feats)[1];
        let feats = tape.broadcast_to(feats, &[h, w, out_bands, f])?;
        let input = tape.concat(&[a_out, feats], 3)?;
        let out = self.rh.forward(tape, bound, input)?;
        tape.reshape(out, &[h, w, out_bands])
    }
}
