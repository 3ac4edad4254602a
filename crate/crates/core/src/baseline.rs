//! Interpolation baseline: the shared encoder, a per-voxel linear projection
//! to one value, then linear resampling along the spectral axis.
//!
//! Only the band count changes between input and output, so trilinear
//! resampling of the cube reduces to 1-D linear interpolation per pixel.

use rand::Rng;

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::params::{Bound, Layer, ParamStore};
use crate::sinr::make_coords;
use crate::tensor::{InterpPlan, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TrilinearParams {
    pub encoder: EncoderParams,
    pub head: Layer,
}

impl TrilinearParams {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, cfg: EncoderConfig) -> Result<Self> {
        let encoder = EncoderParams::init(store, rng, cfg)?;
        let head = Layer::linear(store, rng, "head", cfg.channels, 1);
        Ok(TrilinearParams { encoder, head })
    }

    /// `f_y: [H, W, D]` to `[H, W, D']`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, f_y: Var, out_bands: usize) -> Result<Var> {
        let s = tape.shape(f_y).to_vec();
        if s.len() != 3 {
            return Err(Error::dim(format!("input must be H x W x D, got {s:?}")));
        }
        let z = self.encoder.encode(tape, bound, f_y)?;
        let projected = self.head.apply_linear(tape, bound, z)?;
        let projected = tape.reshape(projected, &[s[0], s[1], s[2]])?;
        lerp_bands(tape, projected, out_bands)
    }
}

/// Linear resampling of `[H, W, D]` onto `out_bands` cell-centred bands.
pub fn lerp_bands(tape: &mut Tape, x: Var, out_bands: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::dim(format!("lerp_bands expects H x W x D, got {s:?}")));
    }
    let plan = InterpPlan::new(s[2], make_coords(out_bands)?.values())?;
    let x = tape.reshape(x, &[s[0], s[1], s[2], 1])?;
    let y = tape.interp_spectral(x, &plan)?;
    tape.reshape(y, &[s[0], s[1], out_bands])
}
