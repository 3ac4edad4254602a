//! Coded-aperture snapshot spectral imaging: mask modulation, dispersion
//! shear, detector integration, the exact adjoint, and the reverse-dispersion
//! initialisation fed to the encoder.
//!
//! Band `n` (0-based) is displaced by `d * n` detector columns, i.e. the first
//! band is the undeviated reference wavelength.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Visible range used when no other range is known, in nanometres.
pub const DEFAULT_WAVELENGTH_RANGE: (f64, f64) = (450.0, 650.0);

/// Default dispersion step in detector columns per band.
pub const DEFAULT_SHIFT: usize = 2;

/// A dense `H x W x D` radiance cube, stored `(h, w, d)` with `d` fastest.
///
/// Band `k` of `D` sits at the cell centre
/// `lambda_min + (k + 0.5) * (lambda_max - lambda_min) / D`.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f64>,
    range: (f64, f64),
}

impl HsiCube {
    pub fn new(
        height: usize,
        width: usize,
        bands: usize,
        data: Vec<f64>,
        range: (f64, f64),
    ) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::dim(format!(
                "cube dimensions must be positive, got {height}x{width}x{bands}"
            )));
        }
        if data.len() != height * width * bands {
            return Err(Error::dim(format!(
                "cube {height}x{width}x{bands} needs {} values, got {}",
                height * width * bands,
                data.len()
            )));
        }
        if !(range.0.is_finite() && range.1.is_finite() && range.1 > range.0) {
            return Err(Error::contract(format!(
                "wavelength range must be finite and increasing, got {range:?}"
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(HsiCube {
            height,
            width,
            bands,
            data,
            range,
        })
    }

    pub fn zeros(height: usize, width: usize, bands: usize) -> Self {
        HsiCube {
            height,
            width,
            bands,
            data: vec![0.0; height * width * bands],
            range: DEFAULT_WAVELENGTH_RANGE,
        }
    }

    pub fn from_tensor(t: &Tensor, range: (f64, f64)) -> Result<Self> {
        match *t.shape() {
            [h, w, d] | [h, w, d, 1] => HsiCube::new(h, w, d, t.data().to_vec(), range),
            _ => Err(Error::dim(format!(
                "expected an H x W x D tensor, got {:?}",
                t.shape()
            ))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.height, self.width, self.bands],
            self.data.clone(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.bands)
    }

    pub fn range(&self) -> (f64, f64) {
        self.range
    }

    pub fn with_range(mut self, range: (f64, f64)) -> Result<Self> {
        if !(range.1 > range.0) {
            return Err(Error::contract(format!("bad wavelength range {range:?}")));
        }
        self.range = range;
        Ok(self)
    }

    pub fn wavelengths(&self) -> Vec<f64> {
        band_centres(self.range, self.bands)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, h: usize, w: usize, d: usize) -> f64 {
        self.data[(h * self.width + w) * self.bands + d]
    }

    pub fn set(&mut self, h: usize, w: usize, d: usize, v: f64) {
        self.data[(h * self.width + w) * self.bands + d] = v;
    }

    /// The spectrum at pixel `(h, w)`.
    pub fn spectrum(&self, h: usize, w: usize) -> &[f64] {
        let start = (h * self.width + w) * self.bands;
        &self.data[start..start + self.bands]
    }

    pub fn band(&self, d: usize) -> Vec<f64> {
        self.data.iter().skip(d).step_by(self.bands).copied().collect()
    }

    pub fn scaled(&self, c: f64) -> HsiCube {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= c);
        out
    }

    /// Spatial sub-window `[top, top+h) x [left, left+w)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<HsiCube> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(Error::dim(format!(
                "crop {h}x{w} at ({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * self.bands);
        for r in top..top + h {
            let start = (r * self.width + left) * self.bands;
            data.extend_from_slice(&self.data[start..start + w * self.bands]);
        }
        Ok(HsiCube {
            height: h,
            width: w,
            bands: self.bands,
            data,
            range: self.range,
        })
    }
}

/// Cell-centred sample positions of `n` bands spanning `range`.
pub fn band_centres(range: (f64, f64), n: usize) -> Vec<f64> {
    let step = (range.1 - range.0) / n as f64;
    (0..n).map(|k| range.0 + (k as f64 + 0.5) * step).collect()
}

/// Binary coded aperture.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Mask {
    /// Values must be exactly 0 or 1 with at least one open (1) cell.
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::dim(format!(
                "mask {height}x{width} with {} values",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract(format!(
                "mask value {} at index {i} is not binary",
                values[i]
            )));
        }
        if !values.contains(&1.0) {
            return Err(Error::contract("mask has no open cells"));
        }
        Ok(Mask {
            height,
            width,
            values,
        })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            values: vec![1.0; height * width],
        }
    }

    /// I.i.d. Bernoulli(0.5) cells, redrawn in the (vanishingly rare) event
    /// that every cell comes out closed.
    pub fn random(height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let values: Vec<f64> = (0..height * width)
                .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
                .collect();
            if values.contains(&1.0) {
                return Mask {
                    height,
                    width,
                    values,
                };
            }
        }
    }

    /// All-closed mask. Violates the open-cell invariant; only for exercising
    /// degenerate operator behaviour.
    #[cfg(test)]
    pub(crate) fn closed(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, h: usize, w: usize) -> f64 {
        self.values[h * self.width + w]
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Mask> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(Error::dim("mask crop out of bounds"));
        }
        let values: Vec<f64> = (top..top + h)
            .flat_map(|r| self.values[r * self.width + left..r * self.width + left + w].iter().copied())
            .collect();
        // A small window may be fully closed; that is a valid observation.
        Ok(Mask {
            height: h,
            width: w,
            values,
        })
    }

    pub fn to_cube(&self) -> HsiCube {
        HsiCube {
            height: self.height,
            width: self.width,
            bands: 1,
            data: self.values.clone(),
            range: DEFAULT_WAVELENGTH_RANGE,
        }
    }

    pub fn from_cube(cube: &HsiCube) -> Result<Mask> {
        if cube.bands() != 1 {
            return Err(Error::dim(format!(
                "mask file must have one band, got {}",
                cube.bands()
            )));
        }
        Mask::new(cube.height(), cube.width(), cube.data().to_vec())
    }
}

/// Per-band dispersed stack `H x (W + d(D-1)) x D` before detector summation.
#[derive(Debug, Clone, PartialEq)]
pub struct ShearedStack {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub shift: usize,
    /// `(h, u, n)` order, `n` fastest.
    pub data: Vec<f64>,
}

/// 2-D detector image of width `W + d(D-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    height: usize,
    width: usize,
    shift: usize,
    data: Vec<f64>,
}

impl Measurement {
    pub fn new(height: usize, width: usize, shift: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::dim(format!(
                "measurement {height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(Measurement {
            height,
            width,
            shift,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shift(&self) -> usize {
        self.shift
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, h: usize, u: usize) -> f64 {
        self.data[h * self.width + u]
    }

    /// Number of bands consistent with a scene of `scene_width` columns.
    /// `None` if the widths disagree or the band count is ambiguous (`d = 0`).
    pub fn infer_bands(&self, scene_width: usize) -> Option<usize> {
        if self.shift == 0 || self.width < scene_width {
            return None;
        }
        let extra = self.width - scene_width;
        extra.is_multiple_of(self.shift).then(|| extra / self.shift + 1)
    }

    pub fn to_cube(&self) -> HsiCube {
        HsiCube {
            height: self.height,
            width: self.width,
            bands: 1,
            data: self.data.clone(),
            range: DEFAULT_WAVELENGTH_RANGE,
        }
    }

    pub fn from_cube(cube: &HsiCube, shift: usize) -> Result<Self> {
        if cube.bands() != 1 {
            return Err(Error::dim("measurement file must have one band"));
        }
        Measurement::new(cube.height(), cube.width(), shift, cube.data().to_vec())
    }
}

pub fn detector_width(width: usize, bands: usize, shift: usize) -> usize {
    width + shift * (bands - 1)
}

fn check_mask(cube_h: usize, cube_w: usize, mask: &Mask) -> Result<()> {
    if (cube_h, cube_w) != (mask.height, mask.width) {
        return Err(Error::dim(format!(
            "mask {}x{} does not match scene {cube_h}x{cube_w}",
            mask.height, mask.width
        )));
    }
    Ok(())
}

/// Multiplies every band by the mask.
pub fn modulate(cube: &HsiCube, mask: &Mask) -> Result<HsiCube> {
    check_mask(cube.height, cube.width, mask)?;
    let mut out = cube.clone();
    for (pixel, m) in out.data.chunks_exact_mut(cube.bands).zip(&mask.values) {
        pixel.iter_mut().for_each(|v| *v *= m);
    }
    Ok(out)
}

/// Places band `n` at column offset `shift * n`; vacated columns are zero.
pub fn shear(cube: &HsiCube, shift: usize) -> ShearedStack {
    let (h, w, bands) = cube.dims();
    let width = detector_width(w, bands, shift);
    let mut data = vec![0.0; h * width * bands];
    for r in 0..h {
        for c in 0..w {
            for n in 0..bands {
                data[(r * width + c + shift * n) * bands + n] = cube.get(r, c, n);
            }
        }
    }
    ShearedStack {
        height: h,
        width,
        bands,
        shift,
        data,
    }
}

/// Sums the dispersed stack over bands.
pub fn integrate(stack: &ShearedStack) -> Measurement {
    let data = stack
        .data
        .chunks_exact(stack.bands)
        .map(|px| px.iter().sum())
        .collect();
    Measurement {
        height: stack.height,
        width: stack.width,
        shift: stack.shift,
        data,
    }
}

/// The full linear sensing operator `integrate(shear(modulate(cube)))`.
pub fn forward_cassi(cube: &HsiCube, mask: &Mask, shift: usize) -> Result<Measurement> {
    Ok(integrate(&shear(&modulate(cube, mask)?, shift)))
}

/// Exact adjoint of [`forward_cassi`]: crop each band's detector window and
/// multiply by the mask.
pub fn adjoint_cassi(y: &Measurement, mask: &Mask, shift: usize, bands: usize) -> Result<HsiCube> {
    if bands == 0 {
        return Err(Error::dim("band count must be positive"));
    }
    if y.height != mask.height || y.width != detector_width(mask.width, bands, shift) {
        return Err(Error::dim(format!(
            "measurement {}x{} inconsistent with mask {}x{}, {bands} bands, shift {shift}",
            y.height, y.width, mask.height, mask.width
        )));
    }
    let (h, w) = (mask.height, mask.width);
    let mut out = HsiCube::zeros(h, w, bands);
    for r in 0..h {
        for c in 0..w {
            let m = mask.get(r, c);
            for n in 0..bands {
                out.set(r, c, n, m * y.get(r, c + shift * n));
            }
        }
    }
    Ok(out)
}

/// Reverse-dispersion initialisation: band `n` of the result is the
/// measurement window starting at column `shift * n`, masked. This is the
/// same linear map as [`adjoint_cassi`].
pub fn init_input(y: &Measurement, mask: &Mask, shift: usize, bands: usize) -> Result<HsiCube> {
    adjoint_cassi(y, mask, shift, bands)
}
