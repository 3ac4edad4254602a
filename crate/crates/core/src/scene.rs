//! Analytic synthetic scenes, augmentation, band sampling and datasets.
//!
//! A scene is a sum of Gaussian blobs, each carrying its own spectrum made of
//! a few Gaussian peaks. Because the scene is a closed-form function of
//! position and wavelength it can be rendered at any band count, which
//! provides ground truth for every magnification.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsb;
use crate::optics::{band_centres, HsiCube, DEFAULT_WAVELENGTH_RANGE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralPeak {
    /// nm
    pub centre: f64,
    /// Standard deviation in nm.
    pub width: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    /// Centre as fractions of the image height and width.
    pub centre: (f64, f64),
    /// Standard deviation as a fraction of the image size.
    pub radius: f64,
    pub amplitude: f64,
    pub spectrum: Vec<SpectralPeak>,
}

impl Blob {
    pub fn spatial(&self, y: f64, x: f64) -> f64 {
        let r2 = (y - self.centre.0).powi(2) + (x - self.centre.1).powi(2);
        self.amplitude * (-r2 / (2.0 * self.radius * self.radius)).exp()
    }

    pub fn spectral(&self, lambda: f64) -> f64 {
        self.spectrum
            .iter()
            .map(|p| p.weight * (-(lambda - p.centre).powi(2) / (2.0 * p.width * p.width)).exp())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub blobs: Vec<Blob>,
    pub range: (f64, f64),
}

impl SceneSpec {
    /// Draws a scene of 3 to 6 blobs, each with 1 to 3 spectral peaks.
    pub fn random(seed: u64, range: (f64, f64)) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let span = range.1 - range.0;
        let blobs = (0..rng.gen_range(3..=6))
            .map(|_| {
                let centre = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
                let radius = rng.gen_range(0.08..0.3);
                let amplitude = rng.gen_range(0.3..0.9);
                let spectrum = (0..rng.gen_range(1..=3))
                    .map(|_| SpectralPeak {
                        centre: range.0 + span * rng.gen_range(-0.1..1.1),
                        width: span * rng.gen_range(0.08..0.3),
                        weight: rng.gen_range(0.3..1.0),
                    })
                    .collect();
                Blob {
                    centre,
                    radius,
                    amplitude,
                    spectrum,
                }
            })
            .collect();
        SceneSpec { seed, blobs, range }
    }

    /// Radiance at normalised position `(y, x)` and wavelength `lambda`,
    /// clipped to `[0, 1]`.
    pub fn radiance(&self, y: f64, x: f64, lambda: f64) -> f64 {
        self.blobs
            .iter()
            .map(|b| b.spatial(y, x) * b.spectral(lambda))
            .sum::<f64>()
            .clamp(0.0, 1.0)
    }

    /// Samples pixel centres and cell-centred wavelengths.
    pub fn render(&self, height: usize, width: usize, bands: usize) -> Result<HsiCube> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::contract("render needs positive dimensions"));
        }
        let lambdas = band_centres(self.range, bands);
        let mut cube = HsiCube::zeros(height, width, bands).with_range(self.range)?;
        for r in 0..height {
            let y = (r as f64 + 0.5) / height as f64;
            for c in 0..width {
                let x = (c as f64 + 0.5) / width as f64;
                let spatial: Vec<f64> = self.blobs.iter().map(|b| b.spatial(y, x)).collect();
                for (k, &l) in lambdas.iter().enumerate() {
                    let v: f64 = self.blobs.iter().zip(&spatial).map(|(b, s)| s * b.spectral(l)).sum();
                    cube.set(r, c, k, v.clamp(0.0, 1.0));
                }
            }
        }
        Ok(cube)
    }
}

/// One draw of flips and quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augmentation {
    pub hflip: bool,
    pub vflip: bool,
    /// Counter-clockwise quarter turns, 0..4.
    pub quarter_turns: u8,
}

impl Augmentation {
    /// Always consumes three draws so the stream does not depend on shape.
    pub fn draw(rng: &mut impl Rng) -> Self {
        Augmentation {
            hflip: rng.gen_bool(0.5),
            vflip: rng.gen_bool(0.5),
            quarter_turns: rng.gen_range(0..4),
        }
    }

    /// Rotation is skipped for non-square cubes.
    pub fn apply(&self, cube: &HsiCube) -> HsiCube {
        let mut out = cube.clone();
        if self.hflip {
            out = hflip(&out);
        }
        if self.vflip {
            out = vflip(&out);
        }
        if out.height() == out.width() {
            for _ in 0..self.quarter_turns {
                out = rot90(&out);
            }
        }
        out
    }
}

pub fn augment(cube: &HsiCube, rng: &mut impl Rng) -> HsiCube {
    Augmentation::draw(rng).apply(cube)
}

fn remap(cube: &HsiCube, h: usize, w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> HsiCube {
    let d = cube.bands();
    let mut out = HsiCube::zeros(h, w, d).with_range(cube.range()).expect("range already valid");
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = src(r, c);
            for k in 0..d {
                out.set(r, c, k, cube.get(sr, sc, k));
            }
        }
    }
    out
}

/// Mirror left to right.
pub fn hflip(cube: &HsiCube) -> HsiCube {
    let (h, w, _) = cube.dims();
    remap(cube, h, w, |r, c| (r, w - 1 - c))
}

/// Mirror top to bottom.
pub fn vflip(cube: &HsiCube) -> HsiCube {
    let (h, w, _) = cube.dims();
    remap(cube, h, w, |r, c| (h - 1 - r, c))
}

/// Counter-clockwise quarter turn; the result is `W x H`.
pub fn rot90(cube: &HsiCube) -> HsiCube {
    let (h, w, _) = cube.dims();
    remap(cube, w, h, |r, c| (c, w - 1 - r))
}

/// Sorted band indices for loss supervision: `round(fraction * bands)` of
/// them, at least one.
pub fn sample_bands(bands: usize, fraction: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::contract(format!("band fraction must be in (0, 1], got {fraction}")));
    }
    if fraction == 1.0 {
        return Ok((0..bands).collect());
    }
    let n = ((fraction * bands as f64).round() as usize).clamp(1, bands);
    let mut idx = sample(rng, bands, n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Linear resampling of every spectrum onto `bands` cell-centred bands.
pub fn resample_bands(cube: &HsiCube, bands: usize) -> Result<HsiCube> {
    let (h, w, d) = cube.dims();
    if bands == d {
        return Ok(cube.clone());
    }
    let plan = crate::tensor::InterpPlan::new(d, crate::sinr::make_coords(bands)?.values())?;
    let mut out = HsiCube::zeros(h, w, bands).with_range(cube.range())?;
    for r in 0..h {
        for c in 0..w {
            let s = cube.spectrum(r, c);
            for (k, &(lo, hi, f)) in plan.taps().iter().enumerate() {
                out.set(r, c, k, (1.0 - f) * s[lo] + f * s[hi]);
            }
        }
    }
    Ok(out)
}

/// A scene that can be rendered at any band count.
#[derive(Debug, Clone, PartialEq)]
pub enum Scene {
    /// Exact at every band count.
    Analytic(SceneSpec),
    /// A stored cube, linearly resampled along the spectrum when needed.
    Stored(HsiCube),
}

impl Scene {
    pub fn render(&self, height: usize, width: usize, bands: usize) -> Result<HsiCube> {
        match self {
            Scene::Analytic(spec) => spec.render(height, width, bands),
            Scene::Stored(cube) => {
                if cube.height() != height || cube.width() != width {
                    return Err(Error::dim(format!(
                        "stored scene is {}x{}, requested {height}x{width}",
                        cube.height(),
                        cube.width()
                    )));
                }
                resample_bands(cube, bands)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train: usize,
    pub test: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub range: (f64, f64),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            train: 64,
            test: 16,
            height: 16,
            width: 16,
            bands: 8,
            range: DEFAULT_WAVELENGTH_RANGE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    /// Native (measurement) band count.
    pub bands: usize,
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
}

impl Dataset {
    /// Scene seeds are drawn from one generator seeded by `cfg.seed`: train
    /// first, then test.
    pub fn synthetic(cfg: &DatasetConfig) -> Self {
        let (train, test) = scene_seeds(cfg);
        let scene = |s: &u64| Scene::Analytic(SceneSpec::random(*s, cfg.range));
        Dataset {
            height: cfg.height,
            width: cfg.width,
            bands: cfg.bands,
            train: train.iter().map(scene).collect(),
            test: test.iter().map(scene).collect(),
        }
    }
}

pub fn scene_seeds(cfg: &DatasetConfig) -> (Vec<u64>, Vec<u64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = (0..cfg.train).map(|_| rng.gen()).collect();
    let test = (0..cfg.test).map(|_| rng.gen()).collect();
    (train, test)
}

/// Name of the seed list written next to generated scenes.
pub const SCENE_LIST: &str = "scenes.txt";

fn scene_path(dir: &Path, split: &str, i: usize) -> std::path::PathBuf {
    dir.join(split).join(format!("{i:04}.hsb"))
}

/// Writes `train/NNNN.hsb`, `test/NNNN.hsb` at the native band count and a
/// [`SCENE_LIST`] recording the generator settings and every scene seed.
pub fn write_dataset_dir(dir: &Path, cfg: &DatasetConfig) -> Result<()> {
    let io = |what: &Path| {
        let what = what.display().to_string();
        move |e| Error::io(format!("writing {what}"), e)
    };
    let (train, test) = scene_seeds(cfg);
    let mut list = format!(
        "seed {}\nsize {} {}\nbands {}\nrange {:?} {:?}\n",
        cfg.seed, cfg.height, cfg.width, cfg.bands, cfg.range.0, cfg.range.1
    );
    for (split, seeds) in [("train", &train), ("test", &test)] {
        fs::create_dir_all(dir.join(split)).map_err(io(&dir.join(split)))?;
        for (i, &s) in seeds.iter().enumerate() {
            let cube = SceneSpec::random(s, cfg.range).render(cfg.height, cfg.width, cfg.bands)?;
            hsb::write(&scene_path(dir, split, i), &cube)?;
            list.push_str(&format!("{split} {i} {s}\n"));
        }
    }
    let path = dir.join(SCENE_LIST);
    fs::write(&path, list).map_err(io(&path))
}

fn parse_scene_list(text: &str) -> Result<(DatasetConfig, Vec<u64>, Vec<u64>)> {
    let mut cfg = DatasetConfig {
        train: 0,
        test: 0,
        ..DatasetConfig::default()
    };
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let mut offset = 0u64;
    for line in text.lines() {
        let bad = |m: &str| Error::format(offset, format!("{SCENE_LIST}: {m} in line {line:?}"));
        let f: Vec<&str> = line.split_whitespace().collect();
        let num = |i: usize| -> Result<f64> { f.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad number")) };
        let int = |i: usize| -> Result<u64> { f.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad integer")) };
        match f.first().copied() {
            None => {}
            Some("seed") => cfg.seed = int(1)?,
            Some("size") => (cfg.height, cfg.width) = (int(1)? as usize, int(2)? as usize),
            Some("bands") => cfg.bands = int(1)? as usize,
            Some("range") => cfg.range = (num(1)?, num(2)?),
            Some(split @ ("train" | "test")) => {
                let seeds = if split == "train" { &mut train } else { &mut test };
                if int(1)? as usize != seeds.len() {
                    return Err(bad("out-of-order index"));
                }
                seeds.push(int(2)?);
            }
            Some(_) => return Err(bad("unknown key")),
        }
        offset += line.len() as u64 + 1;
    }
    cfg.train = train.len();
    cfg.test = test.len();
    Ok((cfg, train, test))
}

/// Loads a scene directory. With a [`SCENE_LIST`] the scenes are rebuilt
/// analytically from their seeds; otherwise the HSB files are used as
/// stored cubes.
pub fn read_dataset_dir(dir: &Path) -> Result<(Dataset, Option<DatasetConfig>)> {
    let list = dir.join(SCENE_LIST);
    if list.exists() {
        let text = fs::read_to_string(&list).map_err(|e| Error::io(format!("reading {}", list.display()), e))?;
        let (cfg, train, test) = parse_scene_list(&text)?;
        let scene = |s: &u64| Scene::Analytic(SceneSpec::random(*s, cfg.range));
        let ds = Dataset {
            height: cfg.height,
            width: cfg.width,
            bands: cfg.bands,
            train: train.iter().map(scene).collect(),
            test: test.iter().map(scene).collect(),
        };
        return Ok((ds, Some(cfg)));
    }
    let load = |split: &str| -> Result<Vec<HsiCube>> {
        let mut out = Vec::new();
        while scene_path(dir, split, out.len()).exists() {
            out.push(hsb::read(&scene_path(dir, split, out.len()))?);
        }
        Ok(out)
    };
    let (train, test) = (load("train")?, load("test")?);
    let first = train
        .first()
        .or(test.first())
        .ok_or_else(|| Error::Missing(scene_path(dir, "train", 0)))?;
    let dims = first.dims();
    if let Some(c) = train.iter().chain(&test).find(|c| c.dims() != dims) {
        return Err(Error::dim(format!("scene {:?} differs from {:?}", c.dims(), dims)));
    }
    let ds = Dataset {
        height: dims.0,
        width: dims.1,
        bands: dims.2,
        train: train.into_iter().map(Scene::Stored).collect(),
        test: test.into_iter().map(Scene::Stored).collect(),
    };
    Ok((ds, None))
}
