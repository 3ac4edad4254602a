//! Small convolutional encoder mapping the reverse-dispersed cube
//! `[H, W, D]` to a latent field `[H, W, D, C]`.
//!
//! Layout: a 3x3 spatial lift from one to `C` channels, `nb` residual blocks
//! of two 3x3 spatial convolutions, then a three-band spectral mixing layer
//! (reflect padded) so every latent code sees its spectral neighbours.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, Layer, ParamStore};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: usize,
    pub blocks: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: 16,
            blocks: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub channels: usize,
    pub lift: Layer,
    pub blocks: Vec<[Layer; 2]>,
    pub mix: Layer,
}

impl EncoderParams {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, cfg: EncoderConfig) -> Result<Self> {
        if cfg.channels == 0 || cfg.blocks == 0 {
            return Err(Error::contract(format!(
                "encoder needs C >= 1 and nb >= 1, got {cfg:?}"
            )));
        }
        let c = cfg.channels;
        let lift = Layer::conv3x3(store, rng, "encoder.lift", 1, c);
        let blocks = (0..cfg.blocks)
            .map(|i| {
                [
                    Layer::conv3x3(store, rng, &format!("encoder.block{i}.conv1"), c, c),
                    Layer::conv3x3(store, rng, &format!("encoder.block{i}.conv2"), c, c),
                ]
            })
            .collect();
        let mix = Layer::conv3(store, rng, "encoder.mix", c, c);
        Ok(EncoderParams {
            channels: c,
            lift,
            blocks,
            mix,
        })
    }

    /// `f_y: [H, W, D]` to `[H, W, D, C]`.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, f_y: Var) -> Result<Var> {
        let s = tape.shape(f_y).to_vec();
        if s.len() != 3 {
            return Err(Error::dim(format!("encoder input must be H x W x D, got {s:?}")));
        }
        let x = tape.reshape(f_y, &[s[0], s[1], s[2], 1])?;
        let lifted = self.lift.apply_conv_spatial(tape, bound, x)?;
        let mut h = tape.relu(lifted)?;
        for [conv1, conv2] in &self.blocks {
            let a = conv1.apply_conv_spatial(tape, bound, h)?;
            let a = tape.relu(a)?;
            let a = conv2.apply_conv_spatial(tape, bound, a)?;
            h = tape.add(h, a)?;
        }
        self.mix.apply_conv_spectral(tape, bound, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, random_tensor, CheckOptions};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(c: usize, seed: u64) -> (ParamStore, EncoderParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = EncoderParams::init(
            &mut store,
            &mut rng,
            EncoderConfig {
                channels: c,
                blocks: 2,
            },
        )
        .unwrap();
        (store, p)
    }

    fn run(store: &ParamStore, p: &EncoderParams, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let z = p.encode(&mut tape, &bound, xv).unwrap();
        tape.value(z).clone()
    }

    #[test]
    fn output_shape() {
        let (store, p) = build(16, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, &[8, 8, 4], 0.0, 1.0);
        assert_eq!(run(&store, &p, &x).shape(), &[8, 8, 4, 16]);
        let x = random_tensor(&mut rng, &[3, 5, 1], 0.0, 1.0);
        assert_eq!(run(&store, &p, &x).shape(), &[3, 5, 1, 16]);
    }

    #[test]
    fn rejects_degenerate_config() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = EncoderConfig {
            channels: 0,
            blocks: 1,
        };
        assert!(EncoderParams::init(&mut store, &mut rng, bad).is_err());
    }

    #[test]
    fn bias_only_parameters_give_constant_output() {
        let (mut store, p) = build(4, 3);
        let b = 0.375;
        for (name, t) in store.names().to_vec().into_iter().zip(store.tensors_mut()) {
            let v = if name.ends_with(".bias") { b } else { 0.0 };
            t.data_mut().iter_mut().for_each(|x| *x = v);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&mut rng, &[5, 4, 3], -1.0, 1.0);
        assert!(run(&store, &p, &x).data().iter().all(|&v| v == b));
    }

    #[test]
    fn interior_translation_equivariance() {
        let (store, p) = build(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (h, w, d) = (6, 14, 3);
        let x = random_tensor(&mut rng, &[h, w, d], 0.0, 1.0);
        // Shift right by one column, new column 0 arbitrary.
        let mut shifted = Tensor::zeros([h, w, d]);
        for r in 0..h {
            for c in 1..w {
                for k in 0..d {
                    let v = x.at(&[r, c - 1, k]);
                    shifted.data_mut()[(r * w + c) * d + k] = v;
                }
            }
        }
        let (z, zs) = (run(&store, &p, &x), run(&store, &p, &shifted));
        let c_lat = 4;
        // Receptive radius: one lift conv plus two convs per block.
        let margin = 1 + 2 * 2;
        for r in 0..h {
            for c in margin + 1..w - margin {
                for k in 0..d {
                    for ch in 0..c_lat {
                        let a = zs.at(&[r, c, k, ch]);
                        let b = z.at(&[r, c - 1, k, ch]);
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let (store, p) = build(3, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor(&mut rng, &[4, 4, 2], 0.0, 1.0);
        let mut inputs = store.tensors().to_vec();
        inputs.push(x);
        let n = store.len();
        let report = check(
            "encoder",
            &inputs,
            |tape, vars| {
                let bound = Bound::from_vars(vars[..n].to_vec());
                p.encode(tape, &bound, vars[n])
            },
            &CheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
    }
}
