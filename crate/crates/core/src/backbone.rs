//! Patch-embedding transformer encoder for single-channel radiographs.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Mat, Tape, Var};
use crate::config::ModelConfig;
use crate::corpus::image::resize_bilinear;
use crate::error::{RecapError, Result};
use crate::nn::{Encoder, Linear};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};

/// Class token plus patch states of one image, living on a tape.
#[derive(Debug, Clone, Copy)]
pub struct VisualSequence {
    /// `(N+1)×h`, class token first.
    pub states: Var,
    pub cls: Var,
    pub patches: Var,
    pub num_patches: usize,
}

/// Anything that maps an image to a [`VisualSequence`].
pub trait VisualEncoder {
    fn hidden(&self) -> usize;
    fn num_patches(&self) -> usize;
    fn encode(&self, tape: &mut Tape, image: &Mat, dropout: f64) -> Result<VisualSequence>;
}

#[derive(Debug, Clone)]
pub struct PatchEncoder {
    embed: Linear,
    cls: ParamId,
    pos: ParamId,
    encoder: Encoder,
    image_size: usize,
    patch_size: usize,
    hidden: usize,
}

pub const PREFIX: &str = "backbone";

impl PatchEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let g = ParamGroup::Encoder;
        let h = cfg.hidden;
        let n = cfg.num_patches();
        let embed = Linear::new(store, rng, &format!("{PREFIX}.patch"), cfg.patch_size.pow(2), h, g);
        let mut init = Init::new(rng);
        let cls = store.register(format!("{PREFIX}.cls"), init.normal(1, h, 0.02), g);
        let pos = store.register(format!("{PREFIX}.pos"), init.normal(n + 1, h, 0.02), g);
        let encoder = Encoder::new(store, rng, &format!("{PREFIX}.enc"), cfg.vit_layers, h, cfg.heads, cfg.ffn, g);
        PatchEncoder {
            embed,
            cls,
            pos,
            encoder,
            image_size: cfg.image_size,
            patch_size: cfg.patch_size,
            hidden: h,
        }
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// Rows are flattened `ps×ps` patches in raster order.
    pub fn patchify(&self, image: &Mat) -> Result<Mat> {
        patchify(image, self.patch_size)
    }

    /// Resizes to the configured square size when needed.
    pub fn prepare(&self, image: &Mat) -> Mat {
        if image.dim() == (self.image_size, self.image_size) {
            image.clone()
        } else {
            resize_bilinear(image, self.image_size, self.image_size)
        }
    }
}

pub fn patchify(image: &Mat, ps: usize) -> Result<Mat> {
    let (h, w) = image.dim();
    if ps == 0 || h % ps != 0 || w % ps != 0 {
        return Err(RecapError::Shape(format!(
            "{h}x{w} image is not divisible into {ps}x{ps} patches"
        )));
    }
    let per_row = w / ps;
    let n = (h / ps) * per_row;
    Ok(Mat::from_shape_fn((n, ps * ps), |(p, k)| {
        let (pr, pc) = (p / per_row, p % per_row);
        image[[pr * ps + k / ps, pc * ps + k % ps]]
    }))
}

impl VisualEncoder for PatchEncoder {
    fn hidden(&self) -> usize {
        self.hidden
    }

    fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    fn encode(&self, tape: &mut Tape, image: &Mat, dropout: f64) -> Result<VisualSequence> {
        let patches = self.patchify(image)?;
        let n = patches.nrows();
        if n != self.num_patches() {
            return Err(RecapError::Shape(format!(
                "image yields {n} patches, encoder expects {}",
                self.num_patches()
            )));
        }
        let x = tape.constant(patches);
        let x = self.embed.forward(tape, x);
        let cls = tape.param(self.cls);
        let seq = tape.concat_rows(&[cls, x]);
        let pos = tape.param(self.pos);
        let seq = tape.add(seq, pos);
        let seq = tape.dropout(seq, dropout);
        let states = self.encoder.forward(tape, seq, dropout);
        let cls = tape.slice_rows(states, 0, 1);
        let patches = tape.slice_rows(states, 1, n);
        Ok(VisualSequence {
            states,
            cls,
            patches,
            num_patches: n,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn setup(image: usize, patch: usize) -> (ParamStore, PatchEncoder) {
        let cfg = ModelConfig {
            hidden: 8,
            heads: 2,
            ffn: 16,
            image_size: image,
            patch_size: patch,
            vit_layers: 1,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = PatchEncoder::new(&mut store, &mut rng, &cfg);
        (store, enc)
    }

    fn image(n: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_shape_simple_fn((n, n), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn output_length_is_patches_plus_one() {
        let (store, enc) = setup(32, 16);
        let mut t = Tape::new(&store);
        let v = enc.encode(&mut t, &image(32, 0), 0.0).unwrap();
        assert_eq!(v.num_patches, 4);
        assert_eq!(t.shape(v.states), (5, 8));
        assert_eq!(t.shape(v.cls), (1, 8));
    }

    #[test]
    fn patch_count_arithmetic() {
        let img = Mat::zeros((224, 224));
        assert_eq!(patchify(&img, 16).unwrap().nrows(), 196);
        assert!(patchify(&Mat::zeros((30, 32)), 8).is_err());
    }

    #[test]
    fn deterministic_and_weight_shared() {
        let (mut store, enc) = setup(16, 8);
        let (a, b) = (image(16, 1), image(16, 2));
        let run = |store: &ParamStore, img: &Mat| {
            let mut t = Tape::new(store);
            let v = enc.encode(&mut t, img, 0.0).unwrap();
            t.value(v.states).clone()
        };
        let (a0, b0) = (run(&store, &a), run(&store, &b));
        assert_eq!(a0, run(&store, &a));
        let id = store.id("backbone.patch.weight").unwrap();
        store.get_mut(id)[[0, 0]] += 0.5;
        assert_ne!(a0, run(&store, &a));
        assert_ne!(b0, run(&store, &b));
    }
}
