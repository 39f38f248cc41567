//! Vision tower: non-overlapping patch extraction, a learned class token with
//! positional embeddings, a stack of pre-norm blocks, and a projection of the
//! class row into the shared embedding space.

use cmer_autodiff::ops;
use cmer_autodiff::{Tape, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{block_forward, trunc_normal, BlockParams, ParamMap, INIT_STD};
use crate::config::RunConfig;
use crate::error::{Error, Result};

/// Splits a `[channels, size, size]` image into a `[grid*grid, patch*patch*channels]`
/// matrix of flattened non-overlapping patches. Patches are ordered row-major
/// over the grid; within a patch the layout is channel blocks, each row-major.
/// The input is untouched and the mapping is lossless.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    if image.ndim() != 3 {
        return Err(Error::Data(format!(
            "patchify expects a [channels, size, size] image, got {:?}",
            image.shape()
        )));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if h != w || patch == 0 || h % patch != 0 {
        return Err(Error::Data(format!(
            "patch size {patch} does not tile a {h}x{w} image"
        )));
    }
    let grid = h / patch;
    let data = image.data();
    let mut out = Vec::with_capacity(grid * grid * patch * patch * c);
    for gi in 0..grid {
        for gj in 0..grid {
            for ch in 0..c {
                for pi in 0..patch {
                    for pj in 0..patch {
                        let row = gi * patch + pi;
                        let col = gj * patch + pj;
                        out.push(data[ch * h * w + row * w + col]);
                    }
                }
            }
        }
    }
    Tensor::from_vec(out, &[grid * grid, patch * patch * c]).map_err(Error::from)
}

/// Inverse of `patchify`; used to verify the mapping loses nothing.
pub fn unpatchify(patches: &Tensor, channels: usize, size: usize, patch: usize) -> Result<Tensor> {
    let grid = size / patch;
    if patches.shape() != [grid * grid, patch * patch * channels] {
        return Err(Error::Data(format!(
            "unpatchify got {:?}, want [{}, {}]",
            patches.shape(),
            grid * grid,
            patch * patch * channels
        )));
    }
    let data = patches.data();
    let mut out = vec![0.0; channels * size * size];
    for gi in 0..grid {
        for gj in 0..grid {
            let base = (gi * grid + gj) * patch * patch * channels;
            for ch in 0..channels {
                for pi in 0..patch {
                    for pj in 0..patch {
                        let row = gi * patch + pi;
                        let col = gj * patch + pj;
                        out[ch * size * size + row * size + col] =
                            data[base + ch * patch * patch + pi * patch + pj];
                    }
                }
            }
        }
    }
    Tensor::from_vec(out, &[channels, size, size]).map_err(Error::from)
}

/// Vision tower parameters. `trainable` freezes or thaws every base weight at
/// construction; adapters, when requested, stay trainable regardless.
pub struct VisionParams {
    pub patch_embed: Tensor,
    pub cls: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockParams>,
    pub proj: Tensor,
    pub patch: usize,
}

impl VisionParams {
    pub fn new(
        rng: &mut ChaCha8Rng,
        cfg: &RunConfig,
        trainable: bool,
        proj_trainable: bool,
        lora: Option<(usize, f64)>,
    ) -> VisionParams {
        let w = cfg.vision_width;
        let pdim = cfg.patch_size * cfg.patch_size * cfg.channels;
        let seq = cfg.vision_seq();
        let mk = |rng: &mut ChaCha8Rng, shape: &[usize], train: bool| {
            let numel = shape.iter().product();
            let data = trunc_normal(rng, numel, INIT_STD);
            if train {
                Tensor::param(data, shape).expect("sampled data matches shape")
            } else {
                Tensor::from_vec(data, shape).expect("sampled data matches shape")
            }
        };
        VisionParams {
            patch_embed: mk(rng, &[pdim, w], trainable),
            cls: mk(rng, &[1, w], trainable),
            pos: mk(rng, &[seq, w], trainable),
            blocks: (0..cfg.vision_depth)
                .map(|_| BlockParams::new(rng, w, cfg.vision_heads, cfg.vision_mlp_ratio, trainable, lora))
                .collect(),
            proj: mk(rng, &[w, cfg.embed_dim], proj_trainable),
            patch: cfg.patch_size,
        }
    }

    pub fn collect(&self, out: &mut ParamMap) {
        out.insert("vision.patch_embed".into(), self.patch_embed.clone());
        out.insert("vision.cls".into(), self.cls.clone());
        out.insert("vision.pos".into(), self.pos.clone());
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("vision.block{i}"), out);
        }
        out.insert("vision.proj".into(), self.proj.clone());
    }
}

/// Projects patches, prepends the class token, and adds positions:
/// the `[grid*grid+1, width]` input to the first block.
pub fn embed_sequence(tape: &mut Tape, image: &Tensor, p: &VisionParams) -> Result<Tensor> {
    let patches = patchify(image, p.patch)?;
    let tokens = ops::matmul(tape, &patches, &p.patch_embed)?;
    let seq = ops::concat(tape, &[&p.cls, &tokens], 0)?;
    Ok(ops::add(tape, &seq, &p.pos)?)
}

/// Runs the full tower. Returns the unit-norm image embedding together with
/// the per-depth sequence states: index 0 is the embedded input, index `d`
/// the output of block `d-1`. The trailing states feed the side branch.
pub fn encode_image(
    tape: &mut Tape,
    image: &Tensor,
    p: &VisionParams,
) -> Result<(Tensor, Vec<Tensor>)> {
    let mut states = Vec::with_capacity(p.blocks.len() + 1);
    tape.set_scope("vision.embed");
    let mut x = embed_sequence(tape, image, p)?;
    states.push(x.clone());
    for (i, b) in p.blocks.iter().enumerate() {
        tape.set_scope(&format!("vision.block{i}"));
        x = block_forward(tape, &x, b)?;
        states.push(x.clone());
    }
    tape.set_scope("vision.head");
    let cls = ops::slice(tape, &x, 0, 0, 1)?;
    let e = ops::matmul(tape, &cls, &p.proj)?;
    let e = ops::reshape(tape, &e, &[p.proj.shape()[1]])?;
    let e = ops::l2_normalize(tape, &e, 0)?;
    tape.set_scope("");
    Ok((e, states))
}
