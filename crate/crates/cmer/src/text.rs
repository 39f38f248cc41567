//! Text tower: frozen token and position embeddings, frozen pre-norm blocks
//! carrying trainable low-rank adapters on their query and value projections,
//! and a trainable projection of the end-of-sequence row into the shared
//! embedding space.

use cmer_autodiff::ops;
use cmer_autodiff::{Tape, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{block_forward, trunc_normal, BlockParams, ParamMap, INIT_STD};
use crate::config::RunConfig;
use crate::data::{BOS, EOS};
use crate::error::{Error, Result};

/// Text tower parameters. The backbone is frozen at construction in every
/// strategy; adapters and the output projection are the trainable set.
pub struct TextParams {
    pub embed: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockParams>,
    pub proj: Tensor,
    /// Embedding rows excluded from gradient flow even if the table thaws;
    /// holds the scene-prompt token ids, sorted.
    pub frozen_rows: Vec<usize>,
    pub max_len: usize,
}

impl TextParams {
    pub fn new(
        rng: &mut ChaCha8Rng,
        cfg: &RunConfig,
        vocab_size: usize,
        mut frozen_rows: Vec<usize>,
    ) -> TextParams {
        frozen_rows.sort_unstable();
        frozen_rows.dedup();
        let w = cfg.text_width;
        TextParams {
            embed: Tensor::from_vec(trunc_normal(rng, vocab_size * w, INIT_STD), &[vocab_size, w])
                .expect("sampled data matches shape"),
            pos: Tensor::from_vec(trunc_normal(rng, cfg.max_len * w, INIT_STD), &[cfg.max_len, w])
                .expect("sampled data matches shape"),
            blocks: (0..cfg.text_depth)
                .map(|_| {
                    BlockParams::new(
                        rng,
                        w,
                        cfg.text_heads,
                        cfg.text_mlp_ratio,
                        false,
                        Some((cfg.lora_rank, cfg.lora_alpha)),
                    )
                })
                .collect(),
            proj: Tensor::param(trunc_normal(rng, w * cfg.embed_dim, INIT_STD), &[w, cfg.embed_dim])
                .expect("sampled data matches shape"),
            frozen_rows,
            max_len: cfg.max_len,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.shape()[0]
    }

    pub fn collect(&self, out: &mut ParamMap) {
        out.insert("text.embed".into(), self.embed.clone());
        out.insert("text.pos".into(), self.pos.clone());
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("text.block{i}"), out);
        }
        out.insert("text.proj".into(), self.proj.clone());
    }
}

/// Looks up token rows and adds position rows: row `j` of the result is
/// `embed[tokens[j]] + pos[j]`. The sequence must be framed by the reserved
/// begin and end markers and fit within the configured length.
pub fn embed_tokens(tape: &mut Tape, tokens: &[usize], p: &TextParams) -> Result<Tensor> {
    if tokens.len() < 2 || tokens[0] != BOS || *tokens.last().unwrap() != EOS {
        return Err(Error::Contract(format!(
            "token sequence must start with id {BOS} and end with id {EOS}, got {tokens:?}"
        )));
    }
    if tokens.len() > p.max_len {
        return Err(Error::Contract(format!(
            "sequence of {} tokens exceeds max_len {}",
            tokens.len(),
            p.max_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= p.vocab_size()) {
        return Err(Error::Vocab(format!(
            "token id {bad} outside vocabulary of {}",
            p.vocab_size()
        )));
    }
    let rows = ops::embedding_lookup(tape, &p.embed, tokens, &p.frozen_rows)?;
    let pos = ops::slice(tape, &p.pos, 0, 0, tokens.len())?;
    Ok(ops::add(tape, &rows, &pos)?)
}

/// Encodes a framed token sequence to the unit-norm text embedding: embed,
/// run every block, project the end-of-sequence row, normalize.
pub fn encode_text(tape: &mut Tape, tokens: &[usize], p: &TextParams) -> Result<Tensor> {
    tape.set_scope("text.embed");
    let mut x = embed_tokens(tape, tokens, p)?;
    for (i, b) in p.blocks.iter().enumerate() {
        tape.set_scope(&format!("text.block{i}"));
        x = block_forward(tape, &x, b)?;
    }
    tape.set_scope("text.head");
    let eos_row = ops::slice(tape, &x, 0, tokens.len() - 1, 1)?;
    let e = ops::matmul(tape, &eos_row, &p.proj)?;
    let e = ops::reshape(tape, &e, &[p.proj.shape()[1]])?;
    let e = ops::l2_normalize(tape, &e, 0)?;
    tape.set_scope("");
    Ok(e)
}
