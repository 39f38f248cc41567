//! Training objective: cosine similarity, FIFO negative queues with
//! scene-category filtering, a difficulty-weighted hinge loss over recycled
//! negatives, a symmetric in-batch InfoNCE term with learnable temperature,
//! and their sum.
//!
//! Queue entries are plain value snapshots, never tape members, so the
//! negative pool adds no activation memory and no gradient paths.

use std::collections::VecDeque;

use cmer_autodiff::ops;
use cmer_autodiff::{Tape, Tensor};

use crate::config::RunConfig;
use crate::error::{Error, Result};

/// One recycled embedding: the value snapshot, its scene category, and the
/// running push index it was stored at.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueEntry {
    pub embedding: Vec<f64>,
    pub scene_id: usize,
    pub age: u64,
}

/// Bounded FIFO of detached embeddings. Eviction is strictly oldest-first;
/// a zero-capacity queue stays empty forever.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    entries: VecDeque<QueueEntry>,
    pushed: u64,
}

impl NegativeQueue {
    pub fn new(capacity: usize) -> NegativeQueue {
        NegativeQueue {
            capacity,
            entries: VecDeque::with_capacity(capacity),
            pushed: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    /// Appends one embedding snapshot. The tensor must be off-tape; detach
    /// before pushing.
    pub fn push(&mut self, embedding: &Tensor, scene_id: usize) -> Result<()> {
        if embedding.is_taped() {
            return Err(Error::Contract(
                "queue embeddings must be detached from the tape before pushing".into(),
            ));
        }
        let entry = QueueEntry {
            embedding: embedding.to_vec(),
            scene_id,
            age: self.pushed,
        };
        self.pushed += 1;
        if self.capacity == 0 {
            return Ok(());
        }
        self.entries.push_back(entry);
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    /// Appends a batch in order, evicting oldest entries past capacity.
    pub fn push_batch(&mut self, embeddings: &[Tensor], scene_ids: &[usize]) -> Result<()> {
        if embeddings.len() != scene_ids.len() {
            return Err(Error::Contract(format!(
                "{} embeddings with {} scene ids",
                embeddings.len(),
                scene_ids.len()
            )));
        }
        for (e, &s) in embeddings.iter().zip(scene_ids) {
            self.push(e, s)?;
        }
        Ok(())
    }

    /// Entries whose scene differs from the positive's, in queue order.
    pub fn negatives_for(&self, positive_scene: usize) -> Vec<&QueueEntry> {
        self.entries
            .iter()
            .filter(|e| e.scene_id != positive_scene)
            .collect()
    }

    /// Flattens the queue state for checkpointing.
    pub fn snapshot(&self) -> (Vec<f64>, Vec<usize>, Vec<u64>, u64) {
        let flat = self
            .entries
            .iter()
            .flat_map(|e| e.embedding.iter().copied())
            .collect();
        let scenes = self.entries.iter().map(|e| e.scene_id).collect();
        let ages = self.entries.iter().map(|e| e.age).collect();
        (flat, scenes, ages, self.pushed)
    }

    /// Rebuilds a queue from checkpointed state.
    pub fn restore(
        capacity: usize,
        flat: &[f64],
        scenes: &[usize],
        ages: &[u64],
        pushed: u64,
    ) -> Result<NegativeQueue> {
        if scenes.len() != ages.len() || (scenes.is_empty() && !flat.is_empty()) {
            return Err(Error::Checkpoint("inconsistent queue state".into()));
        }
        let dim = if scenes.is_empty() { 0 } else { flat.len() / scenes.len() };
        if dim * scenes.len() != flat.len() {
            return Err(Error::Checkpoint("queue payload does not divide evenly".into()));
        }
        let entries = scenes
            .iter()
            .zip(ages)
            .enumerate()
            .map(|(i, (&scene_id, &age))| QueueEntry {
                embedding: flat[i * dim..(i + 1) * dim].to_vec(),
                scene_id,
                age,
            })
            .collect();
        Ok(NegativeQueue {
            capacity,
            entries,
            pushed,
        })
    }
}

/// `dot(a, b) / (|a| |b|)`, differentiable through both normalizations.
pub fn cosine_similarity(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let na = ops::l2_normalize(tape, a, 0)?;
    let nb = ops::l2_normalize(tape, b, 0)?;
    let prod = ops::mul(tape, &na, &nb)?;
    Ok(ops::sum(tape, &prod)?)
}

/// Hinge terms against one queue: for each scene-filtered negative `q`,
/// `l = [margin - pos + dot(anchor, q)]_+`, weighted by `l * exp(-beta * l)`
/// and summed. Queue snapshots are unit vectors, so the dot is their cosine.
fn queue_side_sum(
    tape: &mut Tape,
    anchor: &Tensor,
    pos: &Tensor,
    negatives: &[&QueueEntry],
    margin: f64,
    beta: f64,
) -> Result<Option<Tensor>> {
    if negatives.is_empty() {
        return Ok(None);
    }
    let dim = anchor.numel();
    let flat: Vec<f64> = negatives
        .iter()
        .flat_map(|e| e.embedding.iter().copied())
        .collect();
    let bank = Tensor::from_vec(flat, &[negatives.len(), dim])?;
    let col = ops::reshape(tape, anchor, &[dim, 1])?;
    let sims = ops::matmul(tape, &bank, &col)?;
    let shifted = ops::sub(tape, &sims, pos)?;
    let margined = ops::add(tape, &shifted, &Tensor::scalar(margin))?;
    let l = ops::clamp_min(tape, &margined, 0.0)?;
    let scaled = ops::scalar_mul(tape, &l, -beta)?;
    let w = ops::exp(tape, &scaled)?;
    let terms = ops::mul(tape, &l, &w)?;
    Ok(Some(ops::sum(tape, &terms)?))
}

/// Recycled-negative loss for one pair: hinge terms of the text anchor
/// against the visual queue plus the image anchor against the semantic
/// queue, each filtered to negatives from other scenes. Zero when both
/// filtered pools are empty. Differentiable w.r.t. the two embeddings only.
pub fn queue_loss(
    tape: &mut Tape,
    s_e: &Tensor,
    v_e: &Tensor,
    q_v: &NegativeQueue,
    q_s: &NegativeQueue,
    scene_id: usize,
    cfg: &RunConfig,
) -> Result<Tensor> {
    let pos = cosine_similarity(tape, s_e, v_e)?;
    let visual = queue_side_sum(
        tape,
        s_e,
        &pos,
        &q_v.negatives_for(scene_id),
        cfg.margin,
        cfg.beta,
    )?;
    let semantic = queue_side_sum(
        tape,
        v_e,
        &pos,
        &q_s.negatives_for(scene_id),
        cfg.margin,
        cfg.beta,
    )?;
    Ok(match (visual, semantic) {
        (Some(a), Some(b)) => ops::add(tape, &a, &b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => Tensor::scalar(0.0),
    })
}

/// Creates the temperature parameter as `log(tau0)`, trainable when asked.
pub fn log_tau_param(tau0: f64, learnable: bool) -> Tensor {
    let data = vec![tau0.ln()];
    if learnable {
        Tensor::param(data, &[1]).expect("one value, shape [1]")
    } else {
        Tensor::from_vec(data, &[1]).expect("one value, shape [1]")
    }
}

/// Temperature value currently held by the log parameter.
pub fn tau_value(log_tau: &Tensor) -> f64 {
    log_tau.data()[0].exp()
}

/// Symmetric in-batch InfoNCE over matched rows of `v_batch`/`s_batch`
/// (`[B, embed_dim]`, unit rows): logits are pairwise dots over temperature;
/// text-to-image probabilities soften over images, image-to-text over texts;
/// the loss is the mean over pairs of minus half the two log-probabilities of
/// the true match.
pub fn infonce_batch_loss(
    tape: &mut Tape,
    v_batch: &Tensor,
    s_batch: &Tensor,
    log_tau: &Tensor,
) -> Result<Tensor> {
    let b = v_batch.shape()[0];
    if s_batch.shape() != v_batch.shape() {
        return Err(Error::Contract(format!(
            "batch shapes differ: {:?} vs {:?}",
            v_batch.shape(),
            s_batch.shape()
        )));
    }
    let st = ops::transpose(tape, s_batch)?;
    let sim = ops::matmul(tape, v_batch, &st)?;
    let neg_log_tau = ops::scalar_mul(tape, log_tau, -1.0)?;
    let inv_tau = ops::exp(tape, &neg_log_tau)?;
    let logits = ops::mul(tape, &sim, &inv_tau)?;
    let p_i2t = ops::softmax(tape, &logits, 1)?;
    let p_t2i = ops::softmax(tape, &logits, 0)?;
    let lp_i2t = ops::log(tape, &p_i2t)?;
    let lp_t2i = ops::log(tape, &p_t2i)?;
    let mut eye = vec![0.0; b * b];
    for i in 0..b {
        eye[i * b + i] = 1.0;
    }
    let eye = Tensor::from_vec(eye, &[b, b])?;
    let d1 = ops::mul(tape, &lp_i2t, &eye)?;
    let d2 = ops::mul(tape, &lp_t2i, &eye)?;
    let diag_sum = ops::add(tape, &d1, &d2)?;
    let total = ops::sum(tape, &diag_sum)?;
    Ok(ops::scalar_mul(tape, &total, -0.5 / b as f64)?)
}

/// Full objective: in-batch InfoNCE plus the batch mean of per-pair recycled
/// -negative losses. Returns the scalar tensor together with the two
/// component values for logging.
pub fn total_loss(
    tape: &mut Tape,
    v_batch: &Tensor,
    s_batch: &Tensor,
    scene_ids: &[usize],
    q_v: &NegativeQueue,
    q_s: &NegativeQueue,
    log_tau: &Tensor,
    cfg: &RunConfig,
) -> Result<(Tensor, f64, f64)> {
    let b = v_batch.shape()[0];
    if scene_ids.len() != b {
        return Err(Error::Contract(format!(
            "{} scene ids for a batch of {b}",
            scene_ids.len()
        )));
    }
    let l_batch = infonce_batch_loss(tape, v_batch, s_batch, log_tau)?;
    let dim = v_batch.shape()[1];
    let mut acc: Option<Tensor> = None;
    for (i, &scene) in scene_ids.iter().enumerate() {
        let v_row = ops::slice(tape, v_batch, 0, i, 1)?;
        let v_i = ops::reshape(tape, &v_row, &[dim])?;
        let s_row = ops::slice(tape, s_batch, 0, i, 1)?;
        let s_i = ops::reshape(tape, &s_row, &[dim])?;
        let ql = queue_loss(tape, &s_i, &v_i, q_v, q_s, scene, cfg)?;
        acc = Some(match acc {
            Some(prev) => ops::add(tape, &prev, &ql)?,
            None => ql,
        });
    }
    let l_queue = ops::scalar_mul(tape, &acc.expect("batch is non-empty"), 1.0 / b as f64)?;
    let total = ops::add(tape, &l_batch, &l_queue)?;
    Ok((total, l_batch.item(), l_queue.item()))
}
