//! Training: strategy-specific model assembly, AdamW, the step loop with
//! queue recycling, per-step metrics, validation checkpointing, bit-exact
//! resume, and the three-way efficiency profile.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use cmer_autodiff::{ops, MemoryReport, Tape, Tensor};

use crate::blocks::ParamMap;
use crate::checkpoint::{Checkpoint, CheckpointMeta, QueueState};
use crate::config::{RunConfig, Strategy};
use crate::data::{caption_for_epoch, make_batches, split_indices, Dataset, Split, Vocab};
use crate::error::{Error, Result};
use crate::eval::evaluate_over;
use crate::focus::{encode_image_with_side_branch, FocusParams};
use crate::loss::{log_tau_param, total_loss, NegativeQueue};
use crate::text::{encode_text, TextParams};
use crate::vision::{encode_image, VisionParams};

/// Parameter initialization draws from a salted stream so it never shares
/// state with batch shuffling, which uses the plain seed.
const INIT_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Temperature is clamped into this range after every optimizer step.
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 100.0;

/// The assembled two-tower model. Which pieces exist and which are trainable
/// follows entirely from the strategy:
///
/// * `side_branch`: vision tower fully frozen (projection included), all
///   learning in the side ladder; no vision LoRA.
/// * `lora_backbone`: vision tower frozen with LoRA on the attention q/v
///   projections, vision projection trainable; no ladder.
/// * `full_finetune`: whole vision tower trainable; no LoRA, no ladder.
///
/// The text tower is identical in all three: frozen backbone, LoRA on q/v,
/// trainable projection, scene-prompt embedding rows pinned.
pub struct Model {
    pub cfg: RunConfig,
    pub vision: VisionParams,
    pub text: TextParams,
    pub focus: Option<FocusParams>,
    pub log_tau: Tensor,
}

impl Model {
    pub fn new(cfg: &RunConfig, vocab: &Vocab, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ INIT_SEED_SALT);
        let (backbone_trainable, proj_trainable, lora, with_ladder) = match cfg.strategy {
            Strategy::SideBranch => (false, false, None, true),
            Strategy::LoraBackbone => (false, true, Some((cfg.lora_rank, cfg.lora_alpha)), false),
            Strategy::FullFinetune => (true, true, None, false),
        };
        let vision = VisionParams::new(&mut rng, cfg, backbone_trainable, proj_trainable, lora);
        let focus = with_ladder.then(|| FocusParams::new(&mut rng, cfg));
        let text = TextParams::new(&mut rng, cfg, vocab.len(), vocab.frozen_rows());
        Ok(Model {
            cfg: cfg.clone(),
            vision,
            text,
            focus,
            log_tau: log_tau_param(cfg.temperature, cfg.learnable_temperature),
        })
    }

    /// Every named tensor, frozen ones included. The returned handles share
    /// storage with the model, so writing through them updates it.
    pub fn params(&self) -> ParamMap {
        let mut out = ParamMap::new();
        self.vision.collect(&mut out);
        self.text.collect(&mut out);
        if let Some(f) = &self.focus {
            f.collect(&mut out);
        }
        out.insert("loss.log_tau".into(), self.log_tau.clone());
        out
    }

    pub fn trainable(&self) -> ParamMap {
        self.params()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect()
    }

    pub fn count_trainable(&self) -> usize {
        self.trainable().values().map(Tensor::numel).sum()
    }

    pub fn encode_image(&self, tape: &mut Tape, image: &Tensor) -> Result<Tensor> {
        match &self.focus {
            Some(f) => encode_image_with_side_branch(tape, image, &self.vision, f),
            None => Ok(encode_image(tape, image, &self.vision)?.0),
        }
    }

    pub fn encode_text(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Tensor> {
        encode_text(tape, tokens, &self.text)
    }

    /// Overwrites every parameter with checkpointed values.
    pub fn load_tensors(&mut self, ck: &Checkpoint) -> Result<()> {
        for (name, tensor) in self.params() {
            let (shape, data) = ck.tensor(&name)?;
            if shape != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: checkpoint shape {shape:?} vs model {:?}",
                    tensor.shape()
                )));
            }
            tensor.data_mut().copy_from_slice(data);
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam with bias correction. Gradients are validated
/// before anything is written, so a numeric failure never leaves the model
/// half-updated.
#[derive(Default)]
pub struct AdamW {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
}

impl AdamW {
    pub fn new() -> AdamW {
        AdamW::default()
    }

    pub fn step(&mut self, trainable: &ParamMap, cfg: &RunConfig, lr: f64) -> Result<()> {
        let mut grads: Vec<(&String, &Tensor, Vec<f64>)> = Vec::with_capacity(trainable.len());
        for (name, p) in trainable {
            let g = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {bad} in {name} at optimizer step {}",
                    self.t + 1
                )));
            }
            grads.push((name, p, g));
        }
        self.t += 1;
        let b1 = cfg.adam_beta1;
        let b2 = cfg.adam_beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (name, p, g) in grads {
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let mut data = p.data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.adam_eps);
                data[i] -= lr * (update + cfg.weight_decay * data[i]);
            }
        }
        Ok(())
    }
}

/// One line of the JSON metrics log.
#[derive(Debug, Clone, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    #[serde(rename = "L_batch")]
    pub l_batch: f64,
    #[serde(rename = "L_queue")]
    pub l_queue: f64,
    pub saved_bytes: u64,
    pub pairs_per_s: f64,
}

pub struct TrainOutcome {
    pub metrics: Vec<StepMetrics>,
    pub val_mr_by_epoch: Vec<(usize, f64)>,
    pub best_val_mr: f64,
    pub best_checkpoint: Option<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
    /// Largest absolute gradient observed on any scene-prompt embedding row
    /// across the whole run; stays exactly zero while those rows are pinned.
    pub max_scene_row_grad: f64,
    pub steps_run: usize,
}

struct StepOutput {
    loss: f64,
    l_batch: f64,
    l_queue: f64,
    saved_bytes: u64,
    report: MemoryReport,
}

/// One full optimization step: encode the batch on a fresh tape, take the
/// loss, backpropagate, update, clamp the temperature, then recycle the
/// detached batch embeddings into the queues.
#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &Model,
    dataset: &Dataset,
    samples: &[usize],
    caption_slot: usize,
    trainable: &ParamMap,
    opt: &mut AdamW,
    q_v: &mut NegativeQueue,
    q_s: &mut NegativeQueue,
    lr: f64,
    max_scene_row_grad: &mut f64,
) -> Result<StepOutput> {
    let dim = model.cfg.embed_dim;
    let mut tape = Tape::new();

    let mut v_rows = Vec::with_capacity(samples.len());
    let mut s_rows = Vec::with_capacity(samples.len());
    let mut scenes = Vec::with_capacity(samples.len());
    for &s in samples {
        let v = model.encode_image(&mut tape, &dataset.images[s])?;
        v_rows.push(ops::reshape(&mut tape, &v, &[1, dim])?);
        let tokens = dataset.token_sequence(s, caption_slot, &model.cfg)?;
        let t = model.encode_text(&mut tape, &tokens)?;
        s_rows.push(ops::reshape(&mut tape, &t, &[1, dim])?);
        scenes.push(dataset.scene_ids[s]);
    }
    let v_refs: Vec<&Tensor> = v_rows.iter().collect();
    let s_refs: Vec<&Tensor> = s_rows.iter().collect();
    let v_batch = ops::concat(&mut tape, &v_refs, 0)?;
    let s_batch = ops::concat(&mut tape, &s_refs, 0)?;

    let (total, l_batch, l_queue) = total_loss(
        &mut tape,
        &v_batch,
        &s_batch,
        &scenes,
        q_v,
        q_s,
        &model.log_tau,
        &model.cfg,
    )?;
    let loss = total.item();
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss became {loss}")));
    }
    let report = tape.report();
    let saved_bytes = report.total_saved_bytes;

    tape.backward(&total)?;

    if let Some(g) = model.text.embed.grad() {
        let w = model.text.embed.shape()[1];
        for &row in &model.text.frozen_rows {
            for x in &g[row * w..(row + 1) * w] {
                *max_scene_row_grad = max_scene_row_grad.max(x.abs());
            }
        }
    }

    opt.step(trainable, &model.cfg, lr)?;

    {
        let mut lt = model.log_tau.data_mut();
        lt[0] = lt[0].clamp(TAU_MIN.ln(), TAU_MAX.ln());
    }

    let v_data = v_batch.to_vec();
    let s_data = s_batch.to_vec();
    for (i, &scene) in scenes.iter().enumerate() {
        let v_i = Tensor::from_vec(v_data[i * dim..(i + 1) * dim].to_vec(), &[dim])?;
        q_v.push(&v_i, scene)?;
        let s_i = Tensor::from_vec(s_data[i * dim..(i + 1) * dim].to_vec(), &[dim])?;
        q_s.push(&s_i, scene)?;
    }

    for p in trainable.values() {
        p.zero_grad();
    }

    Ok(StepOutput {
        loss,
        l_batch,
        l_queue,
        saved_bytes,
        report,
    })
}

fn warmup_lr(cfg: &RunConfig, step: usize) -> f64 {
    if cfg.warmup_steps > 0 {
        cfg.learning_rate * ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
    } else {
        cfg.learning_rate
    }
}

fn build_checkpoint(
    model: &Model,
    opt: &AdamW,
    q_v: &NegativeQueue,
    q_s: &NegativeQueue,
    step: usize,
    seed: u64,
    best_val_mr: f64,
    vocab: &Vocab,
) -> Checkpoint {
    let dim = model.cfg.embed_dim;
    let mut tensors = BTreeMap::new();
    for (name, t) in model.params() {
        tensors.insert(name, (t.shape().to_vec(), t.to_vec()));
    }
    for (name, m) in &opt.m {
        tensors.insert(format!("adam.m.{name}"), (vec![m.len()], m.clone()));
    }
    for (name, v) in &opt.v {
        tensors.insert(format!("adam.v.{name}"), (vec![v.len()], v.clone()));
    }
    let mut queue_state = |tag: &str, q: &NegativeQueue| {
        let (flat, scenes, ages, pushed) = q.snapshot();
        tensors.insert(
            format!("queue_{tag}.embeddings"),
            (vec![scenes.len(), dim], flat),
        );
        QueueState {
            capacity: q.capacity(),
            scenes,
            ages,
            pushed,
        }
    };
    let queue_v = queue_state("v", q_v);
    let queue_s = queue_state("s", q_s);
    Checkpoint {
        meta: CheckpointMeta {
            config: model.cfg.clone(),
            step: step as u64,
            seed,
            adam_t: opt.t,
            best_val_mr,
            vocab: vocab.to_map().clone(),
            queue_v,
            queue_s,
        },
        tensors,
    }
}

/// Rebuilds a training state (model, optimizer, queues, step counter, best
/// validation score) from a checkpoint. The dataset must carry the same
/// vocabulary the run was started with.
pub fn resume_state(
    ck: &Checkpoint,
    dataset: &Dataset,
) -> Result<(Model, AdamW, NegativeQueue, NegativeQueue, usize, f64)> {
    if dataset.vocab.to_map() != &ck.meta.vocab {
        return Err(Error::Checkpoint(
            "dataset vocabulary differs from the checkpointed one".into(),
        ));
    }
    let mut model = Model::new(&ck.meta.config, &dataset.vocab, ck.meta.seed)?;
    model.load_tensors(ck)?;
    let mut opt = AdamW::new();
    opt.t = ck.meta.adam_t;
    for (name, p) in model.trainable() {
        if let Ok((_, data)) = ck.tensor(&format!("adam.m.{name}")) {
            if data.len() != p.numel() {
                return Err(Error::Checkpoint(format!("moment size mismatch for {name}")));
            }
            opt.m.insert(name.clone(), data.to_vec());
        }
        if let Ok((_, data)) = ck.tensor(&format!("adam.v.{name}")) {
            opt.v.insert(name.clone(), data.to_vec());
        }
    }
    let restore = |tag: &str, st: &QueueState| -> Result<NegativeQueue> {
        let (_, flat) = ck.tensor(&format!("queue_{tag}.embeddings"))?;
        NegativeQueue::restore(st.capacity, flat, &st.scenes, &st.ages, st.pushed)
    };
    let q_v = restore("v", &ck.meta.queue_v)?;
    let q_s = restore("s", &ck.meta.queue_s)?;
    Ok((
        model,
        opt,
        q_v,
        q_s,
        ck.meta.step as usize,
        ck.meta.best_val_mr,
    ))
}

/// Runs (or resumes) a training job. `out` takes the final checkpoint; the
/// best-validation checkpoint lands next to it with a `.best.cmck` suffix.
/// Per-epoch validation scores query the validation split against itself,
/// which keeps the model-selection signal cheap; full-corpus numbers come
/// from evaluation proper.
///
/// On a numeric failure the last fully-applied state is checkpointed to
/// `out` before the error is returned, so nothing is lost.
pub fn train(
    cfg: &RunConfig,
    dataset: &Dataset,
    out: Option<&Path>,
    metrics_path: Option<&Path>,
    resume: Option<&Checkpoint>,
) -> Result<(Model, TrainOutcome)> {
    let (model, mut opt, mut q_v, mut q_s, start_step, mut best_val_mr) = match resume {
        Some(ck) => resume_state(ck, dataset)?,
        None => {
            let model = Model::new(cfg, &dataset.vocab, cfg.seed)?;
            let cap = cfg.queue_mult * cfg.batch_size;
            (
                model,
                AdamW::new(),
                NegativeQueue::new(cap),
                NegativeQueue::new(cap),
                0,
                f64::NEG_INFINITY,
            )
        }
    };
    let cfg = model.cfg.clone();
    let seed = cfg.seed;

    let train_idx = split_indices(dataset.len(), Split::Train);
    let bpe = train_idx.len() / cfg.batch_size;
    if bpe == 0 {
        return Err(Error::Config(format!(
            "training split has {} samples, fewer than one batch of {}",
            train_idx.len(),
            cfg.batch_size
        )));
    }
    let total_steps = if cfg.steps > 0 { cfg.steps } else { cfg.epochs * bpe };
    let val_idx = split_indices(dataset.len(), Split::Val);

    let mut metrics_file = match metrics_path {
        Some(p) => Some(fs::File::create(p)?),
        None => None,
    };
    let best_path = out.map(|p| p.with_extension("best.cmck"));

    let trainable = model.trainable();
    let mut metrics = Vec::new();
    let mut val_history = Vec::new();
    let mut best_checkpoint = None;
    let mut max_scene_row_grad = 0.0_f64;

    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut batches_epoch = usize::MAX;
    for step in start_step..total_steps {
        let epoch = step / bpe;
        if epoch != batches_epoch {
            batches = make_batches(train_idx.len(), cfg.batch_size, seed, epoch)?;
            batches_epoch = epoch;
        }
        let samples: Vec<usize> = batches[step % bpe].iter().map(|&p| train_idx[p]).collect();

        let t0 = Instant::now();
        let stepped = train_step(
            &model,
            dataset,
            &samples,
            caption_for_epoch(epoch),
            &trainable,
            &mut opt,
            &mut q_v,
            &mut q_s,
            warmup_lr(&cfg, step),
            &mut max_scene_row_grad,
        );
        let s = match stepped {
            Ok(s) => s,
            Err(e @ Error::Numeric(_)) => {
                if let Some(path) = out {
                    build_checkpoint(&model, &opt, &q_v, &q_s, step, seed, best_val_mr, &dataset.vocab)
                        .save(path)?;
                    eprintln!("numeric failure at step {step}; last good state saved to {}", path.display());
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let elapsed = t0.elapsed().as_secs_f64();
        let line = StepMetrics {
            step,
            loss: s.loss,
            l_batch: s.l_batch,
            l_queue: s.l_queue,
            saved_bytes: s.saved_bytes,
            pairs_per_s: cfg.batch_size as f64 / elapsed.max(1e-12),
        };
        if let Some(f) = metrics_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&line)?)?;
        }
        metrics.push(line);

        let epoch_end = (step + 1) % bpe == 0;
        let run_end = step + 1 == total_steps;
        if (epoch_end || run_end) && !val_idx.is_empty() {
            let ev = evaluate_over(&model, dataset, &val_idx, Some(&val_idx), &cfg)?;
            val_history.push((epoch, ev.result.mr));
            if ev.result.mr > best_val_mr {
                best_val_mr = ev.result.mr;
                if let Some(path) = &best_path {
                    build_checkpoint(&model, &opt, &q_v, &q_s, step + 1, seed, best_val_mr, &dataset.vocab)
                        .save(path)?;
                    best_checkpoint = Some(path.clone());
                }
            }
        }
    }

    let final_checkpoint = match out {
        Some(path) => {
            build_checkpoint(&model, &opt, &q_v, &q_s, total_steps, seed, best_val_mr, &dataset.vocab)
                .save(path)?;
            Some(path.to_path_buf())
        }
        None => None,
    };

    Ok((
        model,
        TrainOutcome {
            metrics,
            val_mr_by_epoch: val_history,
            best_val_mr,
            best_checkpoint,
            final_checkpoint,
            max_scene_row_grad,
            steps_run: total_steps.saturating_sub(start_step),
        },
    ))
}

/// Per-strategy resource profile. Field names are part of the report
/// contract.
#[derive(Debug, Clone, Serialize)]
pub struct EfficiencyReport {
    pub strategy: String,
    pub trainable_params: usize,
    pub saved_activation_bytes: u64,
    pub throughput_pairs_per_s: f64,
    pub by_scope: BTreeMap<String, u64>,
    pub config: RunConfig,
}

pub const PROFILE_WARMUP_STEPS: usize = 5;
pub const PROFILE_TIMED_STEPS: usize = 10;

fn profile_one(cfg: &RunConfig, dataset: &Dataset) -> Result<EfficiencyReport> {
    let model = Model::new(cfg, &dataset.vocab, cfg.seed)?;
    let trainable = model.trainable();
    let mut opt = AdamW::new();
    let cap = cfg.queue_mult * cfg.batch_size;
    let mut q_v = NegativeQueue::new(cap);
    let mut q_s = NegativeQueue::new(cap);
    let train_idx = split_indices(dataset.len(), Split::Train);
    let batches = make_batches(train_idx.len(), cfg.batch_size, cfg.seed, 0)?;
    if batches.is_empty() {
        return Err(Error::Config(
            "profiling needs at least one full training batch".into(),
        ));
    }
    let mut saved_bytes = 0;
    let mut by_scope = BTreeMap::new();
    let mut timed = 0.0;
    let mut sink = 0.0;
    for step in 0..PROFILE_WARMUP_STEPS + PROFILE_TIMED_STEPS {
        let samples: Vec<usize> = batches[step % batches.len()]
            .iter()
            .map(|&p| train_idx[p])
            .collect();
        let t0 = Instant::now();
        let s = train_step(
            &model,
            dataset,
            &samples,
            caption_for_epoch(0),
            &trainable,
            &mut opt,
            &mut q_v,
            &mut q_s,
            warmup_lr(cfg, step),
            &mut sink,
        )?;
        let elapsed = t0.elapsed().as_secs_f64();
        if step == 0 {
            saved_bytes = s.saved_bytes;
            by_scope = s.report.by_scope;
        }
        if step >= PROFILE_WARMUP_STEPS {
            timed += elapsed;
        }
    }
    Ok(EfficiencyReport {
        strategy: cfg.strategy.tag().to_string(),
        trainable_params: model.count_trainable(),
        saved_activation_bytes: saved_bytes,
        throughput_pairs_per_s: (PROFILE_TIMED_STEPS * cfg.batch_size) as f64 / timed.max(1e-12),
        by_scope,
        config: cfg.clone(),
    })
}

/// Profiles all three strategies on the same data and enforces the memory
/// contract: saved activation bytes must strictly increase from the side
/// ladder to LoRA to full finetuning. Throughput is reported but not
/// asserted; it depends on the host.
pub fn profile_strategies(cfg: &RunConfig, dataset: &Dataset) -> Result<Vec<EfficiencyReport>> {
    let mut reports = Vec::new();
    for strategy in [
        Strategy::SideBranch,
        Strategy::LoraBackbone,
        Strategy::FullFinetune,
    ] {
        let mut c = cfg.clone();
        c.strategy = strategy;
        reports.push(profile_one(&c, dataset)?);
    }
    if !(reports[0].saved_activation_bytes < reports[1].saved_activation_bytes
        && reports[1].saved_activation_bytes < reports[2].saved_activation_bytes)
    {
        let mut msg = String::from("saved-activation ordering violated:\n");
        for r in &reports {
            let _ = writeln!(
                msg,
                "  {}: {} bytes\n    by scope: {:?}",
                r.strategy, r.saved_activation_bytes, r.by_scope
            );
        }
        return Err(Error::Contract(msg));
    }
    Ok(reports)
}
