//! Shared harnesses for the integration suites: the finite-difference
//! gradient checker over rebuildable graphs, and the builders for every
//! composite under test. Frozen tensors are skipped by the checker since
//! their analytic gradient is pinned to zero by design while the value still
//! moves when they are perturbed.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cmer::blocks::{block_forward, lora_linear, BlockParams, LoraPair, ParamMap};
use cmer::config::RunConfig;
use cmer::focus::{focus_adapter_step, FocusParams};
use cmer::loss::{infonce_batch_loss, log_tau_param, queue_loss, total_loss, NegativeQueue};
use cmer_autodiff::{grad_check, ops, Tape, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_SEEDS: u64 = 5;

/// Worst elementwise relative error, falling back to absolute error for
/// small-magnitude entries so finite-difference noise is not amplified.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Max relative error between analytic gradients and central differences,
/// across every trainable tensor in `params`. `build` must reconstruct the
/// same scalar graph from the live tensor storage on any tape it is given.
pub fn fd_max_rel_err(params: &[(String, Tensor)], build: &dyn Fn(&mut Tape) -> Tensor) -> f64 {
    let mut tape = Tape::new();
    let out = build(&mut tape);
    assert_eq!(out.numel(), 1, "finite differences need a scalar target");
    tape.backward(&out).expect("backward pass");
    let grads: Vec<Option<Vec<f64>>> = params.iter().map(|(_, p)| p.grad()).collect();
    for (_, p) in params {
        p.zero_grad();
    }
    let mut worst = 0.0_f64;
    for ((name, p), g) in params.iter().zip(grads) {
        if !p.requires_grad() {
            continue;
        }
        let analytic = g.unwrap_or_else(|| vec![0.0; p.numel()]);
        let x0 = p.to_vec();
        let numeric = grad_check::central_diff(
            |x| {
                p.data_mut().copy_from_slice(x);
                let mut t = Tape::inference();
                build(&mut t).item()
            },
            &x0,
            FD_STEP,
        );
        p.data_mut().copy_from_slice(&x0);
        let e = rel_err(&analytic, &numeric);
        assert!(e.is_finite(), "{name}: non-finite comparison");
        worst = worst.max(e);
    }
    worst
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_param(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::param(data, shape).unwrap()
}

pub fn rand_const(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_vec(data, shape).unwrap()
}

pub fn unit_row(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn map_to_vec(map: ParamMap) -> Vec<(String, Tensor)> {
    map.into_iter().collect()
}

/// Masked scalar reduction: `sum(out * mask)` with a fixed random mask, so
/// constant-sum outputs (softmax rows) still produce informative gradients.
fn masked_sum(tape: &mut Tape, out: &Tensor, mask: &Tensor) -> Tensor {
    let prod = ops::mul(tape, out, mask).unwrap();
    ops::sum(tape, &prod).unwrap()
}

/// Finite-difference error for every differentiable primitive, as
/// `(name, worst relative error)` rows.
pub fn fd_primitives(seed: u64) -> Vec<(&'static str, f64)> {
    let mut out: Vec<(&'static str, f64)> = Vec::new();
    let mut check = |name: &'static str, params: Vec<(String, Tensor)>, build: &dyn Fn(&mut Tape) -> Tensor| {
        out.push((name, fd_max_rel_err(&params, build)));
    };
    let named = |ts: &[&Tensor]| -> Vec<(String, Tensor)> {
        ts.iter()
            .enumerate()
            .map(|(i, t)| (format!("p{i}"), (*t).clone()))
            .collect()
    };

    {
        let mut r = rng(seed);
        let a = rand_param(&mut r, &[3, 4], 1.0);
        let b = rand_param(&mut r, &[4, 2], 1.0);
        let mask = rand_const(&mut r, &[3, 2], 1.0);
        check("matmul", named(&[&a, &b]), &move |t| {
            let y = ops::matmul(t, &a, &b).unwrap();
            masked_sum(t, &y, &mask)
        });
    }
    {
        let mut r = rng(seed);
        let a = rand_param(&mut r, &[3, 4], 1.0);
        let b = rand_param(&mut r, &[3, 4], 1.0);
        let s = rand_param(&mut r, &[1], 1.0);
        let mask = rand_const(&mut r, &[3, 4], 1.0);
        check("add", named(&[&a, &b]), &{
            let (a, b, mask) = (a.clone(), b.clone(), mask.clone());
            move |t| {
                let y = ops::add(t, &a, &b).unwrap();
                masked_sum(t, &y, &mask)
            }
        });
        check("add_broadcast_scalar", named(&[&a, &s]), &{
            let (a, s, mask) = (a.clone(), s.clone(), mask.clone());
            move |t| {
                let y = ops::add(t, &a, &s).unwrap();
                masked_sum(t, &y, &mask)
            }
        });
        check("sub", named(&[&a, &b]), &{
            let (a, b, mask) = (a.clone(), b.clone(), mask.clone());
            move |t| {
                let y = ops::sub(t, &a, &b).unwrap();
                masked_sum(t, &y, &mask)
            }
        });
        check("mul", named(&[&a, &b]), &{
            let (a, b, mask) = (a.clone(), b.clone(), mask.clone());
            move |t| {
                let y = ops::mul(t, &a, &b).unwrap();
                masked_sum(t, &y, &mask)
            }
        });
        check("mul_broadcast_scalar", named(&[&a, &s]), &{
            let (a, s, mask) = (a, s, mask);
            move |t| {
                let y = ops::mul(t, &a, &s).unwrap();
                masked_sum(t, &y, &mask)
            }
        });
    }
    {
        let mut r = rng(seed);
        let a = rand_param(&mut r, &[2, 5], 0.8);
        let mask = rand_const(&mut r, &[2, 5], 1.0);
        check("scalar_mul", named(&[&a]), &{
            let (a, mask) = (a.clone(), mask.clone());
            move |t| {
                let y = ops::scalar_mul(t, &a, -1.7).unwrap();
                masked_sum(t, &y, &mask)
            }
        });
        check("exp", named(&[&a]), &{
            let (a, mask) = (a.clone(), mask.clone());
            move |t| {
                let y = ops::exp(t, &a).unwrap();
                masked_sum(t, &y, &mask)
            }
        });
        check("gelu", named(&[&a]), &{
            let (a, mask) = (a.clone(), mask.clone());
            move |t| {
                let y = ops::gelu(t, &a).unwrap();
                masked_sum(t, &y, &mask)
            }
        });
        check("sum", named(&[&a]), &move |t| ops::sum(t, &a).unwrap());
    }
    {
        // positive inputs for log, inputs away from the clamp kink
        let mut r = rng(seed);
        let n = 8;
        let pos: Vec<f64> = (0..n).map(|_| r.gen_range(0.4..2.0)).collect();
        let a = Tensor::param(pos, &[n]).unwrap();
        let mask = rand_const(&mut r, &[n], 1.0);
        check("log", named(&[&a]), &{
            let (a, mask) = (a.clone(), mask.clone());
            move |t| {
                let y = ops::log(t, &a).unwrap();
                masked_sum(t, &y, &mask)
            }
        });
        check("clamp_min", named(&[&a]), &move |t| {
            let y = ops::clamp_min(t, &a, 1.0 + 0.05).unwrap();
            masked_sum(t, &y, &mask)
        });
    }
    {
        let mut r = rng(seed);
        let a = rand_param(&mut r, &[3, 4], 1.0);
        let mask = rand_const(&mut r, &[3, 4], 1.0);
        for axis in [0usize, 1] {
            let name = if axis == 0 { "softmax_axis0" } else { "softmax_axis1" };
            check(name, named(&[&a]), &{
                let (a, mask) = (a.clone(), mask.clone());
                move |t| {
                    let y = ops::softmax(t, &a, axis).unwrap();
                    masked_sum(t, &y, &mask)
                }
            });
        }
        check("l2_normalize_axis1", named(&[&a]), &{
            let (a, mask) = (a.clone(), mask.clone());
            move |t| {
                let y = ops::l2_normalize(t, &a, 1).unwrap();
                masked_sum(t, &y, &mask)
            }
        });
        let v = rand_param(&mut r, &[6], 1.0);
        let vmask = rand_const(&mut r, &[6], 1.0);
        check("l2_normalize_axis0", named(&[&v]), &move |t| {
            let y = ops::l2_normalize(t, &v, 0).unwrap();
            masked_sum(t, &y, &vmask)
        });
    }
    {
        let mut r = rng(seed);
        let x = rand_param(&mut r, &[4, 6], 1.0);
        let gamma = rand_param(&mut r, &[6], 0.5);
        let beta = rand_param(&mut r, &[6], 0.5);
        let mask = rand_const(&mut r, &[4, 6], 1.0);
        check("layer_norm", named(&[&x, &gamma, &beta]), &move |t| {
            let y = ops::layer_norm(t, &x, &gamma, &beta, 1e-5).unwrap();
            masked_sum(t, &y, &mask)
        });
    }
    {
        let mut r = rng(seed);
        let a = rand_param(&mut r, &[2, 3], 1.0);
        let b = rand_param(&mut r, &[4, 3], 1.0);
        let c = rand_param(&mut r, &[2, 5], 1.0);
        let mask0 = rand_const(&mut r, &[6, 3], 1.0);
        let mask1 = rand_const(&mut r, &[2, 8], 1.0);
        check("concat_axis0", named(&[&a, &b]), &{
            let (a, b) = (a.clone(), b.clone());
            move |t| {
                let y = ops::concat(t, &[&a, &b], 0).unwrap();
                masked_sum(t, &y, &mask0)
            }
        });
        check("concat_axis1", named(&[&a, &c]), &{
            let (a, c) = (a.clone(), c);
            move |t| {
                let y = ops::concat(t, &[&a, &c], 1).unwrap();
                masked_sum(t, &y, &mask1)
            }
        });
        let smask = rand_const(&mut r, &[2, 2], 1.0);
        check("slice", named(&[&b]), &{
            let b = b.clone();
            move |t| {
                let rows = ops::slice(t, &b, 0, 1, 2).unwrap();
                let cols = ops::slice(t, &rows, 1, 0, 2).unwrap();
                masked_sum(t, &cols, &smask)
            }
        });
        let rmask = rand_const(&mut r, &[3, 2], 1.0);
        check("reshape", named(&[&a]), &{
            let a = a.clone();
            move |t| {
                let y = ops::reshape(t, &a, &[3, 2]).unwrap();
                masked_sum(t, &y, &rmask)
            }
        });
        let tmask = rand_const(&mut r, &[3, 4], 1.0);
        check("transpose", named(&[&b]), &move |t| {
            let y = ops::transpose(t, &b).unwrap();
            masked_sum(t, &y, &tmask)
        });
    }
    {
        let mut r = rng(seed);
        let table = rand_param(&mut r, &[7, 4], 1.0);
        let mask = rand_const(&mut r, &[4, 4], 1.0);
        check("embedding_lookup", named(&[&table]), &move |t| {
            let y = ops::embedding_lookup(t, &table, &[0, 2, 2, 5], &[]).unwrap();
            masked_sum(t, &y, &mask)
        });
    }
    out
}

/// vit block, fully trainable (no adapters).
pub fn fd_vit_block_trainable(seed: u64) -> f64 {
    let mut r = rng(seed);
    let bp = BlockParams::new(&mut r, 16, 2, 2, true, None);
    let x = rand_param(&mut r, &[5, 16], 0.7);
    let mut map = ParamMap::new();
    bp.collect("blk", &mut map);
    map.insert("x".into(), x.clone());
    let params = map_to_vec(map);
    fd_max_rel_err(&params, &move |t| {
        let y = block_forward(t, &x, &bp).unwrap();
        ops::sum(t, &y).unwrap()
    })
}

/// vit block as the frozen towers use it: body frozen, adapters on q/v.
pub fn fd_vit_block_frozen_lora(seed: u64) -> f64 {
    let mut r = rng(seed);
    let bp = BlockParams::new(&mut r, 16, 2, 2, false, Some((2, 4.0)));
    for lora in [bp.lora_q.as_ref().unwrap(), bp.lora_v.as_ref().unwrap()] {
        let fresh: Vec<f64> = (0..lora.b.numel()).map(|_| r.gen_range(-0.3..0.3)).collect();
        lora.b.data_mut().copy_from_slice(&fresh);
    }
    let x = rand_param(&mut r, &[5, 16], 0.7);
    let mut map = ParamMap::new();
    bp.collect("blk", &mut map);
    map.insert("x".into(), x.clone());
    let params = map_to_vec(map);
    fd_max_rel_err(&params, &move |t| {
        let y = block_forward(t, &x, &bp).unwrap();
        ops::sum(t, &y).unwrap()
    })
}

pub fn fd_vit_block(seed: u64) -> f64 {
    fd_vit_block_trainable(seed).max(fd_vit_block_frozen_lora(seed))
}

/// One ladder rung against central differences, for a windowed and a global
/// field.
pub fn fd_focus_adapter(seed: u64) -> f64 {
    let mut worst = 0.0_f64;
    for field in [1usize, 2] {
        let cfg = RunConfig {
            image_size: 16,
            patch_size: 8,
            vision_width: 16,
            vision_depth: 1,
            focus_hidden: 32,
            focus_heads: 1,
            focus_field: field,
            ..RunConfig::default()
        };
        let mut r = rng(seed);
        let p = FocusParams::new(&mut r, &cfg);
        let v_d = rand_const(&mut r, &[5, 16], 0.7);
        let h_prev = rand_param(&mut r, &[5, 32], 0.7);
        let mut map = ParamMap::new();
        p.collect(&mut map);
        map.retain(|k, _| {
            k.starts_with("focus.adapter0") || k == "focus.w_down" || k == "focus.b"
        });
        map.insert("h_prev".into(), h_prev.clone());
        let params = map_to_vec(map);
        let err = fd_max_rel_err(&params, &move |t| {
            let y = focus_adapter_step(t, &v_d, &h_prev, &p, &p.adapters[0]).unwrap();
            ops::sum(t, &y).unwrap()
        });
        worst = worst.max(err);
    }
    worst
}

/// Adapter-augmented projection with frozen base weight.
pub fn fd_lora_linear(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = rand_param(&mut r, &[4, 8], 0.8);
    let w = rand_const(&mut r, &[8, 8], 0.8);
    let bias = rand_param(&mut r, &[8], 0.5);
    let lora = LoraPair::new(&mut r, 8, 2, 4.0);
    {
        let fresh: Vec<f64> = (0..lora.b.numel()).map(|_| r.gen_range(-0.3..0.3)).collect();
        lora.b.data_mut().copy_from_slice(&fresh);
    }
    let mut map = ParamMap::new();
    lora.collect("lin.lora", &mut map);
    map.insert("x".into(), x.clone());
    map.insert("bias".into(), bias.clone());
    let params = map_to_vec(map);
    fd_max_rel_err(&params, &move |t| {
        let y = lora_linear(t, &x, &w, Some(&bias), Some(&lora)).unwrap();
        ops::sum(t, &y).unwrap()
    })
}

fn filled_queue(r: &mut ChaCha8Rng, dim: usize, scenes: &[usize]) -> NegativeQueue {
    let mut q = NegativeQueue::new(scenes.len());
    for &s in scenes {
        let e = Tensor::from_vec(unit_row(r, dim), &[dim]).unwrap();
        q.push(&e, s).unwrap();
    }
    q
}

/// Recycled-negative loss for one pair, moderate sharpness and the training
/// default.
pub fn fd_queue_loss(seed: u64) -> f64 {
    let dim = 6;
    let mut worst = 0.0_f64;
    for beta in [1.5, 20.0] {
        let cfg = RunConfig {
            margin: 0.2,
            beta,
            ..RunConfig::default()
        };
        let mut r = rng(seed);
        let q_v = filled_queue(&mut r, dim, &[0, 1, 1, 2, 0]);
        let q_s = filled_queue(&mut r, dim, &[1, 0, 2, 2]);
        let s_e = rand_param(&mut r, &[dim], 0.9);
        let v_e = rand_param(&mut r, &[dim], 0.9);
        let params = vec![("s_e".to_string(), s_e.clone()), ("v_e".to_string(), v_e.clone())];
        let err = fd_max_rel_err(&params, &move |t| {
            queue_loss(t, &s_e, &v_e, &q_v, &q_s, 0, &cfg).unwrap()
        });
        worst = worst.max(err);
    }
    worst
}

/// Symmetric in-batch loss with a learnable temperature.
pub fn fd_infonce(seed: u64) -> f64 {
    let (b, dim) = (4, 6);
    let mut r = rng(seed);
    let flat_v: Vec<f64> = (0..b).flat_map(|_| unit_row(&mut r, dim)).collect();
    let flat_s: Vec<f64> = (0..b).flat_map(|_| unit_row(&mut r, dim)).collect();
    let v = Tensor::param(flat_v, &[b, dim]).unwrap();
    let s = Tensor::param(flat_s, &[b, dim]).unwrap();
    let log_tau = log_tau_param(0.07, true);
    let params = vec![
        ("v".to_string(), v.clone()),
        ("s".to_string(), s.clone()),
        ("log_tau".to_string(), log_tau.clone()),
    ];
    fd_max_rel_err(&params, &move |t| {
        infonce_batch_loss(t, &v, &s, &log_tau).unwrap()
    })
}

/// Full training objective: in-batch term plus queue term.
pub fn fd_total_loss(seed: u64) -> f64 {
    let (b, dim) = (3, 6);
    let cfg = RunConfig {
        margin: 0.2,
        beta: 2.0,
        ..RunConfig::default()
    };
    let mut r = rng(seed);
    let q_v = filled_queue(&mut r, dim, &[0, 1, 2, 1]);
    let q_s = filled_queue(&mut r, dim, &[2, 0, 1]);
    let flat_v: Vec<f64> = (0..b).flat_map(|_| unit_row(&mut r, dim)).collect();
    let flat_s: Vec<f64> = (0..b).flat_map(|_| unit_row(&mut r, dim)).collect();
    let v = Tensor::param(flat_v, &[b, dim]).unwrap();
    let s = Tensor::param(flat_s, &[b, dim]).unwrap();
    let log_tau = log_tau_param(0.07, true);
    let scenes = vec![0usize, 1, 0];
    let params = vec![
        ("v".to_string(), v.clone()),
        ("s".to_string(), s.clone()),
        ("log_tau".to_string(), log_tau.clone()),
    ];
    fd_max_rel_err(&params, &move |t| {
        total_loss(t, &v, &s, &scenes, &q_v, &q_s, &log_tau, &cfg)
            .unwrap()
            .0
    })
}
