//! Side-branch ladder with region-partitioned attention.
//!
//! The ladder runs beside the frozen vision tower: every rung downsamples the
//! corresponding backbone state with one shared matrix, refines the previous
//! rung with attention restricted to small spatial windows, and feeds the
//! result forward. Because the backbone never requires grad, the tape holds
//! only side-branch activations, which is the point of the design.
//!
//! The class row is not spatial, so it skips the window partition entirely:
//! the focus layer carries it by residual alone and every linear rung still
//! transforms it.

use cmer_autodiff::ops;
use cmer_autodiff::{Tape, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{multi_head_attention, trunc_normal, ParamMap, INIT_STD};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::vision::{encode_image as encode_backbone, VisionParams};

/// Attention and feed-forward weights of one ladder rung. The shared
/// downsample lives on `FocusParams`, not here.
pub struct AdapterParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub w_d: Tensor,
}

impl AdapterParams {
    fn new(rng: &mut ChaCha8Rng, hidden: usize) -> AdapterParams {
        let w = |rng: &mut ChaCha8Rng| {
            Tensor::param(trunc_normal(rng, hidden * hidden, INIT_STD), &[hidden, hidden])
                .expect("sampled data matches shape")
        };
        let b = || Tensor::param(vec![0.0; hidden], &[hidden]).expect("zeros match shape");
        AdapterParams {
            wq: w(rng),
            bq: b(),
            wk: w(rng),
            bk: b(),
            wv: w(rng),
            bv: b(),
            wo: w(rng),
            bo: b(),
            w_d: w(rng),
        }
    }

    fn collect(&self, prefix: &str, out: &mut ParamMap) {
        let pairs: [(&str, &Tensor); 9] = [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("w_d", &self.w_d),
        ];
        for (name, t) in pairs {
            out.insert(format!("{prefix}.{name}"), (*t).clone());
        }
    }
}

/// Every side-branch parameter; all trainable. `w_down` and `b` are shared by
/// each rung, `cls_proj`/`side_proj` fuse the two class rows at the top.
pub struct FocusParams {
    pub w_down: Tensor,
    pub b: Tensor,
    pub adapters: Vec<AdapterParams>,
    pub cls_proj: Tensor,
    pub side_proj: Tensor,
    pub heads: usize,
    pub field: usize,
    pub grid: usize,
}

impl FocusParams {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &RunConfig) -> FocusParams {
        let bw = cfg.vision_width;
        let hidden = cfg.focus_hidden;
        FocusParams {
            w_down: Tensor::param(trunc_normal(rng, bw * hidden, INIT_STD), &[bw, hidden])
                .expect("sampled data matches shape"),
            b: Tensor::param(vec![0.0; hidden], &[hidden]).expect("zeros match shape"),
            adapters: (0..cfg.adapters()).map(|_| AdapterParams::new(rng, hidden)).collect(),
            cls_proj: Tensor::param(trunc_normal(rng, bw * cfg.embed_dim, INIT_STD), &[bw, cfg.embed_dim])
                .expect("sampled data matches shape"),
            side_proj: Tensor::param(
                trunc_normal(rng, hidden * cfg.embed_dim, INIT_STD),
                &[hidden, cfg.embed_dim],
            )
            .expect("sampled data matches shape"),
            heads: cfg.focus_heads,
            field: cfg.focus_field,
            grid: cfg.grid(),
        }
    }

    pub fn collect(&self, out: &mut ParamMap) {
        out.insert("focus.w_down".into(), self.w_down.clone());
        out.insert("focus.b".into(), self.b.clone());
        for (i, a) in self.adapters.iter().enumerate() {
            a.collect(&format!("focus.adapter{i}"), out);
        }
        out.insert("focus.cls_proj".into(), self.cls_proj.clone());
        out.insert("focus.side_proj".into(), self.side_proj.clone());
    }
}

/// Token order that groups each `field`x`field` spatial window contiguously:
/// `order[k]` is the original row of the k-th region-major token. Returns the
/// order and its inverse; both are permutations of `0..n*n`.
pub fn region_order(n: usize, field: usize) -> (Vec<usize>, Vec<usize>) {
    let per_side = n / field;
    let mut order = Vec::with_capacity(n * n);
    for ri in 0..per_side {
        for rj in 0..per_side {
            for pi in 0..field {
                for pj in 0..field {
                    order.push((ri * field + pi) * n + rj * field + pj);
                }
            }
        }
    }
    let mut inverse = vec![0; order.len()];
    for (pos, &row) in order.iter().enumerate() {
        inverse[row] = pos;
    }
    (order, inverse)
}

/// Splits the patch rows into `(n/field)²` window tensors, each holding the
/// row-major flattening of one spatial window. A bijection on tokens.
pub fn partition_regions(tape: &mut Tape, h: &Tensor, n: usize, field: usize) -> Result<Vec<Tensor>> {
    if h.shape()[0] != n * n {
        return Err(Error::Contract(format!(
            "partition expects {} patch rows, got {:?}",
            n * n,
            h.shape()
        )));
    }
    let (order, _) = region_order(n, field);
    let grouped = ops::embedding_lookup(tape, h, &order, &[])?;
    let per_region = field * field;
    (0..order.len() / per_region)
        .map(|r| ops::slice(tape, &grouped, 0, r * per_region, per_region).map_err(Error::from))
        .collect()
}

/// Window-restricted multi-head attention over the patch rows, before the
/// residual is added back: project q/k/v, attend within each window
/// independently, restore token order, apply the output projection. Tokens in
/// different windows have exactly zero cross-influence here.
pub fn region_attention_pre_residual(
    tape: &mut Tape,
    h: &Tensor,
    a: &AdapterParams,
    heads: usize,
    n: usize,
    field: usize,
) -> Result<Tensor> {
    let (order, inverse) = region_order(n, field);
    let grouped = ops::embedding_lookup(tape, h, &order, &[])?;
    let q = crate::blocks::linear(tape, &grouped, &a.wq, Some(&a.bq))?;
    let k = crate::blocks::linear(tape, &grouped, &a.wk, Some(&a.bk))?;
    let v = crate::blocks::linear(tape, &grouped, &a.wv, Some(&a.bv))?;
    let per_region = field * field;
    let mut regions = Vec::with_capacity(order.len() / per_region);
    for r in 0..order.len() / per_region {
        let qr = ops::slice(tape, &q, 0, r * per_region, per_region)?;
        let kr = ops::slice(tape, &k, 0, r * per_region, per_region)?;
        let vr = ops::slice(tape, &v, 0, r * per_region, per_region)?;
        regions.push(multi_head_attention(tape, &qr, &kr, &vr, heads)?);
    }
    let refs: Vec<&Tensor> = regions.iter().collect();
    let ctx = ops::concat(tape, &refs, 0)?;
    let ctx = ops::embedding_lookup(tape, &ctx, &inverse, &[])?;
    Ok(crate::blocks::linear(tape, &ctx, &a.wo, Some(&a.bo))?)
}

/// Window-restricted attention with the residual added back.
pub fn region_attention(
    tape: &mut Tape,
    h: &Tensor,
    a: &AdapterParams,
    heads: usize,
    n: usize,
    field: usize,
) -> Result<Tensor> {
    let pre = region_attention_pre_residual(tape, h, a, heads, n, field)?;
    Ok(ops::add(tape, &pre, h)?)
}

/// One ladder rung. `v_d` is the matching backbone state `[seq, backbone_width]`,
/// `h_prev` the previous rung `[seq, hidden]`:
/// the patch rows of `h_prev` pass through window attention with residual, the
/// class row rides the residual alone, the combined rows go through the rung's
/// feed-forward with its own residual, and the downsampled backbone state plus
/// shared bias complete the update.
pub fn focus_adapter_step(
    tape: &mut Tape,
    v_d: &Tensor,
    h_prev: &Tensor,
    p: &FocusParams,
    a: &AdapterParams,
) -> Result<Tensor> {
    let seq = h_prev.shape()[0];
    let cls = ops::slice(tape, h_prev, 0, 0, 1)?;
    let patches = ops::slice(tape, h_prev, 0, 1, seq - 1)?;
    let attended = region_attention(tape, &patches, a, p.heads, p.grid, p.field)?;
    let f_tilde = ops::concat(tape, &[&cls, &attended], 0)?;
    let ff = ops::matmul(tape, &f_tilde, &a.w_d)?;
    let f = ops::add(tape, &ff, &f_tilde)?;
    let down = ops::matmul(tape, v_d, &p.w_down)?;
    let summed = ops::add(tape, &down, &f)?;
    Ok(ops::add(tape, &summed, &p.b)?)
}

/// Full side-branch encoding: run the frozen backbone, seed the ladder from
/// the embedded input, climb one rung per retained backbone state, then fuse
/// the backbone class row with the ladder class row and normalize.
pub fn encode_image_with_side_branch(
    tape: &mut Tape,
    image: &Tensor,
    vp: &VisionParams,
    fp: &FocusParams,
) -> Result<Tensor> {
    let (_, states) = encode_backbone(tape, image, vp)?;
    let stride = (states.len() - 1) / fp.adapters.len();
    tape.set_scope("focus.init");
    let down0 = ops::matmul(tape, &states[0], &fp.w_down)?;
    let mut h = ops::add(tape, &down0, &fp.b)?;
    for (i, a) in fp.adapters.iter().enumerate() {
        tape.set_scope(&format!("focus.adapter{i}"));
        h = focus_adapter_step(tape, &states[(i + 1) * stride], &h, fp, a)?;
    }
    tape.set_scope("focus.fuse");
    let cls_b = ops::slice(tape, states.last().unwrap(), 0, 0, 1)?;
    let cls_s = ops::slice(tape, &h, 0, 0, 1)?;
    let eb = ops::matmul(tape, &cls_b, &fp.cls_proj)?;
    let es = ops::matmul(tape, &cls_s, &fp.side_proj)?;
    let e = ops::add(tape, &eb, &es)?;
    let e = ops::reshape(tape, &e, &[fp.cls_proj.shape()[1]])?;
    let e = ops::l2_normalize(tape, &e, 0)?;
    tape.set_scope("");
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_mat(seed: u64, rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(trunc_normal(&mut rng(seed), rows * cols, 0.5), &[rows, cols]).unwrap()
    }

    fn zero_adapter(hidden: usize) -> AdapterParams {
        let a = AdapterParams::new(&mut rng(0), hidden);
        for t in [&a.wq, &a.wk, &a.wv, &a.wo, &a.w_d] {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        a
    }

    #[test]
    fn region_order_groups_spatial_windows() {
        let (order, inverse) = region_order(4, 2);
        assert_eq!(&order[0..4], &[0, 1, 4, 5]);
        assert_eq!(&order[4..8], &[2, 3, 6, 7]);
        assert_eq!(&order[8..12], &[8, 9, 12, 13]);
        for (pos, &row) in order.iter().enumerate() {
            assert_eq!(inverse[row], pos);
        }
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn partition_shapes_cover_field_choices() {
        let h = rand_mat(1, 16, 8);
        let mut tape = Tape::new();
        let quads = partition_regions(&mut tape, &h, 4, 2).unwrap();
        assert_eq!(quads.len(), 4);
        assert!(quads.iter().all(|r| r.shape() == [4, 8]));
        let data = h.data();
        let r0 = quads[0].to_vec();
        for (slot, &tok) in [0usize, 1, 4, 5].iter().enumerate() {
            assert_eq!(&r0[slot * 8..(slot + 1) * 8], &data[tok * 8..(tok + 1) * 8]);
        }
        drop(data);
        let singles = partition_regions(&mut tape, &h, 4, 1).unwrap();
        assert_eq!(singles.len(), 16);
        assert!(singles.iter().all(|r| r.shape() == [1, 8]));
        let whole = partition_regions(&mut tape, &h, 4, 4).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole[0].to_vec(), h.to_vec());
    }

    #[test]
    fn full_field_equals_global_attention() {
        let hidden = 64;
        let a = AdapterParams::new(&mut rng(3), hidden);
        let h = rand_mat(4, 16, hidden);
        let mut tape = Tape::new();
        let windowed = region_attention(&mut tape, &h, &a, 2, 4, 4).unwrap();

        let mut t2 = Tape::new();
        let q = crate::blocks::linear(&mut t2, &h, &a.wq, Some(&a.bq)).unwrap();
        let k = crate::blocks::linear(&mut t2, &h, &a.wk, Some(&a.bk)).unwrap();
        let v = crate::blocks::linear(&mut t2, &h, &a.wv, Some(&a.bv)).unwrap();
        let ctx = multi_head_attention(&mut t2, &q, &k, &v, 2).unwrap();
        let out = crate::blocks::linear(&mut t2, &ctx, &a.wo, Some(&a.bo)).unwrap();
        let global = ops::add(&mut t2, &out, &h).unwrap();

        let max_diff = windowed
            .to_vec()
            .iter()
            .zip(global.to_vec())
            .map(|(w, g)| (w - g).abs())
            .fold(0.0f64, f64::max)
            ;
        assert!(max_diff < 1e-12, "max diff {max_diff}");
    }

    #[test]
    fn singleton_field_reduces_to_value_then_output_projection() {
        let hidden = 64;
        let a = AdapterParams::new(&mut rng(5), hidden);
        let h = rand_mat(6, 16, hidden);
        let mut tape = Tape::new();
        let got = region_attention(&mut tape, &h, &a, 2, 4, 1).unwrap();

        let mut t2 = Tape::new();
        let v = crate::blocks::linear(&mut t2, &h, &a.wv, Some(&a.bv)).unwrap();
        let out = crate::blocks::linear(&mut t2, &v, &a.wo, Some(&a.bo)).unwrap();
        let want = ops::add(&mut t2, &out, &h).unwrap();
        let max_diff = got
            .to_vec()
            .iter()
            .zip(want.to_vec())
            .map(|(g, w)| (g - w).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-12, "max diff {max_diff}");
    }

    #[test]
    fn perturbing_one_region_leaves_the_others_bit_identical() {
        let hidden = 64;
        let a = AdapterParams::new(&mut rng(7), hidden);
        let h = rand_mat(8, 16, hidden);
        let mut tape = Tape::new();
        let base = region_attention_pre_residual(&mut tape, &h, &a, 2, 4, 2)
            .unwrap()
            .to_vec();

        let bumped = h.to_vec();
        let mut bumped = bumped;
        bumped[10 * hidden + 3] += 1e-3;
        let h2 = Tensor::from_vec(bumped, &[16, hidden]).unwrap();
        let mut tape = Tape::new();
        let moved = region_attention_pre_residual(&mut tape, &h2, &a, 2, 4, 2)
            .unwrap()
            .to_vec();

        let (_, inverse) = region_order(4, 2);
        let region_of = |tok: usize| inverse[tok] / 4;
        let perturbed_region = region_of(10);
        for tok in 0..16 {
            let same = base[tok * hidden..(tok + 1) * hidden]
                == moved[tok * hidden..(tok + 1) * hidden];
            if region_of(tok) == perturbed_region {
                assert!(!same, "token {tok} should move with its region");
            } else {
                assert!(same, "token {tok} leaked across regions");
            }
        }
    }

    #[test]
    fn zero_params_and_zero_state_collapse_to_zero() {
        let cfg = RunConfig::default();
        let p = FocusParams::new(&mut rng(1), &cfg);
        p.w_down.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let a = zero_adapter(cfg.focus_hidden);
        let v_d = rand_mat(2, cfg.vision_seq(), cfg.vision_width);
        let h_prev = Tensor::from_vec(
            vec![0.0; cfg.vision_seq() * cfg.focus_hidden],
            &[cfg.vision_seq(), cfg.focus_hidden],
        )
        .unwrap();
        let mut tape = Tape::new();
        let h = focus_adapter_step(&mut tape, &v_d, &h_prev, &p, &a).unwrap();
        assert!(h.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_attention_and_ffn_leave_a_pure_residual_ladder() {
        let cfg = RunConfig::default();
        let p = FocusParams::new(&mut rng(2), &cfg);
        let a = zero_adapter(cfg.focus_hidden);
        let v_d = rand_mat(3, cfg.vision_seq(), cfg.vision_width);
        let h_prev = rand_mat(4, cfg.vision_seq(), cfg.focus_hidden);
        let mut tape = Tape::new();
        let h = focus_adapter_step(&mut tape, &v_d, &h_prev, &p, &a).unwrap();

        let down = ops::matmul(&mut tape, &v_d, &p.w_down).unwrap();
        let want_base = ops::add(&mut tape, &down, &h_prev).unwrap();
        let want = ops::add(&mut tape, &want_base, &p.b).unwrap();
        let max_diff = h
            .to_vec()
            .iter()
            .zip(want.to_vec())
            .map(|(g, w)| (g - w).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-12, "max diff {max_diff}");
    }

    #[test]
    fn side_branch_embedding_is_unit_norm_with_no_backbone_entries() {
        let cfg = RunConfig::default();
        let mut r = rng(11);
        let vp = VisionParams::new(&mut r, &cfg, false, false, None);
        let fp = FocusParams::new(&mut r, &cfg);
        let image = Tensor::from_vec(
            trunc_normal(&mut r, cfg.channels * cfg.image_size * cfg.image_size, 0.4),
            &[cfg.channels, cfg.image_size, cfg.image_size],
        )
        .unwrap();
        let mut tape = Tape::new();
        let e = encode_image_with_side_branch(&mut tape, &image, &vp, &fp).unwrap();
        assert_eq!(e.shape(), [cfg.embed_dim]);
        let norm: f64 = e.to_vec().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        let report = tape.report();
        for scope in report.by_scope.keys() {
            assert!(scope.starts_with("focus."), "backbone scope {scope} taped");
        }
        assert!(tape.entry_count() > 0);
    }

    #[test]
    fn shared_downsample_collects_gradient_from_every_rung() {
        let cfg = RunConfig::default();
        let mut r = rng(13);
        let vp = VisionParams::new(&mut r, &cfg, false, false, None);
        let fp = FocusParams::new(&mut r, &cfg);
        let image = Tensor::from_vec(
            trunc_normal(&mut r, cfg.channels * cfg.image_size * cfg.image_size, 0.4),
            &[cfg.channels, cfg.image_size, cfg.image_size],
        )
        .unwrap();
        let mut tape = Tape::new();
        let e = encode_image_with_side_branch(&mut tape, &image, &vp, &fp).unwrap();
        let sq = ops::mul(&mut tape, &e, &e).unwrap();
        let loss = ops::sum(&mut tape, &sq).unwrap();
        tape.backward(&loss).unwrap();
        let g = fp.w_down.grad().expect("shared downsample must receive grad");
        assert!(g.iter().any(|&v| v != 0.0));
        for a in &fp.adapters {
            assert!(a.w_d.grad().is_some());
        }
        assert!(fp.cls_proj.grad().is_some());
        assert!(fp.side_proj.grad().is_some());
    }

    #[test]
    fn named_parameters_cover_the_whole_branch() {
        let cfg = RunConfig::default();
        let fp = FocusParams::new(&mut rng(17), &cfg);
        let mut map = ParamMap::new();
        fp.collect(&mut map);
        assert_eq!(map.len(), 2 + 9 * cfg.adapters() + 2);
        assert!(map.contains_key("focus.w_down"));
        assert!(map.contains_key("focus.adapter3.w_d"));
        assert!(map.values().all(|t| t.requires_grad()));
    }
}
