//! Differentiable primitives.
//!
//! Every op computes its forward value eagerly, then (when the tape is
//! recording and at least one input requires grad) appends a record holding
//! exactly the values its backward rule consumes. What each op saves:
//!
//! | op               | saved for backward                                     |
//! |------------------|--------------------------------------------------------|
//! | matmul           | `a` iff `b` requires grad; `b` iff `a` requires grad   |
//! | add, sub         | nothing                                                |
//! | mul              | `a` iff `b` requires grad; `b` iff `a` requires grad   |
//! | scalar_mul       | nothing (the factor is metadata)                       |
//! | exp              | the output                                             |
//! | log              | the input                                              |
//! | gelu             | the input                                              |
//! | softmax          | the output                                             |
//! | layer_norm       | x, per-row mean and 1/std iff x or gamma requires grad; gamma additionally iff x does |
//! | concat, slice    | nothing (index arithmetic)                             |
//! | reshape          | nothing                                                |
//! | transpose        | nothing                                                |
//! | embedding_lookup | nothing (row indices are metadata, not activations)    |
//! | l2_normalize     | the output and the per-group norms                     |
//! | clamp_min        | the input                                              |
//! | sum              | nothing                                                |
//!
//! Broadcasting is deliberately narrow: `add` accepts equal shapes, a
//! single-element operand on either side, or a row vector (`[c]` or `[1, c]`)
//! on the right against an `[r, c]` left. `sub` and `mul` accept equal shapes
//! or a single-element operand. Everything else is an exact-shape op.

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::{numel_of, Tensor};

// ── raw kernels ──

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

// g [m,n] times b^T where b is [k,n]; result [m,k]
fn mm_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for l in 0..n {
                acc += grow[l] * brow[l];
            }
            out[i * k + j] = acc;
        }
    }
    out
}

// a^T times g where a is [m,k], g is [m,n]; result [k,n]
fn mm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for j in 0..k {
            let av = a[i * k + j];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[j * n..(j + 1) * n];
            for l in 0..n {
                orow[l] += av * grow[l];
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

// Iterate the groups a row/column reduction runs over: yields (start, len,
// stride) triples. Rank 1 has one group; rank 2 has rows (axis 1) or columns
// (axis 0).
fn for_each_group(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    match shape.len() {
        1 => f(0, shape[0], 1),
        2 => {
            let (r, c) = (shape[0], shape[1]);
            if axis == 1 {
                for i in 0..r {
                    f(i * c, c, 1);
                }
            } else {
                for j in 0..c {
                    f(j, r, c);
                }
            }
        }
        _ => unreachable!("group ops are rank 1 or 2 only"),
    }
}

fn check_group_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if shape.is_empty() || shape.len() > 2 {
        return Err(Error::RankMismatch {
            op,
            expected: 2,
            shape: shape.to_vec(),
        });
    }
    if axis >= shape.len() {
        return Err(Error::AxisOutOfRange {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

// ── broadcasting helpers ──

#[derive(Debug, Clone, Copy, PartialEq)]
enum Broadcast {
    Same,
    RhsScalar,
    LhsScalar,
    RhsRow,
}

fn classify_broadcast(
    op: &'static str,
    lhs: &[usize],
    rhs: &[usize],
    allow_row: bool,
) -> Result<(Broadcast, Vec<usize>)> {
    if lhs == rhs {
        return Ok((Broadcast::Same, lhs.to_vec()));
    }
    if numel_of(rhs) == 1 {
        return Ok((Broadcast::RhsScalar, lhs.to_vec()));
    }
    if numel_of(lhs) == 1 {
        return Ok((Broadcast::LhsScalar, rhs.to_vec()));
    }
    if allow_row && lhs.len() == 2 {
        let c = lhs[1];
        if rhs == [c] || rhs == [1, c] {
            return Ok((Broadcast::RhsRow, lhs.to_vec()));
        }
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

fn broadcast_zip(
    mode: Broadcast,
    lhs: &[f64],
    rhs: &[f64],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    match mode {
        Broadcast::Same => lhs.iter().zip(rhs).map(|(&a, &b)| f(a, b)).collect(),
        Broadcast::RhsScalar => lhs.iter().map(|&a| f(a, rhs[0])).collect(),
        Broadcast::LhsScalar => rhs.iter().map(|&b| f(lhs[0], b)).collect(),
        Broadcast::RhsRow => {
            let c = out_shape[1];
            lhs.iter()
                .enumerate()
                .map(|(i, &a)| f(a, rhs[i % c]))
                .collect()
        }
    }
}

// Sum `g` (shaped like the op output) down to an operand's shape.
fn reduce_grad(g: &[f64], out_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    let tn = numel_of(target_shape);
    if tn == g.len() {
        return g.to_vec();
    }
    if tn == 1 {
        return vec![g.iter().sum()];
    }
    // row vector against [r, c]
    let c = out_shape[1];
    debug_assert_eq!(tn, c);
    let mut out = vec![0.0; c];
    for (i, &gi) in g.iter().enumerate() {
        out[i % c] += gi;
    }
    out
}

// ── op records ──

pub(crate) enum OpRecord {
    Leaf(Tensor),
    Matmul {
        m: usize,
        k: usize,
        n: usize,
        a: Option<Vec<f64>>,
        b: Option<Vec<f64>>,
    },
    AddSub {
        negate_rhs: bool,
        out_shape: Vec<usize>,
        lhs_shape: Vec<usize>,
        rhs_shape: Vec<usize>,
        lhs_taped: bool,
        rhs_taped: bool,
    },
    Mul {
        out_shape: Vec<usize>,
        lhs_shape: Vec<usize>,
        rhs_shape: Vec<usize>,
        a: Option<Vec<f64>>,
        b: Option<Vec<f64>>,
    },
    ScalarMul {
        factor: f64,
    },
    Exp {
        out: Vec<f64>,
    },
    Log {
        input: Vec<f64>,
    },
    Gelu {
        input: Vec<f64>,
    },
    Softmax {
        axis: usize,
        shape: Vec<usize>,
        out: Vec<f64>,
    },
    LayerNorm {
        rows: usize,
        cols: usize,
        x: Option<Vec<f64>>,
        mean: Option<Vec<f64>>,
        inv_std: Option<Vec<f64>>,
        gamma: Option<Vec<f64>>,
        taped: [bool; 3],
    },
    Concat {
        axis: usize,
        shapes: Vec<Vec<usize>>,
        taped: Vec<bool>,
        out_shape: Vec<usize>,
    },
    Slice {
        axis: usize,
        start: usize,
        in_shape: Vec<usize>,
        out_shape: Vec<usize>,
    },
    Reshape,
    Transpose {
        rows: usize,
        cols: usize,
    },
    Embedding {
        ids: Vec<usize>,
        frozen: Vec<usize>,
        rows: usize,
        cols: usize,
    },
    L2Normalize {
        axis: usize,
        shape: Vec<usize>,
        out: Vec<f64>,
        norms: Vec<f64>,
    },
    ClampMin {
        min: f64,
        input: Vec<f64>,
    },
    Sum {
        in_numel: usize,
    },
}

impl OpRecord {
    /// Gradients for the taped inputs, in the order they were registered.
    pub(crate) fn backward(&self, g: &[f64]) -> Vec<Vec<f64>> {
        match self {
            OpRecord::Leaf(_) => Vec::new(),

            OpRecord::Matmul { m, k, n, a, b } => {
                let mut grads = Vec::new();
                if let Some(bv) = b {
                    grads.push(mm_nt(g, bv, *m, *n, *k));
                }
                if let Some(av) = a {
                    grads.push(mm_tn(av, g, *m, *k, *n));
                }
                grads
            }

            OpRecord::AddSub {
                negate_rhs,
                out_shape,
                lhs_shape,
                rhs_shape,
                lhs_taped,
                rhs_taped,
            } => {
                let mut grads = Vec::new();
                if *lhs_taped {
                    grads.push(reduce_grad(g, out_shape, lhs_shape));
                }
                if *rhs_taped {
                    let mut gr = reduce_grad(g, out_shape, rhs_shape);
                    if *negate_rhs {
                        for v in gr.iter_mut() {
                            *v = -*v;
                        }
                    }
                    grads.push(gr);
                }
                grads
            }

            OpRecord::Mul {
                out_shape,
                lhs_shape,
                rhs_shape,
                a,
                b,
            } => {
                // g has the output shape; the saved counterparty is either
                // the same size or a single element
                let times = |other: &Vec<f64>| -> Vec<f64> {
                    if other.len() == g.len() {
                        g.iter().zip(other).map(|(&gi, &o)| gi * o).collect()
                    } else {
                        g.iter().map(|&gi| gi * other[0]).collect()
                    }
                };
                let mut grads = Vec::new();
                if let Some(bv) = b {
                    grads.push(reduce_grad(&times(bv), out_shape, lhs_shape));
                }
                if let Some(av) = a {
                    grads.push(reduce_grad(&times(av), out_shape, rhs_shape));
                }
                grads
            }

            OpRecord::ScalarMul { factor } => {
                vec![g.iter().map(|&gi| gi * factor).collect()]
            }

            OpRecord::Exp { out } => {
                vec![g.iter().zip(out).map(|(&gi, &y)| gi * y).collect()]
            }

            OpRecord::Log { input } => {
                vec![g.iter().zip(input).map(|(&gi, &x)| gi / x).collect()]
            }

            OpRecord::Gelu { input } => {
                vec![g
                    .iter()
                    .zip(input)
                    .map(|(&gi, &x)| gi * gelu_grad(x))
                    .collect()]
            }

            OpRecord::Softmax { axis, shape, out } => {
                let mut dx = vec![0.0; g.len()];
                for_each_group(shape, *axis, |start, len, stride| {
                    let mut dot = 0.0;
                    for i in 0..len {
                        let idx = start + i * stride;
                        dot += g[idx] * out[idx];
                    }
                    for i in 0..len {
                        let idx = start + i * stride;
                        dx[idx] = out[idx] * (g[idx] - dot);
                    }
                });
                vec![dx]
            }

            OpRecord::LayerNorm {
                rows,
                cols,
                x,
                mean,
                inv_std,
                gamma,
                taped,
            } => {
                let (r, c) = (*rows, *cols);
                let mut grads = Vec::new();
                let xhat = |xv: &Vec<f64>, mv: &Vec<f64>, sv: &Vec<f64>, i: usize, j: usize| {
                    (xv[i * c + j] - mv[i]) * sv[i]
                };
                if taped[0] {
                    let (xv, mv, sv) = (
                        x.as_ref().unwrap(),
                        mean.as_ref().unwrap(),
                        inv_std.as_ref().unwrap(),
                    );
                    let gv = gamma.as_ref().unwrap();
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dxh = g[i * c + j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xhat(xv, mv, sv, i, j);
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dxh = g[i * c + j] * gv[j];
                            dx[i * c + j] = sv[i] * (dxh - m1 - xhat(xv, mv, sv, i, j) * m2);
                        }
                    }
                    grads.push(dx);
                }
                if taped[1] {
                    let (xv, mv, sv) = (
                        x.as_ref().unwrap(),
                        mean.as_ref().unwrap(),
                        inv_std.as_ref().unwrap(),
                    );
                    let mut dg = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += g[i * c + j] * xhat(xv, mv, sv, i, j);
                        }
                    }
                    grads.push(dg);
                }
                if taped[2] {
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += g[i * c + j];
                        }
                    }
                    grads.push(db);
                }
                grads
            }

            OpRecord::Concat {
                axis,
                shapes,
                taped,
                out_shape,
            } => {
                let mut grads = Vec::new();
                let mut offset = 0;
                for (shape, &is_taped) in shapes.iter().zip(taped) {
                    let part = numel_of(shape);
                    if *axis == 0 || out_shape.len() == 1 {
                        if is_taped {
                            grads.push(g[offset..offset + part].to_vec());
                        }
                        offset += part;
                    } else {
                        // axis 1 on rank 2: columns interleave per row
                        let rows = out_shape[0];
                        let out_cols = out_shape[1];
                        let cols = shape[1];
                        if is_taped {
                            let mut gp = vec![0.0; part];
                            for i in 0..rows {
                                for j in 0..cols {
                                    gp[i * cols + j] = g[i * out_cols + offset + j];
                                }
                            }
                            grads.push(gp);
                        }
                        offset += cols;
                    }
                }
                grads
            }

            OpRecord::Slice {
                axis,
                start,
                in_shape,
                out_shape,
            } => {
                let mut dx = vec![0.0; numel_of(in_shape)];
                if in_shape.len() == 1 || *axis == 0 {
                    let row = if in_shape.len() == 1 { 1 } else { in_shape[1] };
                    let begin = start * row;
                    dx[begin..begin + g.len()].copy_from_slice(g);
                } else {
                    let in_cols = in_shape[1];
                    let out_cols = out_shape[1];
                    for i in 0..out_shape[0] {
                        for j in 0..out_cols {
                            dx[i * in_cols + start + j] = g[i * out_cols + j];
                        }
                    }
                }
                vec![dx]
            }

            OpRecord::Reshape => vec![g.to_vec()],

            OpRecord::Transpose { rows, cols } => {
                // forward output was [cols, rows]
                vec![transpose_raw(g, *cols, *rows)]
            }

            OpRecord::Embedding {
                ids,
                frozen,
                rows,
                cols,
            } => {
                let mut dt = vec![0.0; rows * cols];
                for (j, &id) in ids.iter().enumerate() {
                    if frozen.binary_search(&id).is_ok() {
                        continue;
                    }
                    let src = &g[j * cols..(j + 1) * cols];
                    let dst = &mut dt[id * cols..(id + 1) * cols];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                vec![dt]
            }

            OpRecord::L2Normalize {
                axis,
                shape,
                out,
                norms,
            } => {
                let mut dx = vec![0.0; g.len()];
                let mut group = 0;
                for_each_group(shape, *axis, |start, len, stride| {
                    let n = norms[group];
                    group += 1;
                    let mut dot = 0.0;
                    for i in 0..len {
                        let idx = start + i * stride;
                        dot += g[idx] * out[idx];
                    }
                    for i in 0..len {
                        let idx = start + i * stride;
                        dx[idx] = (g[idx] - out[idx] * dot) / n;
                    }
                });
                vec![dx]
            }

            OpRecord::ClampMin { min, input } => {
                vec![g
                    .iter()
                    .zip(input)
                    .map(|(&gi, &x)| if x > *min { gi } else { 0.0 })
                    .collect()]
            }

            OpRecord::Sum { in_numel } => vec![vec![g[0]; *in_numel]],
        }
    }
}

// ── public ops ──

fn require_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.ndim() != rank {
        return Err(Error::RankMismatch {
            op,
            expected: rank,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// `[m,k] x [k,n] -> [m,n]`.
pub fn matmul(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_rank("matmul", a, 2)?;
    require_rank("matmul", b, 2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let rec = tape.should_record(&[a, b])?;
    let data = mm(&a.data(), &b.data(), m, k, n);
    let out = Tensor::op_output(data, vec![m, n], rec);
    if rec {
        let a_saved = if b.requires_grad() { Some(a.to_vec()) } else { None };
        let b_saved = if a.requires_grad() { Some(b.to_vec()) } else { None };
        let saved = a_saved.as_ref().map_or(0, Vec::len) + b_saved.as_ref().map_or(0, Vec::len);
        let mut taped: Vec<&Tensor> = Vec::new();
        if a.requires_grad() {
            taped.push(a);
        }
        if b.requires_grad() {
            taped.push(b);
        }
        tape.record(
            "matmul",
            &taped,
            OpRecord::Matmul {
                m,
                k,
                n,
                a: a_saved,
                b: b_saved,
            },
            saved,
            &out,
        );
    }
    Ok(out)
}

fn add_sub(tape: &mut Tape, a: &Tensor, b: &Tensor, negate_rhs: bool) -> Result<Tensor> {
    let op: &'static str = if negate_rhs { "sub" } else { "add" };
    let (mode, out_shape) = classify_broadcast(op, a.shape(), b.shape(), !negate_rhs)?;
    let rec = tape.should_record(&[a, b])?;
    let sign = if negate_rhs { -1.0 } else { 1.0 };
    let data = broadcast_zip(mode, &a.data(), &b.data(), &out_shape, |x, y| x + sign * y);
    let out = Tensor::op_output(data, out_shape.clone(), rec);
    if rec {
        let mut taped: Vec<&Tensor> = Vec::new();
        if a.requires_grad() {
            taped.push(a);
        }
        if b.requires_grad() {
            taped.push(b);
        }
        tape.record(
            op,
            &taped,
            OpRecord::AddSub {
                negate_rhs,
                out_shape,
                lhs_shape: a.shape().to_vec(),
                rhs_shape: b.shape().to_vec(),
                lhs_taped: a.requires_grad(),
                rhs_taped: b.requires_grad(),
            },
            0,
            &out,
        );
    }
    Ok(out)
}

/// Elementwise `a + b`; `b` may be a single element or a row vector against a
/// rank-2 `a`, and `a` may be a single element.
pub fn add(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    add_sub(tape, a, b, false)
}

/// Elementwise `a - b`; either side may be a single element.
pub fn sub(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    add_sub(tape, a, b, true)
}

/// Elementwise `a * b`; either side may be a single element.
pub fn mul(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (mode, out_shape) = classify_broadcast("mul", a.shape(), b.shape(), false)?;
    let rec = tape.should_record(&[a, b])?;
    let data = broadcast_zip(mode, &a.data(), &b.data(), &out_shape, |x, y| x * y);
    let out = Tensor::op_output(data, out_shape.clone(), rec);
    if rec {
        let a_saved = if b.requires_grad() { Some(a.to_vec()) } else { None };
        let b_saved = if a.requires_grad() { Some(b.to_vec()) } else { None };
        let saved = a_saved.as_ref().map_or(0, Vec::len) + b_saved.as_ref().map_or(0, Vec::len);
        let mut taped: Vec<&Tensor> = Vec::new();
        if a.requires_grad() {
            taped.push(a);
        }
        if b.requires_grad() {
            taped.push(b);
        }
        tape.record(
            "mul",
            &taped,
            OpRecord::Mul {
                out_shape,
                lhs_shape: a.shape().to_vec(),
                rhs_shape: b.shape().to_vec(),
                a: a_saved,
                b: b_saved,
            },
            saved,
            &out,
        );
    }
    Ok(out)
}

/// `x * factor` for a plain f64 factor.
pub fn scalar_mul(tape: &mut Tape, x: &Tensor, factor: f64) -> Result<Tensor> {
    let rec = tape.should_record(&[x])?;
    let data = x.data().iter().map(|&v| v * factor).collect();
    let out = Tensor::op_output(data, x.shape().to_vec(), rec);
    if rec {
        tape.record("scalar_mul", &[x], OpRecord::ScalarMul { factor }, 0, &out);
    }
    Ok(out)
}

/// Elementwise `e^x`.
pub fn exp(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    let rec = tape.should_record(&[x])?;
    let data: Vec<f64> = x.data().iter().map(|&v| v.exp()).collect();
    let out = Tensor::op_output(data.clone(), x.shape().to_vec(), rec);
    if rec {
        let saved = data.len();
        tape.record("exp", &[x], OpRecord::Exp { out: data }, saved, &out);
    }
    Ok(out)
}

/// Elementwise natural log.
pub fn log(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    let rec = tape.should_record(&[x])?;
    let data: Vec<f64> = x.data().iter().map(|&v| v.ln()).collect();
    let out = Tensor::op_output(data, x.shape().to_vec(), rec);
    if rec {
        let input = x.to_vec();
        let saved = input.len();
        tape.record("log", &[x], OpRecord::Log { input }, saved, &out);
    }
    Ok(out)
}

/// Tanh-form GELU.
pub fn gelu(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    let rec = tape.should_record(&[x])?;
    let data: Vec<f64> = x.data().iter().map(|&v| gelu_val(v)).collect();
    let out = Tensor::op_output(data, x.shape().to_vec(), rec);
    if rec {
        let input = x.to_vec();
        let saved = input.len();
        tape.record("gelu", &[x], OpRecord::Gelu { input }, saved, &out);
    }
    Ok(out)
}

/// Softmax along `axis` of a rank-1 or rank-2 tensor, max-shifted for
/// stability.
pub fn softmax(tape: &mut Tape, x: &Tensor, axis: usize) -> Result<Tensor> {
    check_group_axis("softmax", x.shape(), axis)?;
    let rec = tape.should_record(&[x])?;
    let xv = x.data();
    let mut data = vec![0.0; xv.len()];
    for_each_group(x.shape(), axis, |start, len, stride| {
        let mut mx = f64::NEG_INFINITY;
        for i in 0..len {
            mx = mx.max(xv[start + i * stride]);
        }
        let mut denom = 0.0;
        for i in 0..len {
            let idx = start + i * stride;
            let e = (xv[idx] - mx).exp();
            data[idx] = e;
            denom += e;
        }
        for i in 0..len {
            data[start + i * stride] /= denom;
        }
    });
    drop(xv);
    let out = Tensor::op_output(data.clone(), x.shape().to_vec(), rec);
    if rec {
        let saved = data.len();
        tape.record(
            "softmax",
            &[x],
            OpRecord::Softmax {
                axis,
                shape: x.shape().to_vec(),
                out: data,
            },
            saved,
            &out,
        );
    }
    Ok(out)
}

/// Per-row layer normalization of a rank-2 `x` with rank-1 `gamma`, `beta`.
pub fn layer_norm(
    tape: &mut Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    require_rank("layer_norm", x, 2)?;
    require_rank("layer_norm", gamma, 1)?;
    require_rank("layer_norm", beta, 1)?;
    let (r, c) = (x.shape()[0], x.shape()[1]);
    if gamma.shape()[0] != c || beta.shape()[0] != c {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let rec = tape.should_record(&[x, gamma, beta])?;
    let xv = x.data();
    let gv = gamma.data();
    let bv = beta.data();
    let mut mean = vec![0.0; r];
    let mut inv_std = vec![0.0; r];
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        let row = &xv[i * c..(i + 1) * c];
        let m = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / c as f64;
        let istd = 1.0 / (var + eps).sqrt();
        mean[i] = m;
        inv_std[i] = istd;
        for j in 0..c {
            data[i * c + j] = (row[j] - m) * istd * gv[j] + bv[j];
        }
    }
    drop(xv);
    drop(gv);
    drop(bv);
    let out = Tensor::op_output(data, vec![r, c], rec);
    if rec {
        let taped = [x.requires_grad(), gamma.requires_grad(), beta.requires_grad()];
        let need_stats = taped[0] || taped[1];
        let x_saved = if need_stats { Some(x.to_vec()) } else { None };
        let mean_saved = if need_stats { Some(mean) } else { None };
        let istd_saved = if need_stats { Some(inv_std) } else { None };
        let gamma_saved = if taped[0] { Some(gamma.to_vec()) } else { None };
        let saved = x_saved.as_ref().map_or(0, Vec::len)
            + mean_saved.as_ref().map_or(0, Vec::len)
            + istd_saved.as_ref().map_or(0, Vec::len)
            + gamma_saved.as_ref().map_or(0, Vec::len);
        let mut taped_inputs: Vec<&Tensor> = Vec::new();
        if taped[0] {
            taped_inputs.push(x);
        }
        if taped[1] {
            taped_inputs.push(gamma);
        }
        if taped[2] {
            taped_inputs.push(beta);
        }
        tape.record(
            "layer_norm",
            &taped_inputs,
            OpRecord::LayerNorm {
                rows: r,
                cols: c,
                x: x_saved,
                mean: mean_saved,
                inv_std: istd_saved,
                gamma: gamma_saved,
                taped,
            },
            saved,
            &out,
        );
    }
    Ok(out)
}

/// Concatenate same-rank parts along `axis` (rank 1 axis 0, or rank 2).
pub fn concat(tape: &mut Tape, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::DegenerateInput {
            op: "concat",
            detail: "no parts".into(),
        });
    }
    let rank = parts[0].ndim();
    if rank == 0 || rank > 2 {
        return Err(Error::RankMismatch {
            op: "concat",
            expected: 2,
            shape: parts[0].shape().to_vec(),
        });
    }
    if axis >= rank {
        return Err(Error::AxisOutOfRange {
            op: "concat",
            axis,
            shape: parts[0].shape().to_vec(),
        });
    }
    let other = 1 - axis;
    for p in parts {
        if p.ndim() != rank || (rank == 2 && p.shape()[other] != parts[0].shape()[other]) {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let mut out_shape = parts[0].shape().to_vec();
    out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();

    let rec = tape.should_record(parts)?;
    let mut data = vec![0.0; numel_of(&out_shape)];
    if axis == 0 || rank == 1 {
        let mut offset = 0;
        for p in parts {
            let pv = p.data();
            data[offset..offset + pv.len()].copy_from_slice(&pv);
            offset += pv.len();
        }
    } else {
        let rows = out_shape[0];
        let out_cols = out_shape[1];
        let mut col_offset = 0;
        for p in parts {
            let cols = p.shape()[1];
            let pv = p.data();
            for i in 0..rows {
                for j in 0..cols {
                    data[i * out_cols + col_offset + j] = pv[i * cols + j];
                }
            }
            col_offset += cols;
        }
    }
    let out = Tensor::op_output(data, out_shape.clone(), rec);
    if rec {
        let taped_flags: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        let taped_inputs: Vec<&Tensor> = parts
            .iter()
            .filter(|p| p.requires_grad())
            .copied()
            .collect();
        tape.record(
            "concat",
            &taped_inputs,
            OpRecord::Concat {
                axis,
                shapes: parts.iter().map(|p| p.shape().to_vec()).collect(),
                taped: taped_flags,
                out_shape,
            },
            0,
            &out,
        );
    }
    Ok(out)
}

/// Contiguous window `[start, start+len)` along `axis`.
pub fn slice(tape: &mut Tape, x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let rank = x.ndim();
    if rank == 0 || rank > 2 {
        return Err(Error::RankMismatch {
            op: "slice",
            expected: 2,
            shape: x.shape().to_vec(),
        });
    }
    if axis >= rank {
        return Err(Error::AxisOutOfRange {
            op: "slice",
            axis,
            shape: x.shape().to_vec(),
        });
    }
    let extent = x.shape()[axis];
    if len == 0 || start + len > extent {
        return Err(Error::SliceOutOfRange {
            op: "slice",
            axis,
            start,
            len,
            extent,
        });
    }
    let rec = tape.should_record(&[x])?;
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = len;
    let xv = x.data();
    let data = if rank == 1 || axis == 0 {
        let row = if rank == 1 { 1 } else { x.shape()[1] };
        xv[start * row..(start + len) * row].to_vec()
    } else {
        let in_cols = x.shape()[1];
        let mut d = vec![0.0; x.shape()[0] * len];
        for i in 0..x.shape()[0] {
            for j in 0..len {
                d[i * len + j] = xv[i * in_cols + start + j];
            }
        }
        d
    };
    drop(xv);
    let out = Tensor::op_output(data, out_shape.clone(), rec);
    if rec {
        tape.record(
            "slice",
            &[x],
            OpRecord::Slice {
                axis,
                start,
                in_shape: x.shape().to_vec(),
                out_shape,
            },
            0,
            &out,
        );
    }
    Ok(out)
}

/// Same data, new shape with equal element count.
pub fn reshape(tape: &mut Tape, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if numel_of(shape) != x.numel() {
        return Err(Error::ShapeData {
            shape: shape.to_vec(),
            len: x.numel(),
        });
    }
    let rec = tape.should_record(&[x])?;
    let out = Tensor::op_output(x.to_vec(), shape.to_vec(), rec);
    if rec {
        tape.record("reshape", &[x], OpRecord::Reshape, 0, &out);
    }
    Ok(out)
}

/// Rank-2 transpose.
pub fn transpose(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    require_rank("transpose", x, 2)?;
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let rec = tape.should_record(&[x])?;
    let data = transpose_raw(&x.data(), r, c);
    let out = Tensor::op_output(data, vec![c, r], rec);
    if rec {
        tape.record(
            "transpose",
            &[x],
            OpRecord::Transpose { rows: r, cols: c },
            0,
            &out,
        );
    }
    Ok(out)
}

/// Gather rows of a rank-2 `table` by index. Rows listed in `frozen_rows`
/// still produce output but receive no gradient. Also serves as a general row
/// permutation/selection op when `table` is an activation.
pub fn embedding_lookup(
    tape: &mut Tape,
    table: &Tensor,
    ids: &[usize],
    frozen_rows: &[usize],
) -> Result<Tensor> {
    require_rank("embedding_lookup", table, 2)?;
    let (rows, cols) = (table.shape()[0], table.shape()[1]);
    if ids.is_empty() {
        return Err(Error::DegenerateInput {
            op: "embedding_lookup",
            detail: "no ids".into(),
        });
    }
    for &id in ids {
        if id >= rows {
            return Err(Error::RowOutOfRange { row: id, rows });
        }
    }
    let rec = tape.should_record(&[table])?;
    let tv = table.data();
    let mut data = vec![0.0; ids.len() * cols];
    for (j, &id) in ids.iter().enumerate() {
        data[j * cols..(j + 1) * cols].copy_from_slice(&tv[id * cols..(id + 1) * cols]);
    }
    drop(tv);
    let out = Tensor::op_output(data, vec![ids.len(), cols], rec);
    if rec {
        let mut frozen = frozen_rows.to_vec();
        frozen.sort_unstable();
        frozen.dedup();
        tape.record(
            "embedding_lookup",
            &[table],
            OpRecord::Embedding {
                ids: ids.to_vec(),
                frozen,
                rows,
                cols,
            },
            0,
            &out,
        );
    }
    Ok(out)
}

/// Scale each group along `axis` to unit Euclidean norm. A zero-norm group is
/// a degenerate-input error.
pub fn l2_normalize(tape: &mut Tape, x: &Tensor, axis: usize) -> Result<Tensor> {
    check_group_axis("l2_normalize", x.shape(), axis)?;
    let rec = tape.should_record(&[x])?;
    let xv = x.data();
    let mut data = vec![0.0; xv.len()];
    let mut norms = Vec::new();
    let mut zero_group = None;
    let mut group = 0usize;
    for_each_group(x.shape(), axis, |start, len, stride| {
        let mut sq = 0.0;
        for i in 0..len {
            let v = xv[start + i * stride];
            sq += v * v;
        }
        let n = sq.sqrt();
        if n == 0.0 && zero_group.is_none() {
            zero_group = Some(group);
        }
        norms.push(n);
        for i in 0..len {
            let idx = start + i * stride;
            data[idx] = xv[idx] / n;
        }
        group += 1;
    });
    drop(xv);
    if let Some(gi) = zero_group {
        return Err(Error::DegenerateInput {
            op: "l2_normalize",
            detail: format!("group {gi} has zero norm"),
        });
    }
    let out = Tensor::op_output(data.clone(), x.shape().to_vec(), rec);
    if rec {
        let saved = data.len() + norms.len();
        tape.record(
            "l2_normalize",
            &[x],
            OpRecord::L2Normalize {
                axis,
                shape: x.shape().to_vec(),
                out: data,
                norms,
            },
            saved,
            &out,
        );
    }
    Ok(out)
}

/// Elementwise `max(x, min)`. The gradient at exactly `x == min` is zero.
pub fn clamp_min(tape: &mut Tape, x: &Tensor, min: f64) -> Result<Tensor> {
    let rec = tape.should_record(&[x])?;
    let data: Vec<f64> = x.data().iter().map(|&v| v.max(min)).collect();
    let out = Tensor::op_output(data, x.shape().to_vec(), rec);
    if rec {
        let input = x.to_vec();
        let saved = input.len();
        tape.record("clamp_min", &[x], OpRecord::ClampMin { min, input }, saved, &out);
    }
    Ok(out)
}

/// Sum of all elements, as a rank-0 scalar.
pub fn sum(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    let rec = tape.should_record(&[x])?;
    let total: f64 = x.data().iter().sum();
    let out = Tensor::op_output(vec![total], Vec::new(), rec);
    if rec {
        tape.record(
            "sum",
            &[x],
            OpRecord::Sum {
                in_numel: x.numel(),
            },
            0,
            &out,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(data, shape).unwrap()
    }

    fn p(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::param(data, shape).unwrap()
    }

    #[test]
    fn matmul_values() {
        let mut tape = Tape::inference();
        let a = t(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = t(vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0], &[3, 2]);
        let c = matmul(&mut tape, &a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.to_vec(), vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::inference();
        let a = t(vec![1.0, 2.0], &[1, 2]);
        let b = t(vec![1.0, 2.0, 3.0], &[3, 1]);
        assert!(matches!(
            matmul(&mut tape, &a, &b),
            Err(Error::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn matmul_saves_by_counterparty() {
        // a frozen [2,3], b trainable [3,2]: only a (6 values, 48 bytes) kept
        let mut tape = Tape::new();
        let a = t(vec![0.5; 6], &[2, 3]);
        let b = p(vec![0.25; 6], &[3, 2]);
        matmul(&mut tape, &a, &b).unwrap();
        assert_eq!(tape.total_saved_bytes(), 48);

        // both trainable: both kept
        let mut tape2 = Tape::new();
        let a2 = p(vec![0.5; 6], &[2, 3]);
        let b2 = p(vec![0.25; 6], &[3, 2]);
        matmul(&mut tape2, &a2, &b2).unwrap();
        assert_eq!(tape2.total_saved_bytes(), 96);

        // both frozen: no entry at all
        let mut tape3 = Tape::new();
        let a3 = t(vec![0.5; 6], &[2, 3]);
        let b3 = t(vec![0.25; 6], &[3, 2]);
        matmul(&mut tape3, &a3, &b3).unwrap();
        assert_eq!(tape3.entry_count(), 0);
        assert_eq!(tape3.total_saved_bytes(), 0);
    }

    #[test]
    fn add_broadcasts_row_bias() {
        let mut tape = Tape::inference();
        let x = t(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let bias = t(vec![10.0, 20.0], &[2]);
        let y = add(&mut tape, &x, &bias).unwrap();
        assert_eq!(y.to_vec(), vec![11.0, 22.0, 13.0, 24.0]);
        // row shape [1, c] is accepted too
        let bias2 = t(vec![10.0, 20.0], &[1, 2]);
        let y2 = add(&mut tape, &x, &bias2).unwrap();
        assert_eq!(y2.to_vec(), y.to_vec());
    }

    #[test]
    fn add_rejects_mismatched_rows() {
        let mut tape = Tape::inference();
        let x = t(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(vec![1.0, 2.0, 3.0], &[3]);
        assert!(add(&mut tape, &x, &b).is_err());
    }

    #[test]
    fn sub_and_mul_scalar_broadcast() {
        let mut tape = Tape::inference();
        let x = t(vec![1.0, 2.0, 3.0], &[3]);
        let s = Tensor::scalar(2.0);
        assert_eq!(sub(&mut tape, &x, &s).unwrap().to_vec(), vec![-1.0, 0.0, 1.0]);
        assert_eq!(sub(&mut tape, &s, &x).unwrap().to_vec(), vec![1.0, 0.0, -1.0]);
        assert_eq!(mul(&mut tape, &x, &s).unwrap().to_vec(), vec![2.0, 4.0, 6.0]);
        assert_eq!(mul(&mut tape, &s, &x).unwrap().to_vec(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::inference();
        let x = t(vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0], &[2, 3]);
        let y = softmax(&mut tape, &x, 1).unwrap();
        let yv = y.to_vec();
        for i in 0..2 {
            let s: f64 = yv[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // monotone within a row
        assert!(yv[0] < yv[1] && yv[1] < yv[2]);
    }

    #[test]
    fn softmax_is_shift_stable() {
        let mut tape = Tape::inference();
        let x = t(vec![1000.0, 1001.0, 1002.0], &[3]);
        let y = softmax(&mut tape, &x, 0).unwrap();
        assert!(y.to_vec().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_columns() {
        let mut tape = Tape::inference();
        let x = t(vec![1.0, 5.0, 3.0, 5.0], &[2, 2]);
        let y = softmax(&mut tape, &x, 0).unwrap();
        let yv = y.to_vec();
        assert!((yv[0] + yv[2] - 1.0).abs() < 1e-12);
        assert!((yv[1] + yv[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rows_standardized() {
        let mut tape = Tape::inference();
        let x = t(vec![1.0, 2.0, 3.0, 4.0, -2.0, 0.0, 2.0, 4.0], &[2, 4]);
        let gamma = t(vec![1.0; 4], &[4]);
        let beta = t(vec![0.0; 4], &[4]);
        let y = layer_norm(&mut tape, &x, &gamma, &beta, 1e-12).unwrap();
        let yv = y.to_vec();
        for i in 0..2 {
            let row = &yv[i * 4..(i + 1) * 4];
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            let v: f64 = row.iter().map(|&e| (e - m) * (e - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn concat_axis0_and_axis1() {
        let mut tape = Tape::inference();
        let a = t(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(vec![5.0, 6.0], &[1, 2]);
        let y0 = concat(&mut tape, &[&a, &b], 0).unwrap();
        assert_eq!(y0.shape(), &[3, 2]);
        assert_eq!(y0.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        let c = t(vec![7.0, 8.0], &[2, 1]);
        let y1 = concat(&mut tape, &[&a, &c], 1).unwrap();
        assert_eq!(y1.shape(), &[2, 3]);
        assert_eq!(y1.to_vec(), vec![1.0, 2.0, 7.0, 3.0, 4.0, 8.0]);
    }

    #[test]
    fn slice_windows() {
        let mut tape = Tape::inference();
        let x = t(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        let rows = slice(&mut tape, &x, 0, 1, 2).unwrap();
        assert_eq!(rows.shape(), &[2, 2]);
        assert_eq!(rows.to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
        let cols = slice(&mut tape, &x, 1, 1, 1).unwrap();
        assert_eq!(cols.shape(), &[3, 1]);
        assert_eq!(cols.to_vec(), vec![2.0, 4.0, 6.0]);
        assert!(matches!(
            slice(&mut tape, &x, 0, 2, 2),
            Err(Error::SliceOutOfRange { .. })
        ));
    }

    #[test]
    fn transpose_round_trip() {
        let mut tape = Tape::inference();
        let x = t(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let xt = transpose(&mut tape, &x).unwrap();
        assert_eq!(xt.shape(), &[3, 2]);
        assert_eq!(xt.to_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let xtt = transpose(&mut tape, &xt).unwrap();
        assert_eq!(xtt.to_vec(), x.to_vec());
    }

    #[test]
    fn embedding_gathers_rows() {
        let mut tape = Tape::inference();
        let table = t(vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0], &[3, 2]);
        let out = embedding_lookup(&mut tape, &table, &[2, 0, 2], &[]).unwrap();
        assert_eq!(out.shape(), &[3, 2]);
        assert_eq!(out.to_vec(), vec![2.0, 2.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(matches!(
            embedding_lookup(&mut tape, &table, &[3], &[]),
            Err(Error::RowOutOfRange { row: 3, rows: 3 })
        ));
    }

    #[test]
    fn embedding_frozen_rows_get_no_grad() {
        let mut tape = Tape::new();
        let table = p(vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0], &[3, 2]);
        let out = embedding_lookup(&mut tape, &table, &[0, 1, 1, 2], &[1]).unwrap();
        let loss = sum(&mut tape, &out).unwrap();
        tape.backward(&loss).unwrap();
        let g = table.grad().unwrap();
        assert_eq!(g, vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn l2_normalize_unit_rows() {
        let mut tape = Tape::inference();
        let x = t(vec![3.0, 4.0, 0.0, 5.0], &[2, 2]);
        let y = l2_normalize(&mut tape, &x, 1).unwrap();
        let yv = y.to_vec();
        assert!((yv[0] - 0.6).abs() < 1e-12);
        assert!((yv[1] - 0.8).abs() < 1e-12);
        assert!((yv[2] - 0.0).abs() < 1e-12);
        assert!((yv[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_zero_norm_errors() {
        let mut tape = Tape::inference();
        let x = t(vec![0.0, 0.0], &[1, 2]);
        assert!(matches!(
            l2_normalize(&mut tape, &x, 1),
            Err(Error::DegenerateInput { op: "l2_normalize", .. })
        ));
    }

    #[test]
    fn clamp_min_floors_values() {
        let mut tape = Tape::inference();
        let x = t(vec![-1.0, 0.0, 2.0], &[3]);
        let y = clamp_min(&mut tape, &x, 0.0).unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn gelu_reference_points() {
        // tanh-form values, checked against the closed form at a few points
        assert!((gelu_val(0.0)).abs() < 1e-15);
        assert!((gelu_val(1.0) - 0.841192).abs() < 1e-5);
        assert!((gelu_val(-1.0) - (-0.158808)).abs() < 1e-5);
        // symmetry: g(x) - g(-x) == x
        for &x in &[0.3, 1.7, 2.5] {
            assert!((gelu_val(x) - gelu_val(-x) - x).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_collapses_to_scalar() {
        let mut tape = Tape::inference();
        let x = t(vec![1.0, 2.0, 3.5], &[3]);
        let s = sum(&mut tape, &x).unwrap();
        assert_eq!(s.ndim(), 0);
        assert_eq!(s.item(), 6.5);
    }

    #[test]
    fn frozen_chain_records_nothing() {
        let mut tape = Tape::new();
        let x = t(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let w = t(vec![0.1; 4], &[2, 2]);
        let h = matmul(&mut tape, &x, &w).unwrap();
        let h = gelu(&mut tape, &h).unwrap();
        let g = t(vec![1.0, 1.0], &[2]);
        let b = t(vec![0.0, 0.0], &[2]);
        let h = layer_norm(&mut tape, &h, &g, &b, 1e-5).unwrap();
        let _ = softmax(&mut tape, &h, 1).unwrap();
        assert_eq!(tape.entry_count(), 0);
        assert_eq!(tape.total_saved_bytes(), 0);
    }

    #[test]
    fn grad_flows_through_simple_chain() {
        // loss = sum(gelu(x @ w)) with x frozen, w trainable
        let mut tape = Tape::new();
        let x = t(vec![1.0, -0.5], &[1, 2]);
        let w = p(vec![0.3, -0.2, 0.7, 0.4], &[2, 2]);
        let h = matmul(&mut tape, &x, &w).unwrap();
        let y = gelu(&mut tape, &h).unwrap();
        let loss = sum(&mut tape, &y).unwrap();
        tape.backward(&loss).unwrap();
        let g = w.grad().unwrap();
        assert_eq!(g.len(), 4);
        assert!(g.iter().all(|v| v.is_finite()));
        // dL/dw[i][j] = x[i] * gelu'(h[j])
        let hv: Vec<f64> = {
            let mut t2 = Tape::inference();
            matmul(&mut t2, &x, &w).unwrap().to_vec()
        };
        for i in 0..2 {
            for j in 0..2 {
                let expect = x.to_vec()[i] * gelu_grad(hv[j]);
                assert!((g[i * 2 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shared_leaf_accumulates_grad() {
        // y = sum(w) + sum(w) should give grad 2 everywhere
        let mut tape = Tape::new();
        let w = p(vec![1.0, 2.0], &[2]);
        let s1 = sum(&mut tape, &w).unwrap();
        let s2 = sum(&mut tape, &w).unwrap();
        let y = add(&mut tape, &s1, &s2).unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 2.0]);
    }
}
