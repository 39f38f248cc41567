//! Reverse-mode tape: an append-only arena of op records.
//!
//! Every differentiable op appends one node holding exactly the values its
//! backward rule needs. `saved_bytes` on each node counts those retained f64
//! values (8 bytes apiece), so the running total is a direct measurement of
//! backward-pass activation memory. Ops whose inputs all have
//! `requires_grad == false` append nothing, which is what makes a frozen
//! subgraph free.
//!
//! Tapes are single-shot: one forward build, one `backward`, then the tape
//! only serves reporting. Nodes are never shared between tapes.

use std::collections::BTreeMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ops::OpRecord;
use crate::tensor::{TapeId, Tensor};

pub type NodeId = usize;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct Node {
    pub op_name: &'static str,
    pub scope: Rc<str>,
    pub inputs: Vec<NodeId>,
    pub saved_bytes: u64,
    pub record: OpRecord,
}

impl Node {
    fn is_leaf(&self) -> bool {
        matches!(self.record, OpRecord::Leaf(_))
    }
}

/// One recorded op, as seen by inspection code.
#[derive(Debug, Clone)]
pub struct TapeEntry<'a> {
    pub op_name: &'static str,
    pub scope: &'a str,
    pub inputs: &'a [NodeId],
    pub output: NodeId,
    pub saved_bytes: u64,
}

/// Saved-activation accounting for one tape, grouped two ways.
#[derive(Debug, Clone, Serialize)]
pub struct MemoryReport {
    pub total_saved_bytes: u64,
    pub entry_count: usize,
    pub by_op: BTreeMap<String, u64>,
    pub by_scope: BTreeMap<String, u64>,
}

pub struct Tape {
    id: TapeId,
    recording: bool,
    consumed: bool,
    scope: Rc<str>,
    nodes: Vec<Node>,
    total_saved_bytes: u64,
}

impl Tape {
    /// A recording tape for a training step.
    pub fn new() -> Tape {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            recording: true,
            consumed: false,
            scope: Rc::from(""),
            nodes: Vec::new(),
            total_saved_bytes: 0,
        }
    }

    /// A non-recording tape: ops run forward only and save nothing.
    pub fn inference() -> Tape {
        let mut t = Tape::new();
        t.recording = false;
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Label subsequently recorded entries (e.g. "vision.block2"). Purely
    /// diagnostic; grouping key of `MemoryReport::by_scope`.
    pub fn set_scope(&mut self, scope: &str) {
        if &*self.scope != scope {
            self.scope = Rc::from(scope);
        }
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    /// Whether an op over these inputs must record, erring on a dead tape.
    pub(crate) fn should_record(&self, inputs: &[&Tensor]) -> Result<bool> {
        let wants = self.recording && inputs.iter().any(|t| t.requires_grad());
        if wants && self.consumed {
            return Err(Error::TapeConsumed);
        }
        Ok(wants)
    }

    /// Node id for a grad-requiring tensor: its existing node on this tape, or
    /// a fresh leaf.
    fn input_id(&mut self, t: &Tensor) -> NodeId {
        debug_assert!(t.requires_grad());
        if let Some(id) = t.node_on(self.id) {
            return id;
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op_name: "leaf",
            scope: Rc::clone(&self.scope),
            inputs: Vec::new(),
            saved_bytes: 0,
            record: OpRecord::Leaf(t.clone()),
        });
        t.bind_node(self.id, id);
        id
    }

    /// Append an op node. `taped_inputs` lists only the grad-requiring inputs,
    /// in the order the record's backward emits their gradients.
    pub(crate) fn record(
        &mut self,
        op_name: &'static str,
        taped_inputs: &[&Tensor],
        record: OpRecord,
        saved_f64: usize,
        out: &Tensor,
    ) {
        let inputs: Vec<NodeId> = taped_inputs.iter().map(|t| self.input_id(t)).collect();
        let saved_bytes = 8 * saved_f64 as u64;
        self.total_saved_bytes += saved_bytes;
        let id = self.nodes.len();
        self.nodes.push(Node {
            op_name,
            scope: Rc::clone(&self.scope),
            inputs,
            saved_bytes,
            record,
        });
        out.bind_node(self.id, id);
    }

    /// Recorded op count (leaves excluded).
    pub fn entry_count(&self) -> usize {
        self.nodes.iter().filter(|n| !n.is_leaf()).count()
    }

    pub fn total_saved_bytes(&self) -> u64 {
        self.total_saved_bytes
    }

    /// All recorded ops in creation order (leaves excluded).
    pub fn entries(&self) -> Vec<TapeEntry<'_>> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| !n.is_leaf())
            .map(|(id, n)| TapeEntry {
                op_name: n.op_name,
                scope: &n.scope,
                inputs: &n.inputs,
                output: id,
                saved_bytes: n.saved_bytes,
            })
            .collect()
    }

    pub fn report(&self) -> MemoryReport {
        let mut by_op = BTreeMap::new();
        let mut by_scope = BTreeMap::new();
        for n in self.nodes.iter().filter(|n| !n.is_leaf()) {
            *by_op.entry(n.op_name.to_string()).or_insert(0) += n.saved_bytes;
            *by_scope.entry(n.scope.to_string()).or_insert(0) += n.saved_bytes;
        }
        MemoryReport {
            total_saved_bytes: self.total_saved_bytes,
            entry_count: self.entry_count(),
            by_op,
            by_scope,
        }
    }

    /// Reverse sweep from a scalar root. Accumulates into the `grad` buffers
    /// of every reachable leaf tensor, then marks the tape consumed.
    pub fn backward(&mut self, root: &Tensor) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if root.numel() != 1 {
            return Err(Error::NonScalarRoot {
                shape: root.shape().to_vec(),
            });
        }
        let root_id = root
            .node_on(self.id)
            .ok_or(Error::RootNotOnTape)?;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root_id] = Some(vec![1.0]);

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.record {
                OpRecord::Leaf(t) => {
                    let mut cur = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
                    for (c, gi) in cur.iter_mut().zip(&g) {
                        *c += gi;
                    }
                    t.set_grad(cur);
                }
                rec => {
                    let input_grads = rec.backward(&g);
                    debug_assert_eq!(input_grads.len(), node.inputs.len());
                    let input_ids: Vec<NodeId> = node.inputs.clone();
                    for (iid, ig) in input_ids.into_iter().zip(input_grads) {
                        match &mut grads[iid] {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&ig) {
                                    *a += b;
                                }
                            }
                            slot => *slot = Some(ig),
                        }
                    }
                }
            }
        }

        self.consumed = true;
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}
