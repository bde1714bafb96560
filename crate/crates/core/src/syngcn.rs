//! Gated directed graph convolution over syntactic dependency trees.
//!
//! Each dependency (head h, dependent t) contributes a Forward edge h→t and a
//! Backward edge t→h; every token also has a SelfLoop edge. Parameters are
//! indexed by edge direction and layer only. A message along edge u→w of
//! type e in layer k is
//!
//!   g · (W_e h_u + b_e),   g = σ(ŵ_e · h_u + b̂_e)
//!
//! and the receiving state is ReLU of the summed messages. Message passing is
//! strictly intra-utterance.

use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::corpus::Utterance;
use crate::encoder::xavier;
use crate::error::{Error, Result};
use crate::params::{ParamBinding, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynEdgeType {
    Forward,
    Backward,
    SelfLoop,
}

impl SynEdgeType {
    fn key(self) -> &'static str {
        match self {
            SynEdgeType::Forward => "fwd",
            SynEdgeType::Backward => "bwd",
            SynEdgeType::SelfLoop => "self",
        }
    }
}

/// Directed edge between 0-based token positions of one utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynEdge {
    pub src: usize,
    pub dst: usize,
    pub ty: SynEdgeType,
}

/// Build the edge list for one utterance. Dependencies to the syntactic root
/// (head 0) produce no Forward/Backward pair, and dependencies whose label is
/// excluded are skipped; self loops always remain.
pub fn build_syntactic_graph(
    utt: &Utterance,
    excluded_dep_labels: &BTreeSet<String>,
) -> Result<Vec<SynEdge>> {
    let n = utt.len();
    let mut edges = Vec::with_capacity(3 * n);
    for (t, tok) in utt.tokens.iter().enumerate() {
        let head = tok.dep_head.ok_or_else(|| {
            Error::validation("<utterance>", format!("token {} lacks a dependency head", t + 1))
        })?;
        if head > n {
            return Err(Error::validation(
                "<utterance>",
                format!("token {} has dependency head {head} out of range", t + 1),
            ));
        }
        if head == 0 {
            continue;
        }
        if let Some(label) = &tok.dep_label {
            if excluded_dep_labels.contains(label) {
                continue;
            }
        }
        edges.push(SynEdge {
            src: head - 1,
            dst: t,
            ty: SynEdgeType::Forward,
        });
        edges.push(SynEdge {
            src: t,
            dst: head - 1,
            ty: SynEdgeType::Backward,
        });
    }
    for t in 0..n {
        edges.push(SynEdge {
            src: t,
            dst: t,
            ty: SynEdgeType::SelfLoop,
        });
    }
    Ok(edges)
}

pub fn register(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    d: usize,
    n_layers: usize,
) -> Result<()> {
    for k in 0..n_layers {
        for ty in [SynEdgeType::Forward, SynEdgeType::Backward, SynEdgeType::SelfLoop] {
            let key = ty.key();
            store.insert(format!("syngcn.l{k}.{key}.w"), xavier(d, d, rng))?;
            store.insert(format!("syngcn.l{k}.{key}.b"), Tensor::zeros(vec![d]))?;
            store.insert(
                format!("syngcn.l{k}.{key}.gate_w"),
                Tensor::uniform(vec![d], -0.1, 0.1, rng),
            )?;
            store.insert(format!("syngcn.l{k}.{key}.gate_b"), Tensor::zeros(vec![]))?;
        }
    }
    Ok(())
}

struct EdgeParams {
    w: NodeId,
    b: NodeId,
    gate_w: NodeId,
    gate_b: NodeId,
}

fn edge_params(bind: &ParamBinding, layer: usize, ty: SynEdgeType) -> EdgeParams {
    let key = ty.key();
    EdgeParams {
        w: bind.id(&format!("syngcn.l{layer}.{key}.w")),
        b: bind.id(&format!("syngcn.l{layer}.{key}.b")),
        gate_w: bind.id(&format!("syngcn.l{layer}.{key}.gate_w")),
        gate_b: bind.id(&format!("syngcn.l{layer}.{key}.gate_b")),
    }
}

/// One gated graph convolution layer over one utterance.
pub fn layer(
    tape: &mut Tape,
    bind: &ParamBinding,
    states: &[NodeId],
    edges: &[SynEdge],
    layer_index: usize,
) -> Result<Vec<NodeId>> {
    for e in edges {
        if e.src >= states.len() || e.dst >= states.len() {
            return Err(Error::validation(
                "<utterance>",
                format!("edge {}→{} exceeds {} tokens", e.src, e.dst, states.len()),
            ));
        }
    }
    let params = [
        edge_params(bind, layer_index, SynEdgeType::Forward),
        edge_params(bind, layer_index, SynEdgeType::Backward),
        edge_params(bind, layer_index, SynEdgeType::SelfLoop),
    ];
    let pick = |ty: SynEdgeType| match ty {
        SynEdgeType::Forward => &params[0],
        SynEdgeType::Backward => &params[1],
        SynEdgeType::SelfLoop => &params[2],
    };

    let mut incoming: Vec<Vec<NodeId>> = vec![Vec::new(); states.len()];
    for e in edges {
        let p = pick(e.ty);
        let h_u = states[e.src];
        let gate_pre = tape.dot(p.gate_w, h_u)?;
        let gate_pre = tape.add(gate_pre, p.gate_b)?;
        let gate = tape.sigmoid(gate_pre)?;
        let wh = tape.matvec(p.w, h_u)?;
        let msg = tape.add(wh, p.b)?;
        let gated = tape.scale(msg, gate)?;
        incoming[e.dst].push(gated);
    }

    incoming
        .into_iter()
        .map(|msgs| {
            let total = tape.add_n(&msgs)?;
            tape.relu(total)
        })
        .collect()
}

/// Apply `n_layers` SynGCN layers to one utterance, with inverted dropout on
/// each layer output while training. `n_layers == 0` passes states through.
#[allow(clippy::too_many_arguments)]
pub fn encode(
    tape: &mut Tape,
    bind: &ParamBinding,
    states: &[NodeId],
    edges: &[SynEdge],
    n_layers: usize,
    dropout: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<NodeId>> {
    let mut current = states.to_vec();
    for k in 0..n_layers {
        current = layer(tape, bind, &current, edges, k)?;
        if training && dropout > 0.0 {
            current = current
                .into_iter()
                .map(|s| tape.dropout(s, dropout, true, rng))
                .collect::<Result<Vec<_>>>()?;
        }
    }
    Ok(current)
}
