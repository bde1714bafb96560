//! Multi-relational graph convolution over the discourse graph, plus the
//! fusion layer that folds utterance states back into token states.
//!
//! Nodes are the virtual root and the m utterances. Every discourse arc
//! (head h → dependent d) contributes messages in both directions — an
//! incoming-bucket message at d and an outgoing-bucket message at h — and
//! every node has a self-loop with its own bucket and a dedicated SelfRel
//! embedding. The composition is multiplicative:
//!
//!   r_i' = tanh( Σ_arcs Σ_t P(t|arc) · W_bucket · (r_j ⊙ h_t) )
//!
//! where P is the soft relation distribution from the biaffine scorer (a
//! one-hot Root for root arcs) and h_t the relation embedding, transformed
//! per layer by h_t' = W_rel h_t. Soft weighting keeps the whole path
//! differentiable into the relation scorer.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::encoder::xavier;
use crate::error::{Error, Result};
use crate::params::{ParamBinding, ParamStore};
use crate::tensor::Tensor;

const BUCKETS: [&str; 3] = ["incoming", "outgoing", "selfloop"];

/// Relation carried by an arc in the discourse graph.
#[derive(Debug, Clone, Copy)]
pub enum ArcRelation {
    /// Soft distribution over all k relation classes (node of length k,
    /// class 0 = Root).
    Soft(NodeId),
    /// Gold root attachment: one-hot on the Root embedding.
    Root,
}

/// One discourse arc, node indices in 0..=m (0 = virtual root).
#[derive(Debug, Clone, Copy)]
pub struct DiscourseArc {
    pub head: usize,
    pub dep: usize,
    pub relation: ArcRelation,
}

/// Parameters: per layer one d x d matrix per bucket plus the relation
/// transform, and a shared embedding table with one row per relation class
/// and a final SelfRel row.
pub fn register(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    d: usize,
    n_layers: usize,
    k_rel: usize,
) -> Result<()> {
    for k in 0..n_layers {
        for bucket in BUCKETS {
            store.insert(format!("relgcn.l{k}.{bucket}"), xavier(d, d, rng))?;
        }
        store.insert(format!("relgcn.l{k}.w_rel"), xavier(d, d, rng))?;
    }
    store.insert(
        "relgcn.rel_emb",
        Tensor::uniform(vec![k_rel + 1, d], -0.5, 0.5, rng),
    )?;
    Ok(())
}

/// Soft relation weighting: Σ_t dist[t] · messages[t].
pub fn weighted_sum(tape: &mut Tape, dist: NodeId, messages: &[NodeId]) -> Result<NodeId> {
    let v = tape.value(dist).clone();
    if v.numel() != messages.len() {
        return Err(Error::config(format!(
            "weighted_sum: {} weights vs {} messages",
            v.numel(),
            messages.len()
        )));
    }
    let total: f64 = v.data().iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::validation(
            "<graph>",
            format!("arc relation distribution sums to {total}, not 1"),
        ));
    }
    let mut parts = Vec::with_capacity(messages.len());
    for (t, &msg) in messages.iter().enumerate() {
        let weight = tape.pick(dist, t)?;
        parts.push(tape.scale(msg, weight)?);
    }
    tape.add_n(&parts)
}

/// The message W_bucket (r_src ⊙ h_rel) for every relation class, then
/// soft-weighted; root arcs use the Root embedding directly.
fn arc_message(
    tape: &mut Tape,
    bucket_w: NodeId,
    src_state: NodeId,
    relation: ArcRelation,
    rel_embs: &[NodeId],
) -> Result<NodeId> {
    match relation {
        ArcRelation::Root => {
            let composed = tape.mul(src_state, rel_embs[0])?;
            tape.matvec(bucket_w, composed)
        }
        ArcRelation::Soft(dist) => {
            let k = tape.value(dist).numel();
            let mut msgs = Vec::with_capacity(k);
            for &emb in rel_embs.iter().take(k) {
                let composed = tape.mul(src_state, emb)?;
                msgs.push(tape.matvec(bucket_w, composed)?);
            }
            weighted_sum(tape, dist, &msgs)
        }
    }
}

/// One RelGCN layer. `rel_embs` holds the k relation embeddings followed by
/// the SelfRel embedding. Returns updated node states; relation embeddings
/// for the next layer come from [`advance_relations`].
pub fn layer(
    tape: &mut Tape,
    bind: &ParamBinding,
    node_states: &[NodeId],
    arcs: &[DiscourseArc],
    rel_embs: &[NodeId],
    layer_index: usize,
) -> Result<Vec<NodeId>> {
    let w_in = bind.id(&format!("relgcn.l{layer_index}.incoming"));
    let w_out = bind.id(&format!("relgcn.l{layer_index}.outgoing"));
    let w_self = bind.id(&format!("relgcn.l{layer_index}.selfloop"));
    let self_emb = rel_embs[rel_embs.len() - 1];

    let mut incoming: Vec<Vec<NodeId>> = vec![Vec::new(); node_states.len()];
    for (i, &state) in node_states.iter().enumerate() {
        let composed = tape.mul(state, self_emb)?;
        incoming[i].push(tape.matvec(w_self, composed)?);
    }
    for arc in arcs {
        if arc.head >= node_states.len() || arc.dep >= node_states.len() {
            return Err(Error::validation(
                "<graph>",
                format!("arc {}→{} outside nodes 0..{}", arc.head, arc.dep, node_states.len()),
            ));
        }
        let down = arc_message(tape, w_in, node_states[arc.head], arc.relation, rel_embs)?;
        incoming[arc.dep].push(down);
        let up = arc_message(tape, w_out, node_states[arc.dep], arc.relation, rel_embs)?;
        incoming[arc.head].push(up);
    }

    incoming
        .into_iter()
        .map(|msgs| {
            let total = tape.add_n(&msgs)?;
            tape.tanh(total)
        })
        .collect()
}

/// Per-layer relation embedding update h' = W_rel h.
pub fn advance_relations(
    tape: &mut Tape,
    bind: &ParamBinding,
    rel_embs: &[NodeId],
    layer_index: usize,
) -> Result<Vec<NodeId>> {
    let w = bind.id(&format!("relgcn.l{layer_index}.w_rel"));
    rel_embs.iter().map(|&e| tape.matvec(w, e)).collect()
}

/// Initial relation embedding nodes: k relation rows plus SelfRel.
pub fn initial_relations(tape: &mut Tape, bind: &ParamBinding, k_rel: usize) -> Result<Vec<NodeId>> {
    let table = bind.id("relgcn.rel_emb");
    (0..=k_rel).map(|t| tape.row(table, t)).collect()
}

/// Run `n_layers` of message passing with dropout on layer outputs while
/// training. With zero layers the input states come back unchanged.
#[allow(clippy::too_many_arguments)]
pub fn encode(
    tape: &mut Tape,
    bind: &ParamBinding,
    node_states: &[NodeId],
    arcs: &[DiscourseArc],
    k_rel: usize,
    n_layers: usize,
    dropout: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<NodeId>> {
    let mut states = node_states.to_vec();
    if n_layers == 0 {
        return Ok(states);
    }
    let mut rels = initial_relations(tape, bind, k_rel)?;
    for k in 0..n_layers {
        states = layer(tape, bind, &states, arcs, &rels, k)?;
        if training && dropout > 0.0 {
            states = states
                .into_iter()
                .map(|s| tape.dropout(s, dropout, true, rng))
                .collect::<Result<Vec<_>>>()?;
        }
        if k + 1 < n_layers {
            rels = advance_relations(tape, bind, &rels, k)?;
        }
    }
    Ok(states)
}

// ── Fusion ─────────────────────────────────────────────────────────

pub fn register_fusion(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize) -> Result<()> {
    store.insert("fusion.w", xavier(d, 2 * d, rng))?;
    store.insert("fusion.b", Tensor::zeros(vec![d]))?;
    Ok(())
}

/// z = W1 · [h ; r] + b1 for one token state h and its utterance state r.
pub fn fuse(tape: &mut Tape, bind: &ParamBinding, token_state: NodeId, utt_state: NodeId) -> Result<NodeId> {
    let cat = tape.concat(token_state, utt_state)?;
    let wx = tape.matvec(bind.id("fusion.w"), cat)?;
    tape.add(wx, bind.id("fusion.b"))
}
