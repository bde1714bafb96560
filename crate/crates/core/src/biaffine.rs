//! Biaffine arc and relation scoring over utterance states.
//!
//! Utterance states live in a (m+1)-row space: row 0 is a learned virtual
//! root, row i the mean of utterance i's syntactic token states. Head- and
//! dependent-specific single-layer ReLU MLPs project into arc and relation
//! spaces; arcs are scored
//!
//!   s(i, j) = r_i_headᵀ · U_arc · r_j_dep + r_i_headᵀ · u_arc
//!
//! and the head of dependent j is normalized over candidates i < j only (the
//! strict-precedence mask), so decoding can never produce a cycle. Relation
//! scores use the full biaffine form (bilinear + both linear terms + bias)
//! over k classes, class 0 being the pseudo-relation Root.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::encoder::xavier;
use crate::error::{Error, Result};
use crate::params::{ParamBinding, ParamStore};
use crate::tensor::Tensor;

pub const ROOT_RELATION_INDEX: usize = 0;

/// Decoded discourse structure of one snippet.
#[derive(Debug, Clone)]
pub struct DiscourseGraph {
    /// (m+1) x m; column j-1 holds P(head | dependent j). Rows at or past the
    /// dependent index are exactly zero.
    pub arc_probs: Tensor,
    /// Chosen head per dependent (index j-1), always < j; 0 means root.
    pub chosen_heads: Vec<usize>,
    /// Relation distribution (length k) per dependent at its chosen head.
    pub rel_probs: Vec<Tensor>,
}

pub fn register(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    d: usize,
    d_arc: usize,
    d_rel: usize,
    k: usize,
) -> Result<()> {
    store.insert("aggregate.root", Tensor::uniform(vec![d], -0.1, 0.1, rng))?;
    for side in ["arc_head", "arc_dep"] {
        store.insert(format!("biaffine.{side}.w"), xavier(d_arc, d, rng))?;
        store.insert(format!("biaffine.{side}.b"), Tensor::zeros(vec![d_arc]))?;
    }
    for side in ["rel_head", "rel_dep"] {
        store.insert(format!("biaffine.{side}.w"), xavier(d_rel, d, rng))?;
        store.insert(format!("biaffine.{side}.b"), Tensor::zeros(vec![d_rel]))?;
    }
    store.insert("biaffine.arc.u", xavier(d_arc, d_arc, rng))?;
    store.insert("biaffine.arc.bias", Tensor::uniform(vec![d_arc], -0.1, 0.1, rng))?;
    for t in 0..k {
        store.insert(format!("biaffine.rel.u{t}"), xavier(d_rel, d_rel, rng))?;
    }
    store.insert("biaffine.rel.w_head", xavier(k, d_rel, rng))?;
    store.insert("biaffine.rel.w_dep", xavier(k, d_rel, rng))?;
    store.insert("biaffine.rel.bias", Tensor::zeros(vec![k]))?;
    Ok(())
}

/// Mean-aggregate token states per utterance and prepend the learned root
/// vector: output index i is utterance i's state, index 0 the root.
pub fn utterance_states(
    tape: &mut Tape,
    bind: &ParamBinding,
    token_states: &[Vec<NodeId>],
) -> Result<Vec<NodeId>> {
    let mut states = Vec::with_capacity(token_states.len() + 1);
    states.push(bind.id("aggregate.root"));
    for tokens in token_states {
        if tokens.is_empty() {
            return Err(Error::config("cannot aggregate an utterance with no tokens"));
        }
        let total = tape.add_n(tokens)?;
        let mean = tape.affine(total, 1.0 / tokens.len() as f64, 0.0)?;
        states.push(mean);
    }
    Ok(states)
}

fn mlp(tape: &mut Tape, bind: &ParamBinding, name: &str, x: NodeId) -> Result<NodeId> {
    let w = bind.id(&format!("biaffine.{name}.w"));
    let b = bind.id(&format!("biaffine.{name}.b"));
    let wx = tape.matvec(w, x)?;
    let pre = tape.add(wx, b)?;
    tape.relu(pre)
}

/// Head/dependent projections of every utterance state, for one side
/// ("arc" or "rel").
fn project(
    tape: &mut Tape,
    bind: &ParamBinding,
    prefix: &str,
    states: &[NodeId],
) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
    let heads = states
        .iter()
        .map(|s| mlp(tape, bind, &format!("{prefix}_head"), *s))
        .collect::<Result<Vec<_>>>()?;
    let deps = states
        .iter()
        .map(|s| mlp(tape, bind, &format!("{prefix}_dep"), *s))
        .collect::<Result<Vec<_>>>()?;
    Ok((heads, deps))
}

/// Biaffine arc score for projected head/dependent vectors.
pub fn arc_score(
    tape: &mut Tape,
    u_mat: NodeId,
    u_vec: NodeId,
    r_head: NodeId,
    r_dep: NodeId,
) -> Result<NodeId> {
    let ud = tape.matvec(u_mat, r_dep)?;
    let bilinear = tape.dot(r_head, ud)?;
    let prior = tape.dot(r_head, u_vec)?;
    tape.add(bilinear, prior)
}

/// Raw arc scores: element (i, j) scores head candidate i for dependent j
/// (1-based dependents; row 0 is the root candidate). Returned as columns:
/// `scores[j-1][i]`.
pub fn score_arcs(
    tape: &mut Tape,
    bind: &ParamBinding,
    utt_states: &[NodeId],
) -> Result<Vec<Vec<NodeId>>> {
    let m = utt_states.len() - 1;
    if m < 1 {
        return Err(Error::config("arc scoring needs at least one dependent"));
    }
    let (heads, deps) = project(tape, bind, "arc", utt_states)?;
    let u_mat = bind.id("biaffine.arc.u");
    let u_vec = bind.id("biaffine.arc.bias");

    let mut columns = Vec::with_capacity(m);
    for j in 1..=m {
        let ud = tape.matvec(u_mat, deps[j])?;
        let mut col = Vec::with_capacity(m + 1);
        for head in heads.iter().take(m + 1) {
            let bilinear = tape.dot(*head, ud)?;
            let prior = tape.dot(*head, u_vec)?;
            col.push(tape.add(bilinear, prior)?);
        }
        columns.push(col);
    }
    Ok(columns)
}

/// Mask scores to heads strictly before the dependent and normalize each
/// dependent's column into a probability vector node.
pub fn mask_and_normalize(tape: &mut Tape, score_columns: &[Vec<NodeId>]) -> Result<Vec<NodeId>> {
    let m = score_columns.len();
    let mut dists = Vec::with_capacity(m);
    for (j0, col) in score_columns.iter().enumerate() {
        let j = j0 + 1;
        let stacked = tape.stack(col)?;
        let mask: Vec<bool> = (0..m + 1).map(|i| i < j).collect();
        dists.push(tape.softmax(stacked, Some(&mask))?);
    }
    Ok(dists)
}

/// Sum of per-dependent cross-entropies at the gold heads.
pub fn arc_loss(tape: &mut Tape, arc_dists: &[NodeId], gold_heads: &[usize]) -> Result<NodeId> {
    if arc_dists.len() != gold_heads.len() {
        return Err(Error::config(format!(
            "arc loss: {} dependents vs {} gold heads",
            arc_dists.len(),
            gold_heads.len()
        )));
    }
    let mut terms = Vec::with_capacity(gold_heads.len());
    for (j0, (&dist, &gold)) in arc_dists.iter().zip(gold_heads).enumerate() {
        if gold >= j0 + 1 {
            return Err(Error::validation(
                "<snippet>",
                format!("gold head {gold} does not precede dependent {}", j0 + 1),
            ));
        }
        terms.push(tape.cross_entropy(dist, gold)?);
    }
    let stacked = tape.stack(&terms)?;
    tape.sum(stacked)
}

/// Relation distribution (softmax over k classes) for the arc head→dep.
pub fn score_relations(
    tape: &mut Tape,
    bind: &ParamBinding,
    utt_states: &[NodeId],
    head: usize,
    dep: usize,
    k: usize,
) -> Result<NodeId> {
    let r_head = mlp(tape, bind, "rel_head", utt_states[head])?;
    let r_dep = mlp(tape, bind, "rel_dep", utt_states[dep])?;
    relation_distribution(tape, bind, r_head, r_dep, k)
}

/// Full biaffine relation scorer on projected vectors:
/// s_t = r_headᵀ U_t r_dep + w_head_t · r_head + w_dep_t · r_dep + b_t.
pub fn relation_distribution(
    tape: &mut Tape,
    bind: &ParamBinding,
    r_head: NodeId,
    r_dep: NodeId,
    k: usize,
) -> Result<NodeId> {
    let mut bilinear = Vec::with_capacity(k);
    for t in 0..k {
        let u = bind.id(&format!("biaffine.rel.u{t}"));
        let ud = tape.matvec(u, r_dep)?;
        bilinear.push(tape.dot(r_head, ud)?);
    }
    let bilinear = tape.stack(&bilinear)?;
    let head_term = tape.matvec(bind.id("biaffine.rel.w_head"), r_head)?;
    let dep_term = tape.matvec(bind.id("biaffine.rel.w_dep"), r_dep)?;
    let bias = bind.id("biaffine.rel.bias");
    let scores = tape.add_n(&[bilinear, head_term, dep_term, bias])?;
    tape.softmax(scores, None)
}

/// Sum of relation cross-entropies over dependents whose gold head is not
/// the root; root arcs carry the pseudo-relation and are excluded.
pub fn rel_loss(
    tape: &mut Tape,
    rel_dists: &[Option<NodeId>],
    gold_heads: &[usize],
    gold_relations: &[usize],
) -> Result<NodeId> {
    let mut terms = Vec::new();
    for (j0, &gold_head) in gold_heads.iter().enumerate() {
        if gold_head == 0 {
            continue;
        }
        let dist = rel_dists[j0].ok_or_else(|| {
            Error::config(format!("missing relation distribution for dependent {}", j0 + 1))
        })?;
        terms.push(tape.cross_entropy(dist, gold_relations[j0])?);
    }
    if terms.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let stacked = tape.stack(&terms)?;
    tape.sum(stacked)
}

/// Greedy decode: per dependent, the valid head with maximal probability,
/// ties to the smaller index. Strict precedence guarantees a forest.
pub fn decode_heads(arc_prob_columns: &[Tensor]) -> Vec<usize> {
    arc_prob_columns
        .iter()
        .enumerate()
        .map(|(j0, col)| {
            let j = j0 + 1;
            let mut best = 0usize;
            for i in 1..j {
                if col.data()[i] > col.data()[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Predicted relation index at a decoded arc: root arcs are forced to the
/// pseudo-relation Root, other arcs take the argmax over real relations.
pub fn decode_relation(head: usize, rel_probs: &Tensor) -> usize {
    if head == 0 || rel_probs.numel() < 2 {
        return ROOT_RELATION_INDEX;
    }
    let mut best = 1usize;
    for t in 2..rel_probs.numel() {
        if rel_probs.data()[t] > rel_probs.data()[best] {
            best = t;
        }
    }
    best
}
