//! Token embedding and bidirectional GRU encoder.
//!
//! Each utterance is encoded independently: embedding rows feed forward and
//! backward GRU passes from zero initial states, and position t outputs the
//! concatenation of both hidden states, so the token state dimension is
//! twice the per-direction hidden size.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::params::{ParamBinding, ParamStore};
use crate::tensor::Tensor;

pub const UNK_INDEX: usize = 0;

const GATES: [&str; 3] = ["update", "reset", "cand"];

pub(crate) fn xavier<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform(vec![rows, cols], -limit, limit, rng)
}

/// Register the embedding table and both GRU directions.
///
/// Embeddings start at U(-0.1, 0.1); `pretrained` rows (surface, vector)
/// override matching vocabulary entries and must have length `d_emb`.
pub fn register(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    vocab: &crate::corpus::Vocab,
    d_emb: usize,
    d_hidden: usize,
    pretrained: &[(String, Vec<f64>)],
) -> Result<()> {
    let mut table = Tensor::uniform(vec![vocab.len(), d_emb], -0.1, 0.1, rng);
    for (surface, row) in pretrained {
        if row.len() != d_emb {
            return Err(Error::config(format!(
                "embedding row for {surface:?} has {} values, expected {d_emb}",
                row.len()
            )));
        }
        if let Some(index) = vocab.get(surface) {
            let cols = table.cols();
            table.data_mut()[index * cols..(index + 1) * cols].copy_from_slice(row);
        }
    }
    store.insert("embed.table", table)?;

    for dir in ["fwd", "bwd"] {
        for gate in GATES {
            store.insert(format!("gru.{dir}.w_{gate}"), xavier(d_hidden, d_emb, rng))?;
            store.insert(format!("gru.{dir}.u_{gate}"), xavier(d_hidden, d_hidden, rng))?;
            store.insert(format!("gru.{dir}.b_{gate}"), Tensor::zeros(vec![d_hidden]))?;
        }
    }
    Ok(())
}

/// Embedding lookup; out-of-vocabulary ids must already be mapped to
/// [`UNK_INDEX`]. Rows share the table, so repeated tokens accumulate
/// gradient on the same row.
pub fn embed(tape: &mut Tape, bind: &ParamBinding, token_ids: &[usize]) -> Result<Vec<NodeId>> {
    let table = bind.id("embed.table");
    token_ids.iter().map(|&id| tape.row(table, id)).collect()
}

struct GruGates {
    w: NodeId,
    u: NodeId,
    b: NodeId,
}

fn gates(bind: &ParamBinding, dir: &str, gate: &str) -> GruGates {
    GruGates {
        w: bind.id(&format!("gru.{dir}.w_{gate}")),
        u: bind.id(&format!("gru.{dir}.u_{gate}")),
        b: bind.id(&format!("gru.{dir}.b_{gate}")),
    }
}

/// One GRU step: h' = (1 - z) ⊙ h + z ⊙ tanh(W x + U (r ⊙ h) + b).
fn gru_step(
    tape: &mut Tape,
    x: NodeId,
    h: NodeId,
    update: &GruGates,
    reset: &GruGates,
    cand: &GruGates,
) -> Result<NodeId> {
    let gate = |tape: &mut Tape, g: &GruGates, x: NodeId, h: NodeId| -> Result<NodeId> {
        let wx = tape.matvec(g.w, x)?;
        let uh = tape.matvec(g.u, h)?;
        let s = tape.add_n(&[wx, uh, g.b])?;
        tape.sigmoid(s)
    };
    let z = gate(tape, update, x, h)?;
    let r = gate(tape, reset, x, h)?;

    let rh = tape.mul(r, h)?;
    let wx = tape.matvec(cand.w, x)?;
    let urh = tape.matvec(cand.u, rh)?;
    let pre = tape.add_n(&[wx, urh, cand.b])?;
    let n = tape.tanh(pre)?;

    let one_minus_z = tape.affine(z, -1.0, 1.0)?;
    let keep = tape.mul(one_minus_z, h)?;
    let write = tape.mul(z, n)?;
    tape.add(keep, write)
}

fn gru_direction(
    tape: &mut Tape,
    bind: &ParamBinding,
    dir: &str,
    inputs: impl Iterator<Item = NodeId>,
    d_hidden: usize,
) -> Result<Vec<NodeId>> {
    let update = gates(bind, dir, "update");
    let reset = gates(bind, dir, "reset");
    let cand = gates(bind, dir, "cand");
    let mut h = tape.constant(Tensor::zeros(vec![d_hidden]));
    let mut states = Vec::new();
    for x in inputs {
        h = gru_step(tape, x, h, &update, &reset, &cand)?;
        states.push(h);
    }
    Ok(states)
}

/// Bidirectional GRU over one utterance. Output t is
/// concat(forward state t, backward state t); dimension 2 * d_hidden.
pub fn bigru(
    tape: &mut Tape,
    bind: &ParamBinding,
    inputs: &[NodeId],
    d_hidden: usize,
) -> Result<Vec<NodeId>> {
    if inputs.is_empty() {
        return Err(Error::config("bigru needs at least one token"));
    }
    let fwd = gru_direction(tape, bind, "fwd", inputs.iter().copied(), d_hidden)?;
    let mut bwd = gru_direction(tape, bind, "bwd", inputs.iter().rev().copied(), d_hidden)?;
    bwd.reverse();
    fwd.into_iter()
        .zip(bwd)
        .map(|(f, b)| tape.concat(f, b))
        .collect()
}
