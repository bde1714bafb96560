//! Dropped pronoun recovery layer.
//!
//! For a target token w with discourse-aware state z_w, attention over every
//! context token (flattened across all context utterances, one joint softmax)
//! builds a referent representation
//!
//!   a = softmax_over_context( w2 · (z_w ⊙ z_c) + b2 ),   r_w = Σ a_c z_c
//!
//! and the classifier concatenates the *syntactic* token state h_w with r_w:
//!
//!   P(y | w, C) = softmax( W4 tanh(W3 [h_w ; r_w] + b3) + b4 ).

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::encoder::xavier;
use crate::error::{Error, Result};
use crate::params::{ParamBinding, ParamStore};
use crate::tensor::Tensor;

pub fn register(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    d: usize,
    t_labels: usize,
) -> Result<()> {
    store.insert("recovery.w2", Tensor::uniform(vec![d], -0.1, 0.1, rng))?;
    store.insert("recovery.b2", Tensor::zeros(vec![]))?;
    store.insert("recovery.w3", xavier(d, 2 * d, rng))?;
    store.insert("recovery.b3", Tensor::zeros(vec![d]))?;
    store.insert("recovery.w4", xavier(t_labels, d, rng))?;
    store.insert("recovery.b4", Tensor::zeros(vec![t_labels]))?;
    Ok(())
}

/// Attention weights over the flattened context and the referent vector.
pub fn referent_attention(
    tape: &mut Tape,
    bind: &ParamBinding,
    z_target: NodeId,
    z_context: &[NodeId],
) -> Result<(NodeId, NodeId)> {
    if z_context.is_empty() {
        return Err(Error::validation(
            "<snippet>",
            "pronoun recovery needs at least one context token",
        ));
    }
    let w2 = bind.id("recovery.w2");
    let b2 = bind.id("recovery.b2");
    let mut logits = Vec::with_capacity(z_context.len());
    for &zc in z_context {
        let prod = tape.mul(z_target, zc)?;
        let score = tape.dot(w2, prod)?;
        logits.push(tape.add(score, b2)?);
    }
    let stacked = tape.stack(&logits)?;
    let weights = tape.softmax(stacked, None)?;

    let mut parts = Vec::with_capacity(z_context.len());
    for (c, &zc) in z_context.iter().enumerate() {
        let w = tape.pick(weights, c)?;
        parts.push(tape.scale(zc, w)?);
    }
    let referent = tape.add_n(&parts)?;
    Ok((weights, referent))
}

/// Label distribution for one target token.
pub fn classify(
    tape: &mut Tape,
    bind: &ParamBinding,
    h_target: NodeId,
    referent: NodeId,
) -> Result<NodeId> {
    let cat = tape.concat(h_target, referent)?;
    let pre = tape.matvec(bind.id("recovery.w3"), cat)?;
    let pre = tape.add(pre, bind.id("recovery.b3"))?;
    let hr = tape.tanh(pre)?;
    let scores = tape.matvec(bind.id("recovery.w4"), hr)?;
    let scores = tape.add(scores, bind.id("recovery.b4"))?;
    tape.softmax(scores, None)
}

/// Cross-entropy summed over every target-utterance token, "None" included.
pub fn dpr_loss(tape: &mut Tape, label_dists: &[NodeId], gold_labels: &[usize]) -> Result<NodeId> {
    if label_dists.len() != gold_labels.len() {
        return Err(Error::config(format!(
            "dpr loss: {} predictions vs {} gold labels",
            label_dists.len(),
            gold_labels.len()
        )));
    }
    let mut terms = Vec::with_capacity(gold_labels.len());
    for (&dist, &gold) in label_dists.iter().zip(gold_labels) {
        if gold >= tape.value(dist).numel() {
            return Err(Error::validation(
                "<snippet>",
                format!("pronoun label index {gold} outside the vocabulary"),
            ));
        }
        terms.push(tape.cross_entropy(dist, gold)?);
    }
    let stacked = tape.stack(&terms)?;
    tape.sum(stacked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup(d: usize, t: usize) -> (ParamStore, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let mut store = ParamStore::new();
        register(&mut store, &mut rng, d, t).unwrap();
        (store, rng)
    }

    #[test]
    fn single_context_token_takes_all_attention() {
        let d = 3;
        let (store, mut rng) = setup(d, 4);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let zt = tape.constant(Tensor::uniform(vec![d], -1.0, 1.0, &mut rng));
        let zc = Tensor::uniform(vec![d], -1.0, 1.0, &mut rng);
        let zc_id = tape.constant(zc.clone());
        let (aw, r) = referent_attention(&mut tape, &bind, zt, &[zc_id]).unwrap();
        assert_eq!(tape.value(aw).data(), &[1.0]);
        assert_eq!(tape.value(r).data(), zc.data());
    }

    #[test]
    fn identical_context_tokens_split_attention_evenly() {
        let d = 3;
        let (store, mut rng) = setup(d, 4);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let zt = tape.constant(Tensor::uniform(vec![d], -1.0, 1.0, &mut rng));
        let zc = tape.constant(Tensor::uniform(vec![d], -1.0, 1.0, &mut rng));
        let (aw, _) = referent_attention(&mut tape, &bind, zt, &[zc, zc]).unwrap();
        assert_eq!(tape.value(aw).data(), &[0.5, 0.5]);
    }

    #[test]
    fn empty_context_is_a_validation_error() {
        let (store, mut rng) = setup(3, 4);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let zt = tape.constant(Tensor::uniform(vec![3], -1.0, 1.0, &mut rng));
        assert!(referent_attention(&mut tape, &bind, zt, &[]).is_err());
    }

    #[test]
    fn attention_matches_brute_force_flattened_softmax() {
        let d = 4;
        let (store, mut rng) = setup(d, 4);
        let zt = Tensor::uniform(vec![d], -1.0, 1.0, &mut rng);
        let zcs: Vec<Tensor> = (0..3)
            .map(|_| Tensor::uniform(vec![d], -1.0, 1.0, &mut rng))
            .collect();

        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let zt_id = tape.constant(zt.clone());
        let zc_ids: Vec<NodeId> = zcs.iter().map(|t| tape.constant(t.clone())).collect();
        let (aw, r) = referent_attention(&mut tape, &bind, zt_id, &zc_ids).unwrap();

        let w2 = store.get("recovery.w2").unwrap();
        let logits: Vec<f64> = zcs
            .iter()
            .map(|zc| {
                (0..d)
                    .map(|i| w2.data()[i] * zt.data()[i] * zc.data()[i])
                    .sum::<f64>()
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (got, e) in tape.value(aw).data().iter().zip(&exps) {
            assert!((got - e / z).abs() < 1e-12);
        }
        for i in 0..d {
            let want: f64 = zcs
                .iter()
                .zip(&exps)
                .map(|(zc, e)| e / z * zc.data()[i])
                .sum();
            assert!((tape.value(r).data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_context_permutes_weights_and_keeps_referent() {
        let d = 3;
        let (store, mut rng) = setup(d, 4);
        let zt = Tensor::uniform(vec![d], -1.0, 1.0, &mut rng);
        let zcs: Vec<Tensor> = (0..4)
            .map(|_| Tensor::uniform(vec![d], -1.0, 1.0, &mut rng))
            .collect();
        let perm = [2usize, 0, 3, 1];

        let run = |order: &[usize]| -> (Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let zt_id = tape.constant(zt.clone());
            let ids: Vec<NodeId> = order
                .iter()
                .map(|&i| tape.constant(zcs[i].clone()))
                .collect();
            let (aw, r) = referent_attention(&mut tape, &bind, zt_id, &ids).unwrap();
            (
                tape.value(aw).data().to_vec(),
                tape.value(r).data().to_vec(),
            )
        };

        let (aw_base, r_base) = run(&[0, 1, 2, 3]);
        let (aw_perm, r_perm) = run(&perm);
        for (new_pos, &old) in perm.iter().enumerate() {
            assert!((aw_perm[new_pos] - aw_base[old]).abs() < 1e-12);
        }
        for (a, b) in r_base.iter().zip(&r_perm) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_classifier_parameters_give_uniform_labels() {
        let d = 3;
        let t = 5;
        let (mut store, mut rng) = setup(d, t);
        store.get_mut("recovery.w3").unwrap().data_mut().fill(0.0);
        store.get_mut("recovery.w4").unwrap().data_mut().fill(0.0);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let h = tape.constant(Tensor::uniform(vec![d], -1.0, 1.0, &mut rng));
        let r = tape.constant(Tensor::uniform(vec![d], -1.0, 1.0, &mut rng));
        let dist = classify(&mut tape, &bind, h, r).unwrap();
        for p in tape.value(dist).data() {
            assert!((p - 1.0 / t as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_output_is_a_distribution() {
        let d = 4;
        let t = 7;
        let (store, mut rng) = setup(d, t);
        for _ in 0..20 {
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let h = tape.constant(Tensor::uniform(vec![d], -2.0, 2.0, &mut rng));
            let r = tape.constant(Tensor::uniform(vec![d], -2.0, 2.0, &mut rng));
            let dist = classify(&mut tape, &bind, h, r).unwrap();
            let total: f64 = tape.value(dist).data().iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dpr_loss_examples() {
        let mut tape = Tape::new();
        // Perfect predictions.
        let mut onehot = vec![0.0; 4];
        onehot[1] = 1.0;
        let p = tape.constant(Tensor::vector(onehot));
        let loss = dpr_loss(&mut tape, &[p], &[1]).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);

        // Uniform with T = 17: ln 17 per token.
        let uniform = tape.constant(Tensor::vector(vec![1.0 / 17.0; 17]));
        let loss = dpr_loss(&mut tape, &[uniform], &[3]).unwrap();
        assert!((tape.value(loss).item() - 17.0f64.ln()).abs() < 1e-12);

        // Three tokens with hand-set distributions: sum of the three terms.
        let d1 = tape.constant(Tensor::vector(vec![0.5, 0.25, 0.25]));
        let d2 = tape.constant(Tensor::vector(vec![0.1, 0.6, 0.3]));
        let d3 = tape.constant(Tensor::vector(vec![0.2, 0.2, 0.6]));
        let loss = dpr_loss(&mut tape, &[d1, d2, d3], &[0, 1, 2]).unwrap();
        let want = -(0.5f64.ln()) - (0.6f64.ln()) - (0.6f64.ln());
        assert!((tape.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn out_of_vocabulary_gold_label_is_rejected() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![0.5, 0.5]));
        assert!(dpr_loss(&mut tape, &[p], &[2]).is_err());
    }

    #[test]
    fn recovery_gradients_match_finite_differences() {
        let d = 3;
        let t = 4;
        let (store, mut rng) = setup(d, t);
        let h = Tensor::uniform(vec![d], -1.0, 1.0, &mut rng);
        let zt = Tensor::uniform(vec![d], -1.0, 1.0, &mut rng);
        let zcs: Vec<Tensor> = (0..3)
            .map(|_| Tensor::uniform(vec![d], -1.0, 1.0, &mut rng))
            .collect();

        let loss_of = |store: &ParamStore, want_grads: bool| -> (f64, Vec<(String, Tensor)>) {
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let h_id = tape.constant(h.clone());
            let zt_id = tape.constant(zt.clone());
            let zc_ids: Vec<NodeId> = zcs.iter().map(|c| tape.constant(c.clone())).collect();
            let (_, r) = referent_attention(&mut tape, &bind, zt_id, &zc_ids).unwrap();
            let dist = classify(&mut tape, &bind, h_id, r).unwrap();
            let loss = dpr_loss(&mut tape, &[dist], &[2]).unwrap();
            if !want_grads {
                return (tape.value(loss).item(), Vec::new());
            }
            tape.backward(loss).unwrap();
            (tape.value(loss).item(), bind.gradients(&tape))
        };

        let (_, analytic) = loss_of(&store, true);
        let eps = 1e-4;
        for (path, grad) in &analytic {
            for i in 0..grad.numel() {
                let probe = |delta: f64| {
                    let mut st = store.clone();
                    st.get_mut(path).unwrap().data_mut()[i] += delta;
                    loss_of(&st, false).0
                };
                let num = (probe(eps) - probe(-eps)) / (2.0 * eps);
                let a = grad.data()[i];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                assert!(rel <= 1e-3, "{path}[{i}]: analytic {a} vs numeric {num}");
            }
        }
    }
}
