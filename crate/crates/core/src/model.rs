//! The assembled joint model: encoder → SynGCN → biaffine → RelGCN/fusion →
//! pronoun recovery, sharing one parameter store and one tape per snippet.
//!
//! The discourse graph fed to the RelGCN comes from the gold arcs under
//! teacher forcing (training) or from the decoded arcs (inference); in both
//! cases arcs carry the scorer's soft relation distribution, except root
//! arcs, which use the dedicated Root embedding. With `detach_rel_probs` the
//! distributions enter the RelGCN as constants, which keeps pronoun-loss
//! gradients out of the biaffine scorer; gradient checking turns the flag
//! off to verify the fully differentiable path.

use std::collections::{BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::biaffine::{self, DiscourseGraph};
use crate::corpus::{ConversationSnippet, Corpus, LabelVocabularies, Vocab};
use crate::encoder::{self, UNK_INDEX};
use crate::error::{Error, Result};
use crate::params::{ParamBinding, ParamStore};
use crate::recovery;
use crate::relgcn::{self, ArcRelation, DiscourseArc};
use crate::syngcn;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_emb: usize,
    pub d_hidden: usize,
    pub d_arc: usize,
    pub d_rel: usize,
    pub syngcn_layers: usize,
    pub relgcn_layers: usize,
    pub dropout: f64,
    pub detach_rel_probs: bool,
    pub disable_relgcn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_emb: 300,
            d_hidden: 250,
            d_arc: 100,
            d_rel: 100,
            syngcn_layers: 1,
            relgcn_layers: 3,
            dropout: 0.5,
            detach_rel_probs: true,
            disable_relgcn: false,
        }
    }
}

impl ModelConfig {
    /// Token state dimension (both BiGRU directions concatenated).
    pub fn d(&self) -> usize {
        2 * self.d_hidden
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_emb", self.d_emb),
            ("d_hidden", self.d_hidden),
            ("d_arc", self.d_arc),
            ("d_rel", self.d_rel),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Where the RelGCN graph comes from and whether dropout fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub teacher_forcing: bool,
    pub dropout_active: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        ForwardOptions {
            teacher_forcing: true,
            dropout_active: true,
        }
    }

    pub fn eval() -> Self {
        ForwardOptions {
            teacher_forcing: false,
            dropout_active: false,
        }
    }

    /// Teacher-forced graph without dropout: the forward pass is a smooth
    /// function of the parameters, as finite differencing requires.
    pub fn deterministic_train() -> Self {
        ForwardOptions {
            teacher_forcing: true,
            dropout_active: false,
        }
    }
}

/// Everything one forward pass produces for a snippet.
#[derive(Debug)]
pub struct SnippetForward {
    pub loss_arc: NodeId,
    pub loss_rel: NodeId,
    pub loss_dp: NodeId,
    /// Decoded structure (argmax heads, relation distributions at them).
    pub graph: DiscourseGraph,
    /// Predicted relation index per dependent, Root forced on root arcs.
    pub pred_relations: Vec<usize>,
    /// Predicted pronoun label index per target-utterance token.
    pub pred_labels: Vec<usize>,
    pub gold_heads: Vec<usize>,
    pub gold_relations: Vec<usize>,
    pub gold_labels: Vec<usize>,
}

pub struct JointModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub token_vocab: Vocab,
    pub vocabs: LabelVocabularies,
    pub excluded_dep_labels: BTreeSet<String>,
}

impl JointModel {
    /// Initialize all parameters from the corpus vocabularies. Registration
    /// order fixes parameter enumeration; `seed` fixes the initial values.
    pub fn new(
        corpus: &Corpus,
        config: ModelConfig,
        seed: u64,
        pretrained: &[(String, Vec<f64>)],
    ) -> Result<Self> {
        config.validate()?;
        let token_vocab = corpus.token_vocab();
        let vocabs = corpus.vocabs.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.d();
        encoder::register(
            &mut params,
            &mut rng,
            &token_vocab,
            config.d_emb,
            config.d_hidden,
            pretrained,
        )?;
        syngcn::register(&mut params, &mut rng, d, config.syngcn_layers)?;
        biaffine::register(
            &mut params,
            &mut rng,
            d,
            config.d_arc,
            config.d_rel,
            vocabs.relations.len(),
        )?;
        relgcn::register(&mut params, &mut rng, d, config.relgcn_layers, vocabs.relations.len())?;
        relgcn::register_fusion(&mut params, &mut rng, d)?;
        recovery::register(&mut params, &mut rng, d, vocabs.pronoun_labels.len())?;
        Ok(JointModel {
            config,
            params,
            token_vocab,
            vocabs,
            excluded_dep_labels: corpus.excluded_dep_labels.clone(),
        })
    }

    fn token_ids(&self, utt: &crate::corpus::Utterance) -> Vec<usize> {
        utt.tokens
            .iter()
            .map(|t| self.token_vocab.get(&t.surface).unwrap_or(UNK_INDEX))
            .collect()
    }

    fn gold_structure(
        &self,
        snippet: &ConversationSnippet,
    ) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
        let gold_heads: Vec<usize> = snippet.utterances.iter().map(|u| u.disc_head).collect();
        let gold_relations = snippet
            .utterances
            .iter()
            .map(|u| {
                self.vocabs.relations.get(&u.disc_relation).ok_or_else(|| {
                    Error::validation(
                        &snippet.id,
                        format!("relation {:?} not in the training vocabulary", u.disc_relation),
                    )
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let gold_labels = snippet
            .target()
            .tokens
            .iter()
            .map(|t| {
                self.vocabs.pronoun_labels.get(&t.pronoun_label).ok_or_else(|| {
                    Error::validation(
                        &snippet.id,
                        format!("pronoun label {:?} not in the training vocabulary", t.pronoun_label),
                    )
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((gold_heads, gold_relations, gold_labels))
    }

    /// Full forward pass over one snippet.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        snippet: &ConversationSnippet,
        options: ForwardOptions,
        rng: &mut ChaCha8Rng,
    ) -> Result<SnippetForward> {
        let m = snippet.utterances.len();
        if m < 2 {
            return Err(Error::validation(
                &snippet.id,
                "pronoun recovery needs at least one context utterance",
            ));
        }
        let (gold_heads, gold_relations, gold_labels) = self.gold_structure(snippet)?;
        let k = self.vocabs.relations.len();
        let cfg = &self.config;
        let training = options.dropout_active;

        // Sequential and syntactic token states, per utterance.
        let mut syntactic: Vec<Vec<NodeId>> = Vec::with_capacity(m);
        for utt in &snippet.utterances {
            let ids = self.token_ids(utt);
            let embedded = encoder::embed(tape, bind, &ids)?;
            let sequential = encoder::bigru(tape, bind, &embedded, cfg.d_hidden)?;
            let edges = syngcn::build_syntactic_graph(utt, &self.excluded_dep_labels)
                .map_err(|e| match e {
                    Error::Validation { msg, .. } => Error::validation(&snippet.id, msg),
                    other => other,
                })?;
            let states = syngcn::encode(
                tape,
                bind,
                &sequential,
                &edges,
                cfg.syngcn_layers,
                cfg.dropout,
                training,
                rng,
            )?;
            syntactic.push(states);
        }

        // Utterance space and arc scoring.
        let utt_states = biaffine::utterance_states(tape, bind, &syntactic)?;
        let score_cols = biaffine::score_arcs(tape, bind, &utt_states)?;
        let arc_dists = biaffine::mask_and_normalize(tape, &score_cols)?;
        let loss_arc = biaffine::arc_loss(tape, &arc_dists, &gold_heads)?;

        let arc_prob_tensors: Vec<Tensor> =
            arc_dists.iter().map(|d| tape.value(*d).clone()).collect();
        let chosen_heads = biaffine::decode_heads(&arc_prob_tensors);

        // Relation distributions, deduplicated per (head, dependent) pair.
        let mut rel_cache: HashMap<(usize, usize), NodeId> = HashMap::new();
        let mut rel_at = |tape: &mut Tape, head: usize, dep: usize| -> Result<NodeId> {
            if let Some(id) = rel_cache.get(&(head, dep)) {
                return Ok(*id);
            }
            let dist = biaffine::score_relations(tape, bind, &utt_states, head, dep, k)?;
            rel_cache.insert((head, dep), dist);
            Ok(dist)
        };

        let mut gold_rel_dists: Vec<Option<NodeId>> = Vec::with_capacity(m);
        for (j0, &head) in gold_heads.iter().enumerate() {
            if head == 0 {
                gold_rel_dists.push(None);
            } else {
                gold_rel_dists.push(Some(rel_at(tape, head, j0 + 1)?));
            }
        }
        let loss_rel = biaffine::rel_loss(tape, &gold_rel_dists, &gold_heads, &gold_relations)?;

        // Discourse graph for the RelGCN: gold arcs under teacher forcing,
        // decoded arcs otherwise.
        let graph_heads: &[usize] = if options.teacher_forcing {
            &gold_heads
        } else {
            &chosen_heads
        };
        let mut arcs = Vec::with_capacity(m);
        for (j0, &head) in graph_heads.iter().enumerate() {
            let relation = if head == 0 {
                ArcRelation::Root
            } else {
                let dist = rel_at(tape, head, j0 + 1)?;
                let dist = if cfg.detach_rel_probs {
                    let frozen = tape.value(dist).clone();
                    tape.constant(frozen)
                } else {
                    dist
                };
                ArcRelation::Soft(dist)
            };
            arcs.push(DiscourseArc {
                head,
                dep: j0 + 1,
                relation,
            });
        }

        let relgcn_layers = if cfg.disable_relgcn { 0 } else { cfg.relgcn_layers };
        let discourse_states = relgcn::encode(
            tape,
            bind,
            &utt_states,
            &arcs,
            k,
            relgcn_layers,
            cfg.dropout,
            training,
            rng,
        )?;

        // Discourse-aware token states.
        let mut fused: Vec<Vec<NodeId>> = Vec::with_capacity(m);
        for (i0, tokens) in syntactic.iter().enumerate() {
            let utt_state = discourse_states[i0 + 1];
            let mut zs = Vec::with_capacity(tokens.len());
            for &h in tokens {
                zs.push(relgcn::fuse(tape, bind, h, utt_state)?);
            }
            fused.push(zs);
        }

        // Pronoun recovery over the target utterance.
        let target0 = snippet.pro_drop_index - 1;
        let context_z: Vec<NodeId> = snippet
            .context_indices()
            .flat_map(|i| fused[i - 1].iter().copied())
            .collect();
        if context_z.is_empty() {
            return Err(Error::validation(&snippet.id, "context has no tokens"));
        }
        let mut label_dists = Vec::with_capacity(syntactic[target0].len());
        let mut pred_labels = Vec::with_capacity(syntactic[target0].len());
        for (t, &h_target) in syntactic[target0].iter().enumerate() {
            let z_target = fused[target0][t];
            let (_, referent) = recovery::referent_attention(tape, bind, z_target, &context_z)?;
            let dist = recovery::classify(tape, bind, h_target, referent)?;
            pred_labels.push(argmax(tape.value(dist).data()));
            label_dists.push(dist);
        }
        let loss_dp = recovery::dpr_loss(tape, &label_dists, &gold_labels)?;

        // Predicted relations at the decoded heads.
        let mut rel_prob_tensors = Vec::with_capacity(m);
        let mut pred_relations = Vec::with_capacity(m);
        for (j0, &head) in chosen_heads.iter().enumerate() {
            let probs = if head == 0 {
                let mut onehot = vec![0.0; k];
                onehot[biaffine::ROOT_RELATION_INDEX] = 1.0;
                Tensor::vector(onehot)
            } else {
                let dist = rel_at(tape, head, j0 + 1)?;
                tape.value(dist).clone()
            };
            pred_relations.push(biaffine::decode_relation(head, &probs));
            rel_prob_tensors.push(probs);
        }

        let mut arc_probs = Tensor::zeros(vec![m + 1, m]);
        for (j0, col) in arc_prob_tensors.iter().enumerate() {
            for i in 0..=m {
                arc_probs.set2(i, j0, col.data()[i]);
            }
        }

        Ok(SnippetForward {
            loss_arc,
            loss_rel,
            loss_dp,
            graph: DiscourseGraph {
                arc_probs,
                chosen_heads,
                rel_probs: rel_prob_tensors,
            },
            pred_relations,
            pred_labels,
            gold_heads,
            gold_relations,
            gold_labels,
        })
    }
}

pub fn argmax(data: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in data.iter().enumerate().skip(1) {
        if *v > data[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_synthetic, SyntheticSpec, TaskMode};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_emb: 6,
            d_hidden: 4,
            d_arc: 5,
            d_rel: 5,
            syngcn_layers: 1,
            relgcn_layers: 2,
            dropout: 0.0,
            detach_rel_probs: true,
            disable_relgcn: false,
        }
    }

    fn tiny_corpus() -> Corpus {
        generate_synthetic(&SyntheticSpec {
            n_snippets: 4,
            vocab_size: 12,
            seed: 5,
            task_mode: TaskMode::Plain,
        })
        .unwrap()
    }

    #[test]
    fn forward_produces_consistent_shapes() {
        let corpus = tiny_corpus();
        let model = JointModel::new(&corpus, tiny_config(), 11, &[]).unwrap();
        for snippet in &corpus.snippets {
            let mut tape = Tape::new();
            let bind = model.params.bind(&mut tape);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = model
                .forward(&mut tape, &bind, snippet, ForwardOptions::eval(), &mut rng)
                .unwrap();
            let m = snippet.utterances.len();
            assert_eq!(out.graph.chosen_heads.len(), m);
            assert_eq!(out.graph.arc_probs.shape(), &[m + 1, m]);
            assert_eq!(out.pred_labels.len(), snippet.target().len());
            for (j0, h) in out.graph.chosen_heads.iter().enumerate() {
                assert!(*h < j0 + 1);
            }
            for (j0, (&h, r)) in out
                .graph
                .chosen_heads
                .iter()
                .zip(&out.pred_relations)
                .enumerate()
            {
                assert_eq!(h == 0, *r == biaffine::ROOT_RELATION_INDEX, "dependent {}", j0 + 1);
            }
            assert!(tape.value(out.loss_arc).item() >= 0.0);
            assert!(tape.value(out.loss_rel).item() >= 0.0);
            assert!(tape.value(out.loss_dp).item() >= 0.0);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let corpus = tiny_corpus();
        let model = JointModel::new(&corpus, tiny_config(), 11, &[]).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let bind = model.params.bind(&mut tape);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let out = model
                .forward(
                    &mut tape,
                    &bind,
                    &corpus.snippets[0],
                    ForwardOptions::train(),
                    &mut rng,
                )
                .unwrap();
            (
                tape.value(out.loss_arc).item().to_bits(),
                tape.value(out.loss_rel).item().to_bits(),
                tape.value(out.loss_dp).item().to_bits(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn snippet_without_context_is_rejected() {
        let corpus = tiny_corpus();
        let model = JointModel::new(&corpus, tiny_config(), 11, &[]).unwrap();
        let mut lone = corpus.snippets[0].clone();
        lone.utterances.truncate(1);
        lone.pro_drop_index = 1;
        let mut tape = Tape::new();
        let bind = model.params.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = model
            .forward(&mut tape, &bind, &lone, ForwardOptions::eval(), &mut rng)
            .unwrap_err();
        assert!(matches!(err, Error::Validation { .. }));
    }

    #[test]
    fn disable_relgcn_uses_raw_utterance_states() {
        // With the RelGCN disabled the fused states use layer-0 utterance
        // states, so relgcn parameters cannot affect the pronoun loss.
        let corpus = tiny_corpus();
        let mut config = tiny_config();
        config.disable_relgcn = true;
        let model = JointModel::new(&corpus, config, 11, &[]).unwrap();

        let mut tape = Tape::new();
        let bind = model.params.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = model
            .forward(
                &mut tape,
                &bind,
                &corpus.snippets[0],
                ForwardOptions::train(),
                &mut rng,
            )
            .unwrap();
        tape.backward(out.loss_dp).unwrap();
        for (path, grad) in bind.gradients(&tape) {
            if path.starts_with("relgcn.") {
                assert_eq!(grad.l2_norm(), 0.0, "{path} must stay untouched");
            }
        }
    }
}
