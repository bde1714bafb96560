//! Conversation data model, line-delimited JSON corpus format, and label
//! vocabularies.
//!
//! One JSON object per line, fields exactly:
//! `{id, pro_drop_index, utterances: [{speaker, disc_head, disc_relation,
//! tokens: [{surface, dep_head, dep_label, pronoun_label}]}]}`.
//!
//! Utterance indices are 1-based; a discourse head of 0 is the virtual root.
//! Token dependency heads are 1-based within the utterance, 0 for the
//! syntactic root. Utterances whose tokens all lack dependency fields get a
//! chain fallback at load time.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NONE_LABEL: &str = "None";
pub const ROOT_RELATION: &str = "Root";
pub const FALLBACK_DEP_LABEL: &str = "dep";

/// The eight discourse relations used by the synthetic generator; the first
/// six hold between different speakers, the last two within one speaker.
pub const DEFAULT_RELATIONS: [&str; 8] = [
    "Agreement",
    "Understanding",
    "Directive",
    "Question",
    "Answer",
    "Feedback",
    "Expansion",
    "Contingency",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dep_head: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dep_label: Option<String>,
    pub pronoun_label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: String,
    pub disc_head: usize,
    pub disc_relation: String,
    pub tokens: Vec<Token>,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn has_dependencies(&self) -> bool {
        self.tokens.iter().all(|t| t.dep_head.is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationSnippet {
    pub id: String,
    /// 1-based index of the pro-drop (target) utterance.
    pub pro_drop_index: usize,
    pub utterances: Vec<Utterance>,
}

impl ConversationSnippet {
    pub fn target(&self) -> &Utterance {
        &self.utterances[self.pro_drop_index - 1]
    }

    /// Context utterance indices (1-based), i.e. everything but the target.
    pub fn context_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (1..=self.utterances.len()).filter(move |i| *i != self.pro_drop_index)
    }
}

/// Chain fallback for utterances without dependency annotation: token i
/// attaches to token i-1, token 1 to the root, all labelled "dep".
/// Already-annotated utterances pass through unchanged.
pub fn chain_fallback_dependencies(mut utt: Utterance) -> Utterance {
    if utt.has_dependencies() {
        return utt;
    }
    for (i, tok) in utt.tokens.iter_mut().enumerate() {
        tok.dep_head = Some(i); // 1-based predecessor; 0 = root for token 1
        tok.dep_label = Some(FALLBACK_DEP_LABEL.to_string());
    }
    utt
}

/// An ordered string vocabulary with O(1) lookup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    items: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(items: Vec<String>) -> Self {
        let index = items
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Vocab { items, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Vec<String> {
        v.items
    }
}

impl Vocab {
    pub fn new() -> Self {
        Vocab::from(Vec::new())
    }

    pub fn with_first(item: &str) -> Self {
        Vocab::from(vec![item.to_string()])
    }

    /// Index of `item`, inserting at the end on first appearance.
    pub fn intern(&mut self, item: &str) -> usize {
        if let Some(&i) = self.index.get(item) {
            return i;
        }
        let i = self.items.len();
        self.items.push(item.to_string());
        self.index.insert(item.to_string(), i);
        i
    }

    pub fn get(&self, item: &str) -> Option<usize> {
        self.index.get(item).copied()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.items[index]
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

/// Pronoun labels ("None" at index 0), discourse relations ("Root" at index
/// 0), and dependency labels, all in first-appearance order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocabularies {
    pub pronoun_labels: Vocab,
    pub relations: Vocab,
    pub dep_labels: Vocab,
}

impl LabelVocabularies {
    pub fn empty() -> Self {
        LabelVocabularies {
            pronoun_labels: Vocab::with_first(NONE_LABEL),
            relations: Vocab::with_first(ROOT_RELATION),
            dep_labels: Vocab::new(),
        }
    }

    pub fn from_snippets(snippets: &[ConversationSnippet]) -> Self {
        let mut v = LabelVocabularies::empty();
        for sn in snippets {
            for utt in &sn.utterances {
                v.relations.intern(&utt.disc_relation);
                for tok in &utt.tokens {
                    v.pronoun_labels.intern(&tok.pronoun_label);
                    if let Some(dep) = &tok.dep_label {
                        v.dep_labels.intern(dep);
                    }
                }
            }
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub snippets: Vec<ConversationSnippet>,
    pub vocabs: LabelVocabularies,
    /// Dependency labels whose edges are dropped from syntactic graphs.
    pub excluded_dep_labels: BTreeSet<String>,
}

impl Corpus {
    pub fn from_snippets(snippets: Vec<ConversationSnippet>) -> Result<Self> {
        for sn in &snippets {
            validate_snippet(sn)?;
        }
        let vocabs = LabelVocabularies::from_snippets(&snippets);
        Ok(Corpus {
            snippets,
            vocabs,
            excluded_dep_labels: BTreeSet::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.snippets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snippets.is_empty()
    }

    /// Surface-form vocabulary with the UNK sentinel at index 0.
    pub fn token_vocab(&self) -> Vocab {
        let mut v = Vocab::with_first("<unk>");
        for sn in &self.snippets {
            for utt in &sn.utterances {
                for tok in &utt.tokens {
                    v.intern(&tok.surface);
                }
            }
        }
        v
    }
}

fn validate_utterance(id: &str, utt_index: usize, utt: &Utterance) -> Result<()> {
    let fail = |msg: String| Err(Error::validation(id, msg));
    if utt.tokens.is_empty() {
        return fail(format!("utterance {utt_index} has no tokens"));
    }
    if utt.disc_head >= utt_index {
        return fail(format!(
            "utterance {utt_index} has disc_head {} but heads must strictly precede dependents",
            utt.disc_head
        ));
    }
    let is_root = utt.disc_head == 0;
    if is_root != (utt.disc_relation == ROOT_RELATION) {
        return fail(format!(
            "utterance {utt_index}: relation must be {ROOT_RELATION} iff disc_head is 0 \
             (got head {} with relation {})",
            utt.disc_head, utt.disc_relation
        ));
    }
    let n = utt.tokens.len();
    for (t, tok) in utt.tokens.iter().enumerate() {
        if tok.dep_head.is_some() != tok.dep_label.is_some() {
            return fail(format!(
                "utterance {utt_index} token {}: dep_head and dep_label must come together",
                t + 1
            ));
        }
        if let Some(h) = tok.dep_head {
            if h > n {
                return fail(format!(
                    "utterance {utt_index} token {}: dep_head {h} out of range 0..={n}",
                    t + 1
                ));
            }
            if h == t + 1 {
                return fail(format!(
                    "utterance {utt_index} token {}: token is its own dependency head",
                    t + 1
                ));
            }
        }
    }
    let annotated = utt.tokens.iter().filter(|t| t.dep_head.is_some()).count();
    if annotated != 0 && annotated != n {
        return fail(format!(
            "utterance {utt_index}: dependency annotation must cover all tokens or none"
        ));
    }
    Ok(())
}

pub fn validate_snippet(sn: &ConversationSnippet) -> Result<()> {
    if sn.utterances.is_empty() {
        return Err(Error::validation(&sn.id, "snippet has no utterances"));
    }
    if sn.pro_drop_index == 0 || sn.pro_drop_index > sn.utterances.len() {
        return Err(Error::validation(
            &sn.id,
            format!(
                "pro_drop_index {} out of range 1..={}",
                sn.pro_drop_index,
                sn.utterances.len()
            ),
        ));
    }
    for (i, utt) in sn.utterances.iter().enumerate() {
        validate_utterance(&sn.id, i + 1, utt)?;
    }
    Ok(())
}

/// Parse a corpus from line-delimited JSON. Validates every invariant and
/// applies the chain fallback to unannotated utterances. `excluded_dep_labels`
/// marks dependency types whose edges are pruned from syntactic graphs.
pub fn read_corpus<R: Read>(reader: R, excluded_dep_labels: &[String]) -> Result<Corpus> {
    let mut snippets = Vec::new();
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut sn: ConversationSnippet =
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        validate_snippet(&sn)?;
        sn.utterances = sn
            .utterances
            .into_iter()
            .map(chain_fallback_dependencies)
            .collect();
        snippets.push(sn);
    }
    let mut corpus = Corpus::from_snippets(snippets)?;
    corpus.excluded_dep_labels = excluded_dep_labels.iter().cloned().collect();
    Ok(corpus)
}

pub fn load_corpus(path: impl AsRef<Path>, excluded_dep_labels: &[String]) -> Result<Corpus> {
    let file = std::fs::File::open(path.as_ref())?;
    read_corpus(file, excluded_dep_labels)
}

pub fn write_corpus<W: Write>(mut writer: W, snippets: &[ConversationSnippet]) -> Result<()> {
    for sn in snippets {
        let line = serde_json::to_string(sn).map_err(|e| Error::config(e.to_string()))?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

pub fn save_corpus(path: impl AsRef<Path>, snippets: &[ConversationSnippet]) -> Result<()> {
    let mut file = std::fs::File::create(path.as_ref())?;
    write_corpus(&mut file, snippets)?;
    Ok(())
}
