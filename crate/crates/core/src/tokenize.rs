//! Vocabulary construction and ingestion of pre-annotated datasets.
//!
//! Annotation files are JSON lines. Each record carries final
//! whitespace-level tokens, one universal POS tag per token, entity spans
//! and a label:
//!
//! ```text
//! {"text": "The sponge soaked up the water .",
//!  "tokens": ["The", "sponge", "soaked", "up", "the", "water", "."],
//!  "pos": ["DET", "NOUN", "VERB", "ADP", "DET", "NOUN", "PUNCT"],
//!  "spans": [{"start": 1, "end": 1, "entity_id": "sponge", "source": "pos"},
//!            {"start": 2, "end": 2, "entity_id": "soak", "source": "pos"}],
//!  "label": 1}
//! ```
//!
//! A span may also carry `kg_id`, the graph-node id used to look up a
//! graph embedding when it differs from the dictionary id.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Reserved ids followed by every whitespace token seen at least
    /// `min_freq` times, in lexicographic order.
    pub fn build<'a, I>(lines: I, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if min_freq == 0 {
            return Err(invalid!("min_freq must be at least 1"));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut any = false;
        for line in lines {
            for tok in line.split_whitespace() {
                any = true;
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !any {
            return Err(invalid!("cannot build a vocabulary from an empty corpus"));
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            counts
                .into_iter()
                .filter(|&(t, c)| c >= min_freq && !RESERVED.contains(&t))
                .map(|(t, _)| t.to_string()),
        );
        Ok(Vocabulary::from_tokens(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// One token per line, reserved tokens first.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::parse(path, 1, "vocabulary must start with the reserved tokens"));
        }
        let vocab = Vocabulary::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::parse(path, 1, "duplicate vocabulary entry"));
        }
        Ok(vocab)
    }
}

/// Universal POS tags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Upos {
    ADJ,
    ADP,
    ADV,
    AUX,
    CCONJ,
    DET,
    INTJ,
    NOUN,
    NUM,
    PART,
    PRON,
    PROPN,
    PUNCT,
    SCONJ,
    SYM,
    VERB,
    X,
}

impl Upos {
    pub const ALL: [Upos; 17] = [
        Upos::ADJ,
        Upos::ADP,
        Upos::ADV,
        Upos::AUX,
        Upos::CCONJ,
        Upos::DET,
        Upos::INTJ,
        Upos::NOUN,
        Upos::NUM,
        Upos::PART,
        Upos::PRON,
        Upos::PROPN,
        Upos::PUNCT,
        Upos::SCONJ,
        Upos::SYM,
        Upos::VERB,
        Upos::X,
    ];

    /// Nouns, verbs and adjectives: the parts of speech that receive
    /// knowledge under the content-POS policy.
    pub fn is_content(self) -> bool {
        matches!(self, Upos::NOUN | Upos::VERB | Upos::ADJ)
    }
}

impl fmt::Display for Upos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Upos {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Upos::ALL
            .iter()
            .copied()
            .find(|u| u.to_string() == s)
            .ok_or_else(|| format!("unknown POS tag `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanSource {
    Pos,
    Linker,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntitySpan {
    /// First token of the entity; the anchor for every integration method.
    pub start: usize,
    /// Last token, inclusive.
    pub end: usize,
    pub entity_id: String,
    pub kg_id: Option<String>,
    pub source: SpanSource,
    pub surface: String,
}

impl EntitySpan {
    /// Id used for graph-embedding lookups.
    pub fn graph_id(&self) -> &str {
        self.kg_id.as_deref().unwrap_or(&self.entity_id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub pos: Vec<Upos>,
    pub spans: Vec<EntitySpan>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<String>, pos: Vec<Upos>, mut spans: Vec<EntitySpan>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(invalid!("empty token sequence"));
        }
        if tokens.len() != pos.len() {
            return Err(invalid!(
                "{} tokens but {} POS tags",
                tokens.len(),
                pos.len()
            ));
        }
        spans.sort_by_key(|s| s.start);
        let len = tokens.len();
        for (i, s) in spans.iter().enumerate() {
            if s.start > s.end || s.end >= len {
                return Err(invalid!(
                    "span [{}, {}] out of range for {len} tokens",
                    s.start,
                    s.end
                ));
            }
            if i > 0 && spans[i - 1].end >= s.start {
                return Err(invalid!(
                    "spans [{}, {}] and [{}, {}] overlap",
                    spans[i - 1].start,
                    spans[i - 1].end,
                    s.start,
                    s.end
                ));
            }
        }
        Ok(TokenSequence { tokens, pos, spans })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ids(&self, vocab: &Vocabulary) -> Vec<usize> {
        vocab.encode(&self.tokens)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Number(f64),
    Text(String),
    Tags(Vec<String>),
}

impl Label {
    /// Canonical string used for class lookups.
    pub fn class_key(&self) -> Option<String> {
        match self {
            Label::Number(v) => Some(format!("{v}")),
            Label::Text(s) => Some(s.clone()),
            Label::Tags(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub seq: TokenSequence,
    pub label: Label,
}

#[derive(Serialize, Deserialize)]
struct SpanRecord {
    start: usize,
    end: usize,
    entity_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kg_id: Option<String>,
    source: SpanSource,
}

#[derive(Serialize, Deserialize)]
struct Record {
    #[serde(default)]
    text: String,
    tokens: Vec<String>,
    pos: Vec<String>,
    #[serde(default)]
    spans: Vec<SpanRecord>,
    label: Label,
}

fn parse_record(line: &str) -> std::result::Result<Example, String> {
    let rec: Record = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let pos = rec
        .pos
        .iter()
        .map(|p| p.parse::<Upos>())
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let len = rec.tokens.len();
    let spans = rec
        .spans
        .into_iter()
        .map(|s| {
            if s.start > s.end || s.end >= len {
                return Err(format!(
                    "span [{}, {}] out of range for {len} tokens",
                    s.start, s.end
                ));
            }
            Ok(EntitySpan {
                surface: rec.tokens[s.start..=s.end].join(" "),
                start: s.start,
                end: s.end,
                entity_id: s.entity_id,
                kg_id: s.kg_id,
                source: s.source,
            })
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if let Label::Tags(tags) = &rec.label {
        if tags.len() != len {
            return Err(format!("{} tags for {len} tokens", tags.len()));
        }
    }
    let seq = TokenSequence::new(rec.tokens, pos, spans).map_err(|e| e.to_string())?;
    Ok(Example {
        seq,
        label: rec.label,
    })
}

/// Loads an annotation file. Blank lines are skipped; any malformed record
/// fails the whole load with its 1-based line number.
pub fn load_annotations(path: &Path) -> Result<Vec<Example>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex = parse_record(&line).map_err(|msg| Error::parse(path, i + 1, msg))?;
        out.push(ex);
    }
    Ok(out)
}

/// Serializes one example as an annotation record.
pub fn annotation_line(ex: &Example) -> String {
    let rec = Record {
        text: ex.seq.tokens.join(" "),
        tokens: ex.seq.tokens.clone(),
        pos: ex.seq.pos.iter().map(ToString::to_string).collect(),
        spans: ex
            .seq
            .spans
            .iter()
            .map(|s| SpanRecord {
                start: s.start,
                end: s.end,
                entity_id: s.entity_id.clone(),
                kg_id: s.kg_id.clone(),
                source: s.source,
            })
            .collect(),
        label: ex.label.clone(),
    };
    serde_json::to_string(&rec).expect("annotation records serialize")
}

pub fn write_annotations(path: &Path, examples: &[Example]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for ex in examples {
        writeln!(f, "{}", annotation_line(ex)).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EntityPolicy {
    /// Spans whose anchor token is a noun, verb or adjective.
    ContentPos,
    /// Spans produced by an entity linker.
    LinkerProvided,
}

impl FromStr for EntityPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "content-pos" => Ok(EntityPolicy::ContentPos),
            "linker" | "linker-provided" => Ok(EntityPolicy::LinkerProvided),
            other => Err(format!("unknown entity policy `{other}`")),
        }
    }
}

impl fmt::Display for EntityPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntityPolicy::ContentPos => "content-pos",
            EntityPolicy::LinkerProvided => "linker-provided",
        })
    }
}

/// Spans eligible for knowledge integration, in their original order.
pub fn select_entities(seq: &TokenSequence, policy: EntityPolicy) -> Vec<EntitySpan> {
    seq.spans
        .iter()
        .filter(|s| match policy {
            EntityPolicy::ContentPos => seq.pos[s.start].is_content(),
            EntityPolicy::LinkerProvided => s.source == SpanSource::Linker,
        })
        .cloned()
        .collect()
}
