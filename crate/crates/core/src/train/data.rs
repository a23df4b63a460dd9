//! Turning annotated examples into per-method model inputs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::assemble::{assemble, build_visibility_mask, AssembledInput, Layout};
use crate::encoder::{TaskFamily, TaskKind};
use crate::error::{invalid, Result};
use crate::kstore::KnowledgeStore;
use crate::numcore::AttnMask;
use crate::tokenize::{select_entities, EntityPolicy, Example, Label, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "KT")]
    Kt,
    #[serde(rename = "KT-Attn")]
    KtAttn,
    #[serde(rename = "KT-Emb")]
    KtEmb,
    #[serde(rename = "KG-Emb")]
    KgEmb,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Baseline,
        Method::Kt,
        Method::KtAttn,
        Method::KtEmb,
        Method::KgEmb,
    ];

    pub fn is_embedding(self) -> bool {
        matches!(self, Method::KtEmb | Method::KgEmb)
    }

    pub fn uses_knowledge(self) -> bool {
        self != Method::Baseline
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Baseline => "baseline",
            Method::Kt => "KT",
            Method::KtAttn => "KT-Attn",
            Method::KtEmb => "KT-Emb",
            Method::KgEmb => "KG-Emb",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let t = s.trim();
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.to_string().eq_ignore_ascii_case(t))
            .ok_or_else(|| format!("unknown method `{t}`"))
    }
}

/// Class names (sorted) for classification or tagging; empty for
/// regression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub kind: TaskKind,
    pub classes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    Value(f64),
    Tags(Vec<usize>),
}

impl LabelSpace {
    pub fn from_examples(family: TaskFamily, examples: &[Example]) -> Result<Self> {
        let mut classes = std::collections::BTreeSet::new();
        for ex in examples {
            match (family, &ex.label) {
                (TaskFamily::Regression, Label::Number(_)) => {}
                (TaskFamily::Classification, l @ (Label::Number(_) | Label::Text(_))) => {
                    classes.insert(l.class_key().expect("scalar label"));
                }
                (TaskFamily::SequenceLabeling, Label::Tags(t)) => classes.extend(t.iter().cloned()),
                (_, l) => return Err(invalid!("label {l:?} does not fit a {family:?} task")),
            }
        }
        let classes: Vec<String> = classes.into_iter().collect();
        let kind = match family {
            TaskFamily::Regression => TaskKind::Regression,
            TaskFamily::Classification => TaskKind::Classification(classes.len()),
            TaskFamily::SequenceLabeling => TaskKind::SequenceLabeling(classes.len()),
        };
        if family != TaskFamily::Regression && classes.len() < 2 {
            return Err(invalid!("need at least two classes, found {}", classes.len()));
        }
        Ok(LabelSpace { kind, classes })
    }

    fn index(&self, key: &str) -> Result<usize> {
        self.classes
            .binary_search_by(|c| c.as_str().cmp(key))
            .map_err(|_| invalid!("label `{key}` not seen in training data"))
    }

    pub fn target(&self, label: &Label) -> Result<Target> {
        match (self.kind, label) {
            (TaskKind::Regression, Label::Number(v)) => Ok(Target::Value(*v)),
            (TaskKind::Classification(_), l @ (Label::Number(_) | Label::Text(_))) => {
                Ok(Target::Class(self.index(&l.class_key().expect("scalar label"))?))
            }
            (TaskKind::SequenceLabeling(_), Label::Tags(t)) => Ok(Target::Tags(
                t.iter().map(|k| self.index(k)).collect::<Result<_>>()?,
            )),
            (_, l) => Err(invalid!("label {l:?} does not fit task {}", self.kind)),
        }
    }
}

/// One example ready for the encoder under a given method.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub inp: AssembledInput,
    /// Visibility mask for KT-Attn; `None` means full attention.
    pub mask: Option<Arc<AttnMask>>,
    /// Assembled rows receiving an embedding injection.
    pub anchors: Vec<usize>,
    /// Graph vectors (KG-Emb), one per anchor.
    pub graph: Vec<Vec<f64>>,
    /// Description ids (KT-Emb), one per anchor.
    pub descriptions: Vec<Vec<usize>>,
    /// Entity ids behind each anchor, for caching.
    pub entity_ids: Vec<String>,
    pub target: Target,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub examples: usize,
    pub entities: usize,
    pub unresolved: usize,
    pub dropped: usize,
}

impl std::ops::AddAssign for Diagnostics {
    fn add_assign(&mut self, o: Self) {
        self.examples += o.examples;
        self.entities += o.entities;
        self.unresolved += o.unresolved;
        self.dropped += o.dropped;
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PrepareOptions {
    pub method: Method,
    pub policy: EntityPolicy,
    pub max_len: usize,
}

pub fn prepare(
    ex: &Example,
    opts: PrepareOptions,
    store: &KnowledgeStore,
    vocab: &Vocabulary,
    labels: &LabelSpace,
) -> Result<(Prepared, Diagnostics)> {
    let spans = select_entities(&ex.seq, opts.policy);
    let target = labels.target(&ex.label)?;
    let mut diag = Diagnostics {
        examples: 1,
        entities: spans.len(),
        ..Default::default()
    };
    let plain = || -> Result<AssembledInput> {
        if ex.seq.len() + 2 > opts.max_len {
            return Err(invalid!(
                "input of {} tokens does not fit max_len {}",
                ex.seq.len(),
                opts.max_len
            ));
        }
        Ok(AssembledInput::plain(&ex.seq, vocab))
    };
    let mut p = Prepared {
        inp: AssembledInput::plain(&ex.seq, vocab),
        mask: None,
        anchors: Vec::new(),
        graph: Vec::new(),
        descriptions: Vec::new(),
        entity_ids: Vec::new(),
        target,
    };
    match opts.method {
        Method::Baseline => p.inp = plain()?,
        Method::Kt | Method::KtAttn => {
            p.inp = assemble(&ex.seq, &spans, store, vocab, Layout::Append, opts.max_len)?;
            diag.unresolved = p.inp.unresolved;
            diag.dropped = p.inp.dropped;
            if opts.method == Method::KtAttn {
                p.mask = Some(Arc::new(build_visibility_mask(&p.inp)?));
            }
        }
        Method::KgEmb => {
            p.inp = plain()?;
            for s in &spans {
                match store.embedding(s.graph_id()) {
                    Some(h) => {
                        p.anchors.push(s.start + 1);
                        p.graph.push(h.to_vec());
                        p.entity_ids.push(s.graph_id().to_string());
                    }
                    None => diag.unresolved += 1,
                }
            }
        }
        Method::KtEmb => {
            p.inp = plain()?;
            for s in &spans {
                match store.description(&s.entity_id) {
                    Some(d) => {
                        p.anchors.push(s.start + 1);
                        p.descriptions.push(vocab.encode(&d.tokens));
                        p.entity_ids.push(s.entity_id.clone());
                    }
                    None => diag.unresolved += 1,
                }
            }
        }
    }
    Ok((p, diag))
}

pub fn prepare_all(
    examples: &[Example],
    opts: PrepareOptions,
    store: &KnowledgeStore,
    vocab: &Vocabulary,
    labels: &LabelSpace,
) -> Result<(Vec<Prepared>, Diagnostics)> {
    let mut out = Vec::with_capacity(examples.len());
    let mut diag = Diagnostics::default();
    for ex in examples {
        let (p, d) = prepare(ex, opts, store, vocab, labels)?;
        out.push(p);
        diag += d;
    }
    Ok((out, diag))
}

/// Vocabulary over training text and every dictionary description, so
/// description tokens of unseen entities still get their own ids.
pub fn build_vocabulary(train: &[Example], store: &KnowledgeStore, min_freq: usize) -> Result<Vocabulary> {
    let mut lines: Vec<String> = train.iter().map(|e| e.seq.tokens.join(" ")).collect();
    lines.extend(store.descriptions().map(|(_, d)| d.tokens.join(" ")));
    Vocabulary::build(lines.iter().map(String::as_str), min_freq)
}

/// Counts of each class key, for reports.
pub fn class_balance(examples: &[Example]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for e in examples {
        if let Some(k) = e.label.class_key() {
            *m.entry(k).or_default() += 1;
        }
    }
    m
}
