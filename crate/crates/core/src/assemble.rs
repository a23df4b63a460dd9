//! Concatenating entity descriptions with the input and building the
//! attention visibility mask that keeps description text from leaking into
//! anything but its own anchor token.

use std::fmt::{self, Write as _};
use std::ops::Range;
use std::str::FromStr;

use crate::error::{invalid, Result};
use crate::kstore::KnowledgeStore;
use crate::numcore::AttnMask;
use crate::tokenize::{EntitySpan, TokenSequence, Vocabulary, CLS, SEP};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Layout {
    /// `[CLS] x [SEP] d1 [SEP] d2 [SEP] …`
    #[default]
    Append,
    /// Each description (with its trailing `[SEP]`) right after its span.
    InsertAfter,
}

impl FromStr for Layout {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "append" => Ok(Layout::Append),
            "insert-after" => Ok(Layout::InsertAfter),
            other => Err(format!("unknown layout `{other}`")),
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Append => "append",
            Layout::InsertAfter => "insert-after",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    /// Index into the span list passed to [`assemble`].
    pub entity: usize,
    /// Assembled position of the span's first token.
    pub anchor: usize,
    /// Description tokens plus trailing `[SEP]`.
    pub range: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssembledInput {
    pub ids: Vec<usize>,
    pub tokens: Vec<String>,
    pub positions: Vec<usize>,
    /// One past the first `[SEP]` in the append layout; the sequence length
    /// for insert-after, where the input is not contiguous.
    pub base_len: usize,
    pub segments: Vec<Segment>,
    /// Assembled position of every input token, excluding `[CLS]`/`[SEP]`.
    pub x_positions: Vec<usize>,
    pub layout: Layout,
    /// Spans skipped because the store had no description for them.
    pub unresolved: usize,
    /// Descriptions dropped to satisfy the length budget.
    pub dropped: usize,
}

impl AssembledInput {
    /// `[CLS] x [SEP]` with no knowledge attached.
    pub fn plain(seq: &TokenSequence, vocab: &Vocabulary) -> Self {
        let mut tokens = Vec::with_capacity(seq.len() + 2);
        tokens.push("[CLS]".to_string());
        tokens.extend(seq.tokens.iter().cloned());
        tokens.push("[SEP]".to_string());
        let mut ids = vec![CLS];
        ids.extend(seq.ids(vocab));
        ids.push(SEP);
        let t = ids.len();
        AssembledInput {
            ids,
            tokens,
            positions: (0..t).collect(),
            base_len: t,
            segments: Vec::new(),
            x_positions: (1..=seq.len()).collect(),
            layout: Layout::Append,
            unresolved: 0,
            dropped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn in_x_region(&self, j: usize) -> bool {
        match self.layout {
            Layout::Append => j < self.base_len,
            Layout::InsertAfter => !self.segments.iter().any(|s| s.range.contains(&j)),
        }
    }

    /// Segment index covering assembled position `j`.
    pub fn segment_of(&self, j: usize) -> Option<usize> {
        self.segments.iter().position(|s| s.range.contains(&j))
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Attaches the description of every span that has one. Spans are taken in
/// order; whole descriptions are dropped from the end until the sequence
/// fits in `max_len`.
pub fn assemble(
    seq: &TokenSequence,
    spans: &[EntitySpan],
    store: &KnowledgeStore,
    vocab: &Vocabulary,
    layout: Layout,
    max_len: usize,
) -> Result<AssembledInput> {
    let base = seq.len() + 2;
    if base > max_len {
        return Err(invalid!(
            "input of {} tokens does not fit max_len {max_len}",
            seq.len()
        ));
    }
    let mut found: Vec<(usize, &EntitySpan, &[String])> = Vec::new();
    let mut unresolved = 0;
    for (i, s) in spans.iter().enumerate() {
        match store.description(&s.entity_id) {
            Some(d) => found.push((i, s, &d.tokens)),
            None => unresolved += 1,
        }
    }
    let mut total = base + found.iter().map(|f| f.2.len() + 1).sum::<usize>();
    let mut dropped = 0;
    while total > max_len {
        let (_, _, d) = found.pop().expect("base fits, so dropping terminates");
        total -= d.len() + 1;
        dropped += 1;
    }

    let mut out = Builder::default();
    let mut segments = Vec::with_capacity(found.len());
    let mut x_positions = Vec::with_capacity(seq.len());
    out.push("[CLS]", CLS);
    let x_ids = seq.ids(vocab);
    match layout {
        Layout::Append => {
            for (t, &id) in seq.tokens.iter().zip(&x_ids) {
                x_positions.push(out.len());
                out.push(t, id);
            }
            out.push("[SEP]", SEP);
            for &(entity, span, desc) in &found {
                let start = out.len();
                out.description(desc, vocab);
                segments.push(Segment {
                    entity,
                    anchor: span.start + 1,
                    range: start..out.len(),
                });
            }
        }
        Layout::InsertAfter => {
            let mut next = found.iter().peekable();
            for (k, (t, &id)) in seq.tokens.iter().zip(&x_ids).enumerate() {
                x_positions.push(out.len());
                out.push(t, id);
                while let Some(&&(entity, span, desc)) = next.peek() {
                    if span.end != k {
                        break;
                    }
                    next.next();
                    let start = out.len();
                    out.description(desc, vocab);
                    segments.push(Segment {
                        entity,
                        anchor: x_positions[span.start],
                        range: start..out.len(),
                    });
                }
            }
            out.push("[SEP]", SEP);
        }
    }
    let Builder { ids, tokens } = out;
    let t = tokens.len();
    Ok(AssembledInput {
        ids,
        tokens,
        positions: (0..t).collect(),
        base_len: if layout == Layout::Append { base } else { t },
        segments,
        x_positions,
        layout,
        unresolved,
        dropped,
    })
}

#[derive(Default)]
struct Builder {
    ids: Vec<usize>,
    tokens: Vec<String>,
}

impl Builder {
    fn push(&mut self, token: &str, id: usize) {
        self.tokens.push(token.to_string());
        self.ids.push(id);
    }

    fn len(&self) -> usize {
        self.ids.len()
    }

    fn description(&mut self, desc: &[String], vocab: &Vocabulary) {
        for t in desc {
            self.push(t, vocab.id(t));
        }
        self.push("[SEP]", SEP);
    }
}

/// Input region sees itself; a description sees only itself; an anchor
/// additionally sees its own description.
pub fn build_visibility_mask(inp: &AssembledInput) -> Result<AttnMask> {
    if inp.layout != Layout::Append {
        return Err(invalid!("the visibility mask is defined for the append layout only"));
    }
    let t = inp.len();
    let b = inp.base_len;
    let mut visible = vec![false; t * t];
    for j in 0..b {
        visible[j * t..j * t + b].fill(true);
    }
    for s in &inp.segments {
        for j in s.range.clone() {
            visible[j * t + s.range.start..j * t + s.range.end].fill(true);
        }
        let a = s.anchor;
        visible[a * t + s.range.start..a * t + s.range.end].fill(true);
    }
    AttnMask::from_visible(t, visible)
}

/// Binary PGM, visible entries white.
pub fn mask_pgm(mask: &AttnMask) -> Vec<u8> {
    let t = mask.size();
    let mut out = format!("P5\n{t} {t}\n255\n").into_bytes();
    out.extend(mask.pattern().iter().map(|&v| if v { 255u8 } else { 0 }));
    out
}

/// One row per line, 1 for visible.
pub fn mask_csv(mask: &AttnMask) -> String {
    let t = mask.size();
    let mut s = String::with_capacity(t * t * 2);
    for j in 0..t {
        for k in 0..t {
            if k > 0 {
                s.push(',');
            }
            s.push(if mask.is_visible(j, k) { '1' } else { '0' });
        }
        s.push('\n');
    }
    s
}

/// Human-readable dump used by the CLI.
pub fn describe(inp: &AssembledInput) -> String {
    let mut s = String::new();
    writeln!(s, "layout {} length {} base {}", inp.layout, inp.len(), inp.base_len).unwrap();
    for seg in &inp.segments {
        writeln!(
            s,
            "entity {} anchor {} range {}..{}",
            seg.entity, seg.anchor, seg.range.start, seg.range.end
        )
        .unwrap();
    }
    s
}
