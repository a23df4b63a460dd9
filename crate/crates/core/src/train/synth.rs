//! Synthetic focus-entity task.
//!
//! Sentences mention one to three invented entities. Each entity has a
//! hidden binary attribute that appears only as a marker word in its
//! dictionary definition and as the sign of a block of coordinates in its
//! graph embedding. The sentence label is the attribute of the entity
//! introduced by `this`, whose phrase opens the sentence (after an optional
//! adverb); the other entities follow with other determiners. Train, dev and test sentences draw entities from
//! disjoint pools, so without the knowledge store the label is a coin flip.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::kstore::KnowledgeStore;
use crate::rng::stream;
use crate::tokenize::{write_annotations, EntitySpan, Example, Label, SpanSource, TokenSequence, Upos};

pub const MARKERS: [&str; 2] = ["cold", "hot"];
pub const FOCUS_DETERMINER: &str = "this";
const OTHER_DETERMINERS: [&str; 3] = ["the", "a", "some"];
const KINDS: [&str; 6] = ["plant", "tool", "animal", "stone", "liquid", "fabric"];
const OPENERS: [&str; 3] = ["yesterday", "then", "today"];
const ADJECTIVES: [&str; 3] = ["big", "small", "old"];
const CONNECTORS: [(&str, Upos); 5] = [
    ("saw", Upos::VERB),
    ("near", Upos::ADP),
    ("with", Upos::ADP),
    ("likes", Upos::VERB),
    ("and", Upos::CCONJ),
];
const CLOSERS: [&str; 3] = ["moved", "slept", "stayed"];
const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub train_entities: usize,
    pub eval_entities: usize,
    /// Graph embedding dimension.
    pub embed_dim: usize,
    /// Leading coordinates carrying the attribute.
    pub attr_dims: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            train: 2000,
            dev: 500,
            test: 500,
            train_entities: 400,
            eval_entities: 200,
            embed_dim: 8,
            attr_dims: 2,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Entity {
    pub surface: String,
    pub kg_id: String,
    pub attribute: usize,
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    pub store: KnowledgeStore,
    pub pools: [Vec<Entity>; 3],
}

/// Paths written by [`SynthData::write`].
#[derive(Clone, Debug)]
pub struct SynthFiles {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    pub dictionary: PathBuf,
    pub embeddings: PathBuf,
}

impl SynthFiles {
    pub fn in_dir(dir: &Path) -> Self {
        SynthFiles {
            train: dir.join("train.jsonl"),
            dev: dir.join("dev.jsonl"),
            test: dir.join("test.jsonl"),
            dictionary: dir.join("dictionary.tsv"),
            embeddings: dir.join("embeddings.txt"),
        }
    }
}

impl SynthData {
    pub fn write(&self, dir: &Path) -> Result<SynthFiles> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let f = SynthFiles::in_dir(dir);
        write_annotations(&f.train, &self.train)?;
        write_annotations(&f.dev, &self.dev)?;
        write_annotations(&f.test, &self.test)?;
        std::fs::write(&f.dictionary, self.store.dictionary_tsv()).map_err(|e| Error::io(&f.dictionary, e))?;
        std::fs::write(&f.embeddings, self.store.embeddings_text()).map_err(|e| Error::io(&f.embeddings, e))?;
        Ok(f)
    }
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(*CONSONANTS.choose(rng).unwrap() as char);
        w.push(*VOWELS.choose(rng).unwrap() as char);
    }
    w
}

fn reserved_words() -> BTreeSet<&'static str> {
    let mut s: BTreeSet<&str> = MARKERS.iter().chain(&KINDS).chain(&OPENERS).copied().collect();
    s.extend(OTHER_DETERMINERS);
    s.extend(ADJECTIVES);
    s.extend(CLOSERS);
    s.extend(CONNECTORS.iter().map(|c| c.0));
    s.insert(FOCUS_DETERMINER);
    s
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    if spec.train == 0 || spec.dev == 0 || spec.test == 0 {
        return Err(invalid!("synthetic split sizes must be at least 1"));
    }
    if spec.train_entities < 2 || spec.eval_entities < 2 {
        return Err(invalid!("each entity pool needs at least two entities"));
    }
    if spec.attr_dims == 0 || spec.attr_dims > spec.embed_dim {
        return Err(invalid!("attribute block must fit inside the embedding"));
    }
    let mut rng = stream(spec.seed, "synth-entities");
    let reserved = reserved_words();
    let mut used = BTreeSet::new();
    let mut store = KnowledgeStore::new();
    let mut k = 0;
    let mut make_pool = |n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Entity>> {
        let mut pool = Vec::with_capacity(n);
        for i in 0..n {
            let surface = loop {
                let w = pseudo_word(rng);
                if !reserved.contains(w.as_str()) && used.insert(w.clone()) {
                    break w;
                }
            };
            // Alternate so each pool is balanced.
            let attribute = i % 2;
            let kg_id = format!("Q{k}");
            k += 1;
            let kind = KINDS.choose(rng).unwrap();
            store.add_description(&surface, &surface, &format!("{} {kind}", MARKERS[attribute]))?;
            let sign = if attribute == 1 { 1.0 } else { -1.0 };
            let v: Vec<f64> = (0..spec.embed_dim)
                .map(|d| {
                    if d < spec.attr_dims {
                        sign * rng.gen_range(1.0..2.0)
                    } else {
                        rng.gen_range(-1.0..1.0)
                    }
                })
                .collect();
            store.add_embedding(&kg_id, v)?;
            pool.push(Entity {
                surface,
                kg_id,
                attribute,
            });
        }
        Ok(pool)
    };
    let pools = [
        make_pool(spec.train_entities, &mut rng)?,
        make_pool(spec.eval_entities, &mut rng)?,
        make_pool(spec.eval_entities, &mut rng)?,
    ];
    let mut srng = stream(spec.seed, "synth-sentences");
    let train = (0..spec.train).map(|_| sentence(&pools[0], &mut srng)).collect::<Result<_>>()?;
    let dev = (0..spec.dev).map(|_| sentence(&pools[1], &mut srng)).collect::<Result<_>>()?;
    let test = (0..spec.test).map(|_| sentence(&pools[2], &mut srng)).collect::<Result<_>>()?;
    Ok(SynthData {
        train,
        dev,
        test,
        store,
        pools,
    })
}

fn sentence(pool: &[Entity], rng: &mut ChaCha8Rng) -> Result<Example> {
    let n = rng.gen_range(1..=3);
    let ents: Vec<&Entity> = pool.choose_multiple(rng, n).collect();
    let mut tokens: Vec<String> = Vec::new();
    let mut pos = Vec::new();
    let mut spans = Vec::new();
    let mut push = |t: &str, p: Upos, tokens: &mut Vec<String>| {
        tokens.push(t.to_string());
        pos.push(p);
    };
    if rng.gen_bool(0.5) {
        push(OPENERS.choose(rng).unwrap(), Upos::ADV, &mut tokens);
    }
    for (i, e) in ents.iter().enumerate() {
        if i > 0 {
            let (w, p) = *CONNECTORS.choose(rng).unwrap();
            push(w, p, &mut tokens);
        }
        let det = if i == 0 {
            FOCUS_DETERMINER
        } else {
            OTHER_DETERMINERS.choose(rng).unwrap()
        };
        push(det, Upos::DET, &mut tokens);
        if rng.gen_bool(0.3) {
            push(ADJECTIVES.choose(rng).unwrap(), Upos::ADJ, &mut tokens);
        }
        let at = tokens.len();
        push(&e.surface, Upos::NOUN, &mut tokens);
        spans.push(EntitySpan {
            start: at,
            end: at,
            entity_id: e.surface.clone(),
            kg_id: Some(e.kg_id.clone()),
            source: SpanSource::Pos,
            surface: e.surface.clone(),
        });
    }
    if rng.gen_bool(0.5) {
        push(CLOSERS.choose(rng).unwrap(), Upos::VERB, &mut tokens);
    }
    push(".", Upos::PUNCT, &mut tokens);
    Ok(Example {
        seq: TokenSequence::new(tokens, pos, spans)?,
        label: Label::Number(ents[0].attribute as f64),
    })
}
