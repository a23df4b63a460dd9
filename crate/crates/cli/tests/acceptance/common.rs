//! Random sentences with entities, descriptions and graph vectors.

use knit::encoder::EncoderConfig;
use knit::kstore::KnowledgeStore;
use knit::numcore::{ParamStore, Precision, Scalar};
use knit::tokenize::{EntitySpan, Example, Label, SpanSource, TokenSequence, Upos, Vocabulary};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const MAX_LEN: usize = 64;
pub const GRAPH_DIM: usize = 6;

pub struct Instance {
    pub seq: TokenSequence,
    pub store: KnowledgeStore,
    pub vocab: Vocabulary,
    /// Definition length in words for each span, `None` when unresolved.
    pub definitions: Vec<Option<usize>>,
}

impl Instance {
    pub fn example(&self, label: Label) -> Example {
        Example {
            seq: self.seq.clone(),
            label,
        }
    }
}

pub struct Shape {
    pub max_tokens: usize,
    pub min_entities: usize,
    /// Chance that an entity has no dictionary entry.
    pub unresolved: f64,
    pub max_definition: usize,
}

pub fn instance(rng: &mut ChaCha8Rng, shape: &Shape) -> Instance {
    let word = |rng: &mut ChaCha8Rng| format!("w{}", rng.gen_range(0..40));
    let n = rng.gen_range(shape.min_entities.max(1)..=shape.max_tokens);
    let mut tokens: Vec<String> = (0..n).map(|_| word(rng)).collect();

    let k = rng.gen_range(shape.min_entities..=4.min(n));
    let mut starts: Vec<usize> = (0..n).collect();
    starts.shuffle(rng);
    starts.truncate(k);
    starts.sort_unstable();

    // Always present, so the store has an embedding dimension.
    let mut store = KnowledgeStore::new();
    store.add_description("pad", "pad", "w0").unwrap();
    store.add_embedding("pad", vec![0.5; GRAPH_DIM]).unwrap();

    let mut spans = Vec::new();
    let mut definitions: Vec<Option<usize>> = Vec::new();
    let mut ids: Vec<String> = Vec::new();
    let mut lines = vec!["pad : w0".to_string()];
    for (i, &s) in starts.iter().enumerate() {
        let limit = starts.get(i + 1).copied().unwrap_or(n);
        let end = (s + rng.gen_range(0..3)).min(limit - 1);
        // Occasionally repeat an earlier entity.
        let (id, def) = match i {
            i if i > 0 && rng.gen_bool(0.2) => {
                let j = rng.gen_range(0..i);
                (ids[j].clone(), definitions[j])
            }
            _ if rng.gen_bool(shape.unresolved) => (format!("e{i}"), None),
            _ => {
                let id = format!("e{i}");
                let words = rng.gen_range(1..=shape.max_definition);
                let def: Vec<String> = (0..words).map(|_| word(rng)).collect();
                store.add_description(&id, &format!("s{i}"), &def.join(" ")).unwrap();
                store
                    .add_embedding(&id, (0..GRAPH_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .unwrap();
                lines.push(format!("s{i} : {}", def.join(" ")));
                (id, Some(words))
            }
        };
        let surface = format!("s{}", &id[1..]);
        tokens[s] = surface.clone();
        definitions.push(def);
        ids.push(id.clone());
        spans.push(EntitySpan {
            start: s,
            end,
            entity_id: id,
            kg_id: None,
            source: SpanSource::Pos,
            surface,
        });
    }
    lines.push(tokens.join(" "));
    let vocab = Vocabulary::build(lines.iter().map(String::as_str), 1).unwrap();
    let seq = TokenSequence::new(tokens, vec![Upos::NOUN; n], spans).unwrap();
    Instance {
        seq,
        store,
        vocab,
        definitions,
    }
}

pub fn encoder(vocab_size: usize, precision: Precision) -> EncoderConfig {
    EncoderConfig {
        vocab_size,
        d_model: 16,
        layers: 2,
        heads: 2,
        ff: 32,
        max_positions: MAX_LEN,
        dropout: 0.0,
        precision,
    }
}

/// Overwrites every parameter with uniform noise in `±scale`, so
/// zero-initialised paths carry signal too.
pub fn randomize<S: Scalar>(store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = S::of(rng.gen_range(-scale..scale));
        }
    }
}
