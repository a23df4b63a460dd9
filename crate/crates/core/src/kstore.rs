//! File-backed knowledge: dictionary descriptions and graph embeddings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::tokenize::EntitySpan;

/// Per-entity description budget in tokens, surface and colon included.
pub const MAX_DESCRIPTION_TOKENS: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Description {
    pub surface: String,
    pub definition: String,
    /// `surface : definition…`, capped at [`MAX_DESCRIPTION_TOKENS`].
    pub tokens: Vec<String>,
}

impl Description {
    pub fn new(surface: &str, definition: &str) -> Result<Self> {
        let surface = surface.trim();
        let definition = definition.trim();
        if surface.is_empty() {
            return Err(invalid!("empty surface"));
        }
        if definition.is_empty() {
            return Err(invalid!("empty definition for `{surface}`"));
        }
        let mut tokens: Vec<String> = surface.split_whitespace().map(str::to_string).collect();
        tokens.push(":".into());
        tokens.extend(definition.split_whitespace().map(str::to_string));
        tokens.truncate(MAX_DESCRIPTION_TOKENS);
        Ok(Description {
            surface: surface.to_string(),
            definition: definition.to_string(),
            tokens,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Knowledge<'a> {
    pub description: Option<&'a Description>,
    pub embedding: Option<&'a [f64]>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KnowledgeStore {
    descriptions: BTreeMap<String, Description>,
    embeddings: BTreeMap<String, Vec<f64>>,
    dim: Option<usize>,
}

impl KnowledgeStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_description(&mut self, id: &str, surface: &str, definition: &str) -> Result<()> {
        if id.trim().is_empty() {
            return Err(invalid!("empty entity id"));
        }
        if self.descriptions.contains_key(id) {
            return Err(invalid!("duplicate entity id `{id}`"));
        }
        let d = Description::new(surface, definition)?;
        self.descriptions.insert(id.to_string(), d);
        Ok(())
    }

    pub fn add_embedding(&mut self, id: &str, v: Vec<f64>) -> Result<()> {
        if id.trim().is_empty() {
            return Err(invalid!("empty entity id"));
        }
        if v.is_empty() {
            return Err(invalid!("empty embedding for `{id}`"));
        }
        if let Some(d) = self.dim {
            if d != v.len() {
                return Err(invalid!(
                    "embedding for `{id}` has dimension {}, expected {d}",
                    v.len()
                ));
            }
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(invalid!("non-finite embedding value for `{id}`"));
        }
        if self.embeddings.contains_key(id) {
            return Err(invalid!("duplicate embedding id `{id}`"));
        }
        self.dim = Some(v.len());
        self.embeddings.insert(id.to_string(), v);
        Ok(())
    }

    /// Reads `entity_id \t surface \t definition` lines.
    pub fn load_dictionary(path: &Path) -> Result<Self> {
        let mut store = KnowledgeStore::new();
        store.read_dictionary(path)?;
        Ok(store)
    }

    pub fn read_dictionary(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::parse(
                    path,
                    i + 1,
                    format!("expected 3 tab-separated fields, found {}", fields.len()),
                ));
            }
            self.add_description(fields[0].trim(), fields[1], fields[2])
                .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        }
        Ok(())
    }

    /// Reads `entity_id v1 … v_dk` lines.
    pub fn load_embeddings(path: &Path) -> Result<Self> {
        let mut store = KnowledgeStore::new();
        store.read_embeddings(path)?;
        Ok(store)
    }

    pub fn read_embeddings(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(id) = parts.next() else { continue };
            let v = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
            self.add_embedding(id, v)
                .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        }
        Ok(())
    }

    pub fn dictionary_tsv(&self) -> String {
        let mut s = String::new();
        for (id, d) in &self.descriptions {
            writeln!(s, "{id}\t{}\t{}", d.surface, d.definition).unwrap();
        }
        s
    }

    pub fn embeddings_text(&self) -> String {
        let mut s = String::new();
        for (id, v) in &self.embeddings {
            s.push_str(id);
            for x in v {
                write!(s, " {x}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn len(&self) -> usize {
        let extra = self
            .embeddings
            .keys()
            .filter(|k| !self.descriptions.contains_key(*k))
            .count();
        self.descriptions.len() + extra
    }

    pub fn is_empty(&self) -> bool {
        self.descriptions.is_empty() && self.embeddings.is_empty()
    }

    /// Embedding dimension d_k, once any embedding is loaded.
    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn description(&self, id: &str) -> Option<&Description> {
        self.descriptions.get(id)
    }

    pub fn embedding(&self, id: &str) -> Option<&[f64]> {
        self.embeddings.get(id).map(Vec::as_slice)
    }

    pub fn descriptions(&self) -> impl Iterator<Item = (&str, &Description)> {
        self.descriptions.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn embeddings(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.embeddings.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn lookup(&self, id: &str) -> Option<Knowledge<'_>> {
        let k = Knowledge {
            description: self.description(id),
            embedding: self.embedding(id),
        };
        (k.description.is_some() || k.embedding.is_some()).then_some(k)
    }

    /// Description by dictionary id, embedding by graph id.
    pub fn lookup_span(&self, span: &EntitySpan) -> Option<Knowledge<'_>> {
        let k = Knowledge {
            description: self.description(&span.entity_id),
            embedding: self.embedding(span.graph_id()),
        };
        (k.description.is_some() || k.embedding.is_some()).then_some(k)
    }
}
