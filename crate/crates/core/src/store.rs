//! In-memory temporal knowledge graph.
//!
//! Facts keep their ingestion order as `fact_id`. Entities, relations and
//! timestamp strings are interned; per-entity (by role) and per-relation
//! postings hold ascending fact ids for the symbolic filter.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{parse_timestamp, TimeInterval};

pub type FactId = u32;
pub type EntityId = u32;
pub type RelationId = u32;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("malformed line {line_no}: {reason}")]
    MalformedLine { line_no: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Quadruple {
    pub fact_id: FactId,
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
    pub interval: TimeInterval,
}

/// Bidirectional string/id map with dense ids in first-seen order.
#[derive(Debug, Clone, Default)]
pub struct Dictionary {
    names: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Dictionary {
    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.ids.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.ids.get(name.trim()).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &str)> {
        self.names.iter().enumerate().map(|(i, n)| (i as u32, n.as_str()))
    }

    /// Two-column `id \t name` export.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> io::Result<()> {
        for (id, name) in self.iter() {
            writeln!(out, "{id}\t{name}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct TkgStore {
    facts: Vec<Quadruple>,
    time_text: Vec<u32>,
    entities: Dictionary,
    relations: Dictionary,
    timestamps: Dictionary,
    head_postings: Vec<Vec<FactId>>,
    tail_postings: Vec<Vec<FactId>>,
    relation_postings: Vec<Vec<FactId>>,
}

impl TkgStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends one fact. Fields are trimmed before interning.
    pub fn push(&mut self, head: &str, relation: &str, tail: &str, timestamp: &str) -> Result<FactId, String> {
        let (head, relation, tail, timestamp) = (head.trim(), relation.trim(), tail.trim(), timestamp.trim());
        if head.is_empty() || relation.is_empty() || tail.is_empty() {
            return Err("empty field".into());
        }
        let interval = parse_timestamp(timestamp).map_err(|e| e.to_string())?;
        let fact_id = self.facts.len() as FactId;
        let head_id = self.entities.intern(head);
        let tail_id = self.entities.intern(tail);
        let relation_id = self.relations.intern(relation);
        let time_id = self.timestamps.intern(timestamp);
        grow(&mut self.head_postings, head_id).push(fact_id);
        grow(&mut self.tail_postings, tail_id).push(fact_id);
        grow(&mut self.relation_postings, relation_id).push(fact_id);
        self.facts.push(Quadruple {
            fact_id,
            head: head_id,
            relation: relation_id,
            tail: tail_id,
            interval,
        });
        self.time_text.push(time_id);
        Ok(fact_id)
    }

    /// Builds a store from `(head, relation, tail, timestamp)` rows.
    pub fn from_rows<'a, I>(rows: I) -> Result<Self, StoreError>
    where
        I: IntoIterator<Item = (&'a str, &'a str, &'a str, &'a str)>,
    {
        let mut store = Self::new();
        for (i, (h, r, t, ts)) in rows.into_iter().enumerate() {
            store
                .push(h, r, t, ts)
                .map_err(|reason| StoreError::MalformedLine { line_no: i + 1, reason })?;
        }
        Ok(store)
    }

    /// Loads a `head \t relation \t tail \t timestamp` file. Blank lines and
    /// lines starting with `#` are skipped; line numbers in errors are 1-based
    /// physical lines.
    pub fn load_tsv(path: &Path) -> Result<Self, StoreError> {
        let text = fs::read_to_string(path).map_err(|source| StoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_tsv(&text)
    }

    pub fn parse_tsv(text: &str) -> Result<Self, StoreError> {
        let mut store = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(StoreError::MalformedLine {
                    line_no,
                    reason: format!("expected 4 tab-separated fields, found {}", fields.len()),
                });
            }
            store
                .push(fields[0], fields[1], fields[2], fields[3])
                .map_err(|reason| StoreError::MalformedLine { line_no, reason })?;
        }
        Ok(store)
    }

    /// Writes facts back in the ingestion format, one per line in id order.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> io::Result<()> {
        for q in &self.facts {
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                self.entity_name(q.head),
                self.relation_name(q.relation),
                self.entity_name(q.tail),
                self.timestamp_text(q.fact_id)
            )?;
        }
        Ok(())
    }

    /// Persists `facts.tsv`, `entities.tsv` and `relations.tsv` into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<(), StoreError> {
        let io_err = |path: &Path| {
            let path = path.display().to_string();
            move |source| StoreError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let write = |name: &str, f: &dyn Fn(&mut BufWriter<fs::File>) -> io::Result<()>| {
            let path = dir.join(name);
            let file = fs::File::create(&path).map_err(io_err(&path))?;
            let mut w = BufWriter::new(file);
            f(&mut w).and_then(|_| w.flush()).map_err(io_err(&path))
        };
        write("facts.tsv", &|w| self.write_tsv(w))?;
        write("entities.tsv", &|w| self.entities.write_tsv(w))?;
        write("relations.tsv", &|w| self.relations.write_tsv(w))?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self, StoreError> {
        Self::load_tsv(&dir.join("facts.tsv"))
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn facts(&self) -> &[Quadruple] {
        &self.facts
    }

    pub fn fact(&self, id: FactId) -> Option<&Quadruple> {
        self.facts.get(id as usize)
    }

    pub fn entities(&self) -> &Dictionary {
        &self.entities
    }

    pub fn relations(&self) -> &Dictionary {
        &self.relations
    }

    pub fn timestamp_count(&self) -> usize {
        self.timestamps.len()
    }

    pub fn lookup_entity(&self, name: &str) -> Option<EntityId> {
        self.entities.get(name)
    }

    pub fn lookup_relation(&self, name: &str) -> Option<RelationId> {
        self.relations.get(name)
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        self.entities.name(id).unwrap_or("<unknown>")
    }

    pub fn relation_name(&self, id: RelationId) -> &str {
        self.relations.name(id).unwrap_or("<unknown>")
    }

    /// The timestamp exactly as ingested (after trimming).
    pub fn timestamp_text(&self, id: FactId) -> &str {
        self.time_text
            .get(id as usize)
            .and_then(|&t| self.timestamps.name(t))
            .unwrap_or("")
    }

    pub fn head_postings(&self, entity: EntityId) -> &[FactId] {
        self.head_postings.get(entity as usize).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn tail_postings(&self, entity: EntityId) -> &[FactId] {
        self.tail_postings.get(entity as usize).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn relation_postings(&self, relation: RelationId) -> &[FactId] {
        self.relation_postings.get(relation as usize).map(Vec::as_slice).unwrap_or(&[])
    }
}

fn grow(postings: &mut Vec<Vec<FactId>>, id: u32) -> &mut Vec<FactId> {
    let idx = id as usize;
    if postings.len() <= idx {
        postings.resize_with(idx + 1, Vec::new);
    }
    &mut postings[idx]
}
