//! Hotword vocabulary, embedding index, and exact top-k retrieval.
//!
//! The index is a flat N x D matrix of unit-norm rows scanned brute-force
//! per query with a bounded heap. At the ~100k-entry scale this stays well
//! under interactive latency while keeping every ranking property exact
//! and testable. Ties on score break by ascending hotword id so query
//! output is independent of vocabulary insertion order.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedder::{EmbeddingVector, TextEncoder};
use crate::error::{Error, Result};
use crate::textmetrics::normalize;

/// A biasing word: unique id, normalized surface, optional domain tag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hotword {
    pub id: String,
    pub surface: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub domain: Option<String>,
}

impl Hotword {
    /// Normalizes the surface at ingestion; empty ids or surfaces are
    /// rejected.
    pub fn new(
        id: impl Into<String>,
        surface: impl AsRef<str>,
        domain: Option<String>,
    ) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::EmptyInput("hotword id"));
        }
        let surface = normalize(surface.as_ref());
        if surface.is_empty() {
            return Err(Error::EmptyText(id));
        }
        Ok(Hotword {
            id,
            surface,
            domain,
        })
    }
}

/// The candidate set G: an ordered list of hotwords with unique ids and
/// unique normalized surfaces.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabulary {
    entries: Vec<Hotword>,
}

impl Vocabulary {
    pub fn new(entries: Vec<Hotword>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        let mut surfaces = BTreeSet::new();
        for e in &entries {
            if !ids.insert(e.id.as_str()) {
                return Err(Error::DuplicateId(e.id.clone()));
            }
            if !surfaces.insert(e.surface.as_str()) {
                return Err(Error::DuplicateSurface(e.surface.clone()));
            }
        }
        Ok(Vocabulary { entries })
    }

    pub fn entries(&self) -> &[Hotword] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Hotword> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Parses `id<TAB>surface[<TAB>domain]` lines. Blank lines and `#`
    /// comments are skipped; an empty domain column means no domain.
    pub fn from_tsv(input: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let (Some(id), Some(surface)) = (fields.next(), fields.next()) else {
                return Err(Error::LineParse {
                    line: lineno + 1,
                    msg: format!("expected id<TAB>surface[<TAB>domain], got {line:?}"),
                });
            };
            let domain = fields.next().filter(|d| !d.is_empty()).map(String::from);
            entries.push(Hotword::new(id, surface, domain)?);
        }
        Vocabulary::new(entries)
    }

    /// Parses one `{"id":…,"surface":…,"domain":…}` object per line.
    pub fn from_jsonl(input: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            id: String,
            surface: String,
            #[serde(default)]
            domain: Option<String>,
        }
        let mut entries = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Row = serde_json::from_str(line).map_err(|e| Error::LineParse {
                line: lineno + 1,
                msg: e.to_string(),
            })?;
            entries.push(Hotword::new(row.id, row.surface, row.domain)?);
        }
        Vocabulary::new(entries)
    }

    /// Loads a vocabulary file, dispatching on the `.jsonl` extension and
    /// defaulting to TSV otherwise.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Self::from_jsonl(&text),
            _ => Self::from_tsv(&text),
        }
    }
}

/// One retrieved candidate with its similarity score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHotword {
    pub hotword: Hotword,
    pub score: f64,
}

/// The ranked top-k subset G' for one query. Scores are non-increasing and
/// ties break by ascending hotword id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub candidates: Vec<ScoredHotword>,
}

impl RetrievalResult {
    pub fn surfaces(&self) -> Vec<&str> {
        self.candidates
            .iter()
            .map(|c| c.hotword.surface.as_str())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Returns true when candidate (score_a, id_a) ranks strictly before
/// (score_b, id_b): higher score first, then ascending id.
fn ranks_before(score_a: f64, id_a: &str, score_b: f64, id_b: &str) -> bool {
    match score_a.total_cmp(&score_b) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => id_a < id_b,
    }
}

const INDEX_MAGIC: &[u8; 4] = b"HWIX";
const INDEX_VERSION: u32 = 1;

/// Immutable embedding index over a vocabulary: one unit-norm row per
/// entry, aligned with `entries`, plus the encoder fingerprint it was
/// built with.
#[derive(Debug, Clone, PartialEq)]
pub struct HotwordIndex {
    dim: usize,
    entries: Vec<Hotword>,
    matrix: Vec<f32>,
    fingerprint: u64,
}

impl HotwordIndex {
    /// Embeds every vocabulary entry in order. Deterministic given the
    /// vocabulary order and encoder; an embedding failure names the
    /// offending id.
    pub fn build(vocab: &Vocabulary, encoder: &dyn TextEncoder) -> Result<Self> {
        if vocab.is_empty() {
            return Err(Error::EmptyInput("vocabulary"));
        }
        let dim = encoder.dimension();
        let mut matrix = Vec::with_capacity(vocab.len() * dim);
        for entry in vocab.entries() {
            let emb = encoder
                .embed_text(&entry.surface)
                .map_err(|e| Error::EntryEmbedding {
                    id: entry.id.clone(),
                    source: Box::new(e),
                })?;
            matrix.extend_from_slice(emb.values());
        }
        Ok(HotwordIndex {
            dim,
            entries: vocab.entries().to_vec(),
            matrix,
            fingerprint: encoder.fingerprint(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn entries(&self) -> &[Hotword] {
        &self.entries
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.entries.clone())
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    fn score_row(&self, i: usize, query: &[f32]) -> f64 {
        let dot: f64 = self
            .row(i)
            .iter()
            .zip(query)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum();
        dot.clamp(-1.0, 1.0)
    }

    /// Exact top-k by cosine over all rows. `k` larger than the index
    /// returns every entry; the ordering is deterministic under the tie
    /// rule regardless of insertion order.
    pub fn query_topk(&self, query: &EmbeddingVector, k: usize) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(Error::InvalidK);
        }
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                left: self.dim,
                right: query.dim(),
            });
        }
        let q = query.values();
        // Bounded selection: `kept` holds the current top-k, worst last.
        let mut kept: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for i in 0..self.entries.len() {
            let score = self.score_row(i, q);
            if kept.len() == k {
                let &(wscore, widx) = kept.last().expect("kept is non-empty");
                if !ranks_before(score, &self.entries[i].id, wscore, &self.entries[widx].id) {
                    continue;
                }
                kept.pop();
            }
            let pos = kept
                .partition_point(|&(s, j)| ranks_before(s, &self.entries[j].id, score, &self.entries[i].id));
            kept.insert(pos, (score, i));
        }
        Ok(RetrievalResult {
            candidates: kept
                .into_iter()
                .map(|(score, i)| ScoredHotword {
                    hotword: self.entries[i].clone(),
                    score,
                })
                .collect(),
        })
    }

    /// Returns a new index extended with `new` entries, embedded with the
    /// same encoder. Equivalent to a full rebuild on the extended
    /// vocabulary.
    pub fn add_entries(&self, new: &[Hotword], encoder: &dyn TextEncoder) -> Result<Self> {
        if encoder.fingerprint() != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                index: self.fingerprint,
                encoder: encoder.fingerprint(),
            });
        }
        let mut entries = self.entries.clone();
        entries.extend(new.iter().cloned());
        let vocab = Vocabulary::new(entries)?;
        let mut matrix = self.matrix.clone();
        for entry in new {
            let emb = encoder
                .embed_text(&entry.surface)
                .map_err(|e| Error::EntryEmbedding {
                    id: entry.id.clone(),
                    source: Box::new(e),
                })?;
            matrix.extend_from_slice(emb.values());
        }
        Ok(HotwordIndex {
            dim: self.dim,
            entries: vocab.entries().to_vec(),
            matrix,
            fingerprint: self.fingerprint,
        })
    }

    /// Returns a new index without the given ids. Unknown ids are an
    /// error. Removing everything leaves a queryable empty index.
    pub fn remove_entries(&self, ids: &[&str]) -> Result<Self> {
        let to_remove: BTreeSet<&str> = ids.iter().copied().collect();
        for id in &to_remove {
            if !self.entries.iter().any(|e| e.id == *id) {
                return Err(Error::UnknownId((*id).to_string()));
            }
        }
        let mut entries = Vec::new();
        let mut matrix = Vec::new();
        for (i, entry) in self.entries.iter().enumerate() {
            if !to_remove.contains(entry.id.as_str()) {
                entries.push(entry.clone());
                matrix.extend_from_slice(self.row(i));
            }
        }
        Ok(HotwordIndex {
            dim: self.dim,
            entries,
            matrix,
            fingerprint: self.fingerprint,
        })
    }

    /// Serializes as: magic, version, dim, row count, fingerprint, entry
    /// table, then packed little-endian f32 rows. Byte-identical for
    /// identical inputs.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        w.write_all(&self.fingerprint.to_le_bytes())?;
        for e in &self.entries {
            write_str(w, &e.id)?;
            write_str(w, &e.surface)?;
            match &e.domain {
                Some(d) => {
                    w.write_all(&[1])?;
                    write_str(w, d)?;
                }
                None => w.write_all(&[0])?,
            }
        }
        for v in &self.matrix {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::BadIndexFile("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != INDEX_VERSION {
            return Err(Error::BadIndexFile(format!(
                "unsupported version {version}"
            )));
        }
        let dim = read_u32(r)? as usize;
        let n = read_u64(r)? as usize;
        let fingerprint = read_u64(r)?;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let id = read_str(r)?;
            let surface = read_str(r)?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            let domain = if flag[0] == 1 {
                Some(read_str(r)?)
            } else {
                None
            };
            entries.push(Hotword {
                id,
                surface,
                domain,
            });
        }
        let mut matrix = vec![0f32; n * dim];
        let mut buf = [0u8; 4];
        for v in matrix.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        Ok(HotwordIndex {
            dim,
            entries,
            matrix,
            fingerprint,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::BadIndexFile(format!("string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::BadIndexFile(e.to_string()))
}
