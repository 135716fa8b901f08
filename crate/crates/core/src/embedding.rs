//! Base sentence embeddings: the CSV interchange format, a hashed n-gram
//! reference featurizer, and cosine/angle primitives.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::ops::Deref;
use std::path::Path;

use crate::corpus::RelationId;
use crate::error::{Error, Result};

/// Cosines are clamped to `[-1 + COSINE_CLAMP, 1 - COSINE_CLAMP]` before `acos`.
pub const COSINE_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Validation(format!(
                "embedding dimension must be >= 2, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("embedding has non-finite entries".into()));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for EmbeddingVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Unclamped cosine; errors on dimension mismatch or a zero vector.
pub fn raw_cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Validation(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Validation("cosine of a zero vector".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

pub(crate) fn clamp_cosine(c: f64) -> f64 {
    c.clamp(-1.0 + COSINE_CLAMP, 1.0 - COSINE_CLAMP)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    raw_cosine(a, b).map(clamp_cosine)
}

/// Angle between two vectors, computed from the clamped cosine.
pub fn arc_angle(a: &[f64], b: &[f64]) -> Result<f64> {
    cosine_similarity(a, b).map(f64::acos)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn tokenize(sentence: &str) -> Vec<String> {
    sentence
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Signed feature hashing of word unigrams and bigrams into `dim` buckets,
/// L2-normalized. Output depends only on `(sentence, dim, seed)`.
pub fn featurize(sentence: &str, dim: usize, seed: u64) -> Result<EmbeddingVector> {
    if dim < 2 {
        return Err(Error::Validation(format!("featurizer dim must be >= 2, got {dim}")));
    }
    let tokens = tokenize(sentence);
    if tokens.is_empty() {
        return Err(Error::Validation("cannot featurize an empty sentence".into()));
    }
    let mut values = vec![0.0; dim];
    let mut add = |feature: &str| {
        let h = splitmix64(fnv1a(feature.as_bytes()) ^ splitmix64(seed));
        let bucket = ((h >> 1) % dim as u64) as usize;
        values[bucket] += if h & 1 == 0 { 1.0 } else { -1.0 };
    };
    for t in &tokens {
        add(t);
    }
    for pair in tokens.windows(2) {
        add(&format!("{}\u{1f}{}", pair[0], pair[1]));
    }
    let n = norm(&values);
    if n == 0.0 {
        return Err(Error::Validation(format!(
            "features of `{sentence}` cancel out at dim {dim}"
        )));
    }
    values.iter_mut().for_each(|v| *v /= n);
    EmbeddingVector::new(values)
}

/// Base embeddings keyed by relation id; every row has the same dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    rows: BTreeMap<RelationId, EmbeddingVector>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Validation(format!("embedding dim must be >= 2, got {dim}")));
        }
        Ok(Self {
            dim,
            rows: BTreeMap::new(),
        })
    }

    pub fn insert(&mut self, id: RelationId, v: EmbeddingVector) -> Result<()> {
        if v.dim() != self.dim {
            return Err(Error::Validation(format!(
                "row {id} has dim {}, table dim is {}",
                v.dim(),
                self.dim
            )));
        }
        if self.rows.insert(id, v).is_some() {
            return Err(Error::Validation(format!("duplicate embedding row {id}")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, id: RelationId) -> Option<&EmbeddingVector> {
        self.rows.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (RelationId, &EmbeddingVector)> {
        self.rows.iter().map(|(k, v)| (*k, v))
    }

    /// Errors naming the first id without a row.
    pub fn require_all(&self, ids: impl IntoIterator<Item = RelationId>) -> Result<()> {
        for id in ids {
            if !self.rows.contains_key(&id) {
                return Err(Error::Coverage(format!("no embedding for relation {id}")));
            }
        }
        Ok(())
    }

    /// Writes the `relation_id,dim=<L>` CSV, one row per relation in id order.
    /// `comments` become leading `#` lines.
    pub fn write_csv(&self, comments: &[&str], out: &mut impl Write) -> std::io::Result<()> {
        for c in comments {
            writeln!(out, "# {c}")?;
        }
        writeln!(out, "relation_id,dim={}", self.dim)?;
        for (id, v) in &self.rows {
            write!(out, "{id}")?;
            for x in v.iter() {
                write!(out, ",{x}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn save(&self, comments: &[&str], path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        self.write_csv(comments, &mut out)
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Reads an embedding CSV. Lines starting with `#` before the header are
/// comments; the header must be exactly `relation_id,dim=<L>`.
pub fn parse_embeddings(reader: impl BufRead, origin: &Path) -> Result<EmbeddingTable> {
    let mut table: Option<EmbeddingTable> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        let line = line.trim_end_matches('\r');
        match &mut table {
            None => {
                if line.starts_with('#') || line.trim().is_empty() {
                    continue;
                }
                let dim = line
                    .strip_prefix("relation_id,dim=")
                    .and_then(|d| d.parse::<usize>().ok())
                    .ok_or_else(|| Error::parse(origin, line_no, "expected header `relation_id,dim=<L>`"))?;
                table = Some(EmbeddingTable::new(dim).map_err(|e| Error::parse(origin, line_no, e.to_string()))?);
            }
            Some(table) => {
                if line.trim().is_empty() {
                    continue;
                }
                let mut fields = line.split(',');
                let id = fields
                    .next()
                    .and_then(|f| f.trim().parse::<RelationId>().ok())
                    .ok_or_else(|| Error::parse(origin, line_no, "bad relation_id"))?;
                let values = fields
                    .map(|f| f.trim().parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| Error::parse(origin, line_no, e.to_string()))?;
                let v = EmbeddingVector::new(values).map_err(|e| Error::parse(origin, line_no, e.to_string()))?;
                table
                    .insert(id, v)
                    .map_err(|e| Error::parse(origin, line_no, e.to_string()))?;
            }
        }
    }
    table.ok_or_else(|| Error::parse(origin, 0, "missing header `relation_id,dim=<L>`"))
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(BufReader::new(file), path)
}
