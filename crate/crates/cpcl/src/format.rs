//! On-disk formats.
//!
//! - Embeddings: little-endian binary, `b"CPCL"`, `u32` version (1), `u32`
//!   count, `u32` dim, then `count * dim` `f32` values row-major.
//! - Pairs: `{"image_to_texts": {"<image-id>": [text-ids...]}}`.
//! - Ground truth: `{"images": {"<id>": identity}, "texts": {"<id>": identity}}`.
//!
//! A corpus directory holds `images.emb`, `texts.emb`, `pairs.json` and
//! optionally `truth.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cpcl_core::corpus::{Corpus, EmbeddingSet, GroundTruth, PairGraph};
use cpcl_core::linalg::Matrix;
use cpcl_core::Modality;
use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CPCL";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub const IMAGES_FILE: &str = "images.emb";
pub const TEXTS_FILE: &str = "texts.emb";
pub const PAIRS_FILE: &str = "pairs.json";
pub const TRUTH_FILE: &str = "truth.json";

/// Serialises a matrix; values are narrowed to `f32`.
pub fn encode_embeddings(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.as_slice().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &x in m.as_slice() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

/// Parses an embedding file image. Vectors are returned as stored, not
/// normalised.
pub fn decode_embeddings(bytes: &[u8], modality: Modality, path: &Path) -> Result<EmbeddingSet> {
    let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the 16-byte header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("missing CPCL magic".into()));
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = read_u32(bytes, 8) as usize;
    let dim = read_u32(bytes, 12) as usize;
    if count == 0 || dim == 0 {
        return Err(Error::Corpus {
            path: path.to_path_buf(),
            source: cpcl_core::Error::EmptyCorpus(format!("count={count} dim={dim}")),
        });
    }
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("count * dim overflows".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(bad(format!(
            "payload is {} bytes, header declares {count}x{dim} ({expected} bytes)",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect();
    let m = Matrix::from_vec(count, dim, data)?;
    EmbeddingSet::new(modality, m).map_err(Error::at(path))
}

pub fn load_embeddings(path: impl AsRef<Path>, modality: Modality) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode_embeddings(&bytes, modality, path)
}

pub fn save_matrix(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_embeddings(m)).map_err(Error::io(path))
}

pub fn save_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    save_matrix(set.matrix(), path)
}

/// JSON object with decimal-string keys written in numeric order.
struct IdMap<'a, T>(&'a [T]);

impl<T: Serialize> Serialize for IdMap<'_, T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (i, v) in self.0.iter().enumerate() {
            map.serialize_entry(&i.to_string(), v)?;
        }
        map.end()
    }
}

#[derive(Serialize)]
struct PairsOut<'a> {
    image_to_texts: IdMap<'a, Vec<usize>>,
}

#[derive(Deserialize)]
struct PairsIn {
    image_to_texts: BTreeMap<String, Vec<usize>>,
}

#[derive(Serialize)]
struct TruthOut<'a> {
    images: IdMap<'a, usize>,
    texts: IdMap<'a, usize>,
}

#[derive(Deserialize)]
struct TruthIn {
    images: BTreeMap<String, usize>,
    texts: BTreeMap<String, usize>,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(Error::json(path))?;
    s.push('\n');
    fs::write(path, s).map_err(Error::io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(Error::json(path))
}

/// Turns a `{"<id>": value}` map into a dense vector over `0..n`.
fn dense_ids<T>(map: BTreeMap<String, T>, n: usize, what: &str, path: &Path) -> Result<Vec<Option<T>>> {
    let integrity = |msg: String| Error::Corpus {
        path: path.to_path_buf(),
        source: cpcl_core::Error::ReferentialIntegrity(msg),
    };
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    for (key, value) in map {
        let id: usize = key
            .parse()
            .ok()
            .filter(|id: &usize| id.to_string() == key)
            .ok_or_else(|| Error::Format { path: path.to_path_buf(), reason: format!("bad {what} id {key:?}") })?;
        if id >= n {
            return Err(integrity(format!("unknown {what} id {id} (corpus has {n})")));
        }
        out[id] = Some(value);
    }
    Ok(out)
}

pub fn save_pairs(pairs: &PairGraph, path: impl AsRef<Path>) -> Result<()> {
    write_json(&PairsOut { image_to_texts: IdMap(pairs.image_to_texts()) }, path.as_ref())
}

/// Loads and validates a pair file against the corpus sizes.
pub fn load_pairs(path: impl AsRef<Path>, n_images: usize, n_texts: usize) -> Result<PairGraph> {
    let path = path.as_ref();
    let raw: PairsIn = read_json(path)?;
    let lists = dense_ids(raw.image_to_texts, n_images, "image", path)?;
    let lists = lists
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            l.ok_or_else(|| Error::Corpus {
                path: path.to_path_buf(),
                source: cpcl_core::Error::ReferentialIntegrity(format!("image {i} has no pair list")),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PairGraph::new(n_images, n_texts, lists).map_err(Error::at(path))
}

pub fn save_ground_truth(gt: &GroundTruth, path: impl AsRef<Path>) -> Result<()> {
    write_json(&TruthOut { images: IdMap(&gt.images), texts: IdMap(&gt.texts) }, path.as_ref())
}

pub fn load_ground_truth(path: impl AsRef<Path>, n_images: usize, n_texts: usize) -> Result<GroundTruth> {
    let path = path.as_ref();
    let raw: TruthIn = read_json(path)?;
    let complete = |v: Vec<Option<usize>>, what: &str| {
        v.into_iter().enumerate().map(|(i, x)| {
            x.ok_or_else(|| Error::Corpus {
                path: path.to_path_buf(),
                source: cpcl_core::Error::ReferentialIntegrity(format!("{what} {i} has no identity")),
            })
        })
        .collect::<Result<Vec<_>>>()
    };
    Ok(GroundTruth {
        images: complete(dense_ids(raw.images, n_images, "image", path)?, "image")?,
        texts: complete(dense_ids(raw.texts, n_texts, "text", path)?, "text")?,
    })
}

pub fn save_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    save_embeddings(&corpus.images, dir.join(IMAGES_FILE))?;
    save_embeddings(&corpus.texts, dir.join(TEXTS_FILE))?;
    save_pairs(&corpus.pairs, dir.join(PAIRS_FILE))?;
    if let Some(gt) = &corpus.ground_truth {
        save_ground_truth(gt, dir.join(TRUTH_FILE))?;
    }
    Ok(())
}

/// Loads a corpus directory without normalising.
pub fn load_corpus_raw(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let images = load_embeddings(dir.join(IMAGES_FILE), Modality::Image)?;
    let texts = load_embeddings(dir.join(TEXTS_FILE), Modality::Text)?;
    let pairs = load_pairs(dir.join(PAIRS_FILE), images.count(), texts.count())?;
    let truth_path: PathBuf = dir.join(TRUTH_FILE);
    let truth = if truth_path.exists() {
        Some(load_ground_truth(&truth_path, images.count(), texts.count())?)
    } else {
        None
    };
    Corpus::new(images, texts, pairs, truth).map_err(Error::at(dir))
}

/// Loads a corpus directory and L2-normalises both embedding sets.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let raw = load_corpus_raw(dir)?;
    let images = raw.images.normalize().map_err(Error::at(dir.join(IMAGES_FILE)))?;
    let texts = raw.texts.normalize().map_err(Error::at(dir.join(TEXTS_FILE)))?;
    Corpus::new(images, texts, raw.pairs, raw.ground_truth).map_err(Error::at(dir))
}
