//! Training checkpoints.
//!
//! A checkpoint directory holds the head weights in the embedding format (one
//! `[W | b]` matrix per layer, narrowed to `f32`) for export, plus
//! `state.bin`, a full-precision blob that restores [`TrainState`] exactly.
//!
//! `state.bin` layout (little-endian): `b"CPST"`, `u32` version, the training
//! config as length-prefixed JSON, `u64` epoch, `u64` global step, two `f64`
//! temperatures, then image head, text head and temperature optimiser
//! sections.

use std::fs;
use std::path::{Path, PathBuf};

use cpcl_core::linalg::Matrix;
use cpcl_core::trainer::{AdamState, ProjectionHead, TrainConfig, TrainState};

use crate::error::{Error, Result};
use crate::format;

pub const STATE_MAGIC: &[u8; 4] = b"CPST";
pub const STATE_VERSION: u32 = 1;
pub const STATE_FILE: &str = "state.bin";

/// `[W | b]` matrices, one per layer.
pub fn layer_matrices(head: &ProjectionHead) -> Vec<Matrix> {
    let dims: Vec<(usize, usize)> = match head.hidden_dim() {
        Some(h) => vec![(head.input_dim(), h), (h, head.output_dim())],
        None => vec![(head.input_dim(), head.output_dim())],
    };
    let p = head.params();
    let mut offset = 0;
    dims.into_iter()
        .map(|(fan_in, fan_out)| {
            let w = &p[offset..offset + fan_in * fan_out];
            let b = &p[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let mut m = Matrix::zeros(fan_out, fan_in + 1);
            for k in 0..fan_out {
                let row = m.row_mut(k);
                row[..fan_in].copy_from_slice(&w[k * fan_in..(k + 1) * fan_in]);
                row[fan_in] = b[k];
            }
            m
        })
        .collect()
}

fn head_files(dir: &Path, name: &str, n_layers: usize) -> Vec<PathBuf> {
    (0..n_layers).map(|l| dir.join(format!("{name}.layer{l}.emb"))).collect()
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, x: u32) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64(&mut self, x: f64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64s(&mut self, xs: &[f64]) {
        self.u64(xs.len() as u64);
        xs.iter().for_each(|&x| self.f64(x));
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn adam(&mut self, a: &AdamState) {
        self.u64(a.step);
        self.f64(a.beta1);
        self.f64(a.beta2);
        self.f64(a.eps);
        self.f64s(&a.m);
        self.f64s(&a.v);
    }
    fn head(&mut self, h: &ProjectionHead) {
        self.u64(h.input_dim() as u64);
        self.u64(h.hidden_dim().unwrap_or(0) as u64);
        self.u64(h.output_dim() as u64);
        self.f64s(h.params());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() < n {
            return Err(Error::Format { path: self.path.to_path_buf(), reason: "truncated state blob".into() });
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        let x = self.u64()?;
        usize::try_from(x).map_err(|_| Error::Format { path: self.path.to_path_buf(), reason: format!("length {x}") })
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        if n > self.bytes.len() / 8 {
            return Err(Error::Format { path: self.path.to_path_buf(), reason: "truncated state blob".into() });
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.usize()?;
        Ok(self.take(n)?.to_vec())
    }
    fn adam(&mut self) -> Result<AdamState> {
        Ok(AdamState {
            step: self.u64()?,
            beta1: self.f64()?,
            beta2: self.f64()?,
            eps: self.f64()?,
            m: self.f64s()?,
            v: self.f64s()?,
        })
    }
    fn head(&mut self) -> Result<ProjectionHead> {
        let input = self.usize()?;
        let hidden = Some(self.usize()?).filter(|&h| h > 0);
        let output = self.usize()?;
        let params = self.f64s()?;
        ProjectionHead::from_params(input, hidden, output, params).map_err(Error::at(self.path))
    }
}

pub fn encode_state(state: &TrainState, config: &TrainConfig) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(STATE_MAGIC);
    w.u32(STATE_VERSION);
    w.bytes(&serde_json::to_vec(config).expect("config serialises"));
    w.u64(state.epoch as u64);
    w.u64(state.global_step);
    w.f64(state.temperatures[0]);
    w.f64(state.temperatures[1]);
    w.head(&state.image_head);
    w.adam(&state.image_adam);
    w.head(&state.text_head);
    w.adam(&state.text_adam);
    w.adam(&state.temperature_adam);
    w.0
}

/// Decodes a state blob into the saved state and the config it was trained with.
pub fn decode_state(bytes: &[u8], path: &Path) -> Result<(TrainState, TrainConfig)> {
    let mut r = Reader { bytes, path };
    if r.take(4)? != STATE_MAGIC {
        return Err(Error::Format { path: path.to_path_buf(), reason: "missing CPST magic".into() });
    }
    let version = r.u32()?;
    if version != STATE_VERSION {
        return Err(Error::Format { path: path.to_path_buf(), reason: format!("unsupported version {version}") });
    }
    let config: TrainConfig = serde_json::from_slice(&r.bytes()?).map_err(Error::json(path))?;
    let epoch = r.usize()?;
    let global_step = r.u64()?;
    let temperatures = [r.f64()?, r.f64()?];
    let image_head = r.head()?;
    let image_adam = r.adam()?;
    let text_head = r.head()?;
    let text_adam = r.adam()?;
    let temperature_adam = r.adam()?;
    if !r.bytes.is_empty() {
        return Err(Error::Format { path: path.to_path_buf(), reason: "trailing bytes".into() });
    }
    let shapes_ok = image_adam.m.len() == image_head.params().len()
        && image_adam.v.len() == image_head.params().len()
        && text_adam.m.len() == text_head.params().len()
        && text_adam.v.len() == text_head.params().len()
        && temperature_adam.m.len() == 2
        && temperature_adam.v.len() == 2;
    if !shapes_ok {
        return Err(Error::Format { path: path.to_path_buf(), reason: "optimiser state does not match heads".into() });
    }
    let state = TrainState {
        image_head,
        text_head,
        image_adam,
        text_adam,
        temperatures,
        temperature_adam,
        epoch,
        global_step,
    };
    Ok((state, config))
}

/// Writes a checkpoint directory, creating it if needed.
pub fn save_checkpoint(dir: impl AsRef<Path>, state: &TrainState, config: &TrainConfig) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    for (name, head) in [("image_head", &state.image_head), ("text_head", &state.text_head)] {
        let layers = layer_matrices(head);
        for (m, path) in layers.iter().zip(head_files(dir, name, layers.len())) {
            format::save_matrix(m, path)?;
        }
    }
    let path = dir.join(STATE_FILE);
    fs::write(&path, encode_state(state, config)).map_err(Error::io(&path))
}

/// Loads a checkpoint. `path` may be the directory or its `state.bin`.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(TrainState, TrainConfig)> {
    let path = path.as_ref();
    let file = if path.is_dir() { path.join(STATE_FILE) } else { path.to_path_buf() };
    let bytes = fs::read(&file).map_err(Error::io(&file))?;
    decode_state(&bytes, &file)
}

/// Rebuilds a head from exported `[W | b]` layer files (at `f32` precision).
pub fn load_head(dir: impl AsRef<Path>, name: &str) -> Result<ProjectionHead> {
    let dir = dir.as_ref();
    let mut layers = Vec::new();
    for path in head_files(dir, name, 2) {
        if path.exists() {
            layers.push(format::load_embeddings(&path, cpcl_core::Modality::Image)?.into_matrix());
        }
    }
    let bad = |reason: &str| Error::Format { path: dir.to_path_buf(), reason: format!("{name}: {reason}") };
    let (input, hidden, output) = match layers.as_slice() {
        [l] => (l.cols() - 1, None, l.rows()),
        [l0, l1] if l1.cols() == l0.rows() + 1 => (l0.cols() - 1, Some(l0.rows()), l1.rows()),
        [] => return Err(bad("no layer files")),
        _ => return Err(bad("layer shapes do not chain")),
    };
    let mut params = Vec::new();
    for m in &layers {
        let fan_in = m.cols() - 1;
        for row in m.iter_rows() {
            params.extend_from_slice(&row[..fan_in]);
        }
        params.extend(m.iter_rows().map(|row| row[fan_in]));
    }
    ProjectionHead::from_params(input, hidden, output, params).map_err(Error::at(dir))
}
