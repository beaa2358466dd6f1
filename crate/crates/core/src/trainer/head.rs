use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::EmbeddingSet;
use crate::linalg::{self, Matrix};
use crate::math;
use crate::{Error, Modality, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// Output width; defaults to the input width.
    pub output_dim: Option<usize>,
    /// Optional tanh hidden layer width.
    pub hidden_dim: Option<usize>,
}

/// Affine projection (optionally through one tanh hidden layer) followed by
/// L2 normalisation. All parameters live in one flat buffer:
/// `[W1, b1, W2, b2]` with the hidden layer, `[W, b]` without.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    input_dim: usize,
    hidden_dim: Option<usize>,
    output_dim: usize,
    params: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadCache {
    input: Matrix,
    hidden: Option<Matrix>,
    norms: Vec<f64>,
    pub output: Matrix,
}

impl ProjectionHead {
    pub fn param_count(input_dim: usize, hidden_dim: Option<usize>, output_dim: usize) -> usize {
        match hidden_dim {
            Some(h) => h * input_dim + h + output_dim * h + output_dim,
            None => output_dim * input_dim + output_dim,
        }
    }

    /// Gaussian weights with variance `1 / fan_in`, zero biases.
    pub fn random(input_dim: usize, config: &HeadConfig, seed: u64) -> Self {
        let output_dim = config.output_dim.unwrap_or(input_dim);
        let hidden_dim = config.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(Self::param_count(input_dim, hidden_dim, output_dim));
        let mut layer = |fan_in: usize, fan_out: usize, params: &mut Vec<f64>| {
            let scale = 1.0 / math::sqrt(fan_in as f64);
            params.extend((0..fan_in * fan_out).map(|_| scale * rng.sample::<f64, _>(StandardNormal)));
            params.extend(core::iter::repeat_n(0.0, fan_out));
        };
        match hidden_dim {
            Some(h) => {
                layer(input_dim, h, &mut params);
                layer(h, output_dim, &mut params);
            }
            None => layer(input_dim, output_dim, &mut params),
        }
        ProjectionHead { input_dim, hidden_dim, output_dim, params }
    }

    pub fn from_params(input_dim: usize, hidden_dim: Option<usize>, output_dim: usize, params: Vec<f64>) -> Result<Self> {
        let expected = Self::param_count(input_dim, hidden_dim, output_dim);
        if params.len() != expected {
            return Err(Error::Shape(alloc::format!("head needs {expected} parameters, got {}", params.len())));
        }
        Ok(ProjectionHead { input_dim, hidden_dim, output_dim, params })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> Option<usize> {
        self.hidden_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// (weight offset, bias offset, fan_in, fan_out) per layer.
    fn layers(&self) -> ([(usize, usize, usize, usize); 2], usize) {
        match self.hidden_dim {
            Some(h) => {
                let w1 = 0;
                let b1 = h * self.input_dim;
                let w2 = b1 + h;
                let b2 = w2 + self.output_dim * h;
                ([(w1, b1, self.input_dim, h), (w2, b2, h, self.output_dim)], 2)
            }
            None => {
                let b = self.output_dim * self.input_dim;
                ([(0, b, self.input_dim, self.output_dim), (0, 0, 0, 0)], 1)
            }
        }
    }

    fn affine(&self, layer: (usize, usize, usize, usize), x: &Matrix) -> Matrix {
        let (w, b, fan_in, fan_out) = layer;
        let mut out = Matrix::zeros(x.rows(), fan_out);
        for r in 0..x.rows() {
            let xr = x.row(r);
            let o = out.row_mut(r);
            for k in 0..fan_out {
                o[k] = self.params[b + k] + linalg::dot(&self.params[w + k * fan_in..w + (k + 1) * fan_in], xr);
            }
        }
        out
    }

    pub fn forward(&self, input: &Matrix) -> HeadCache {
        let (layers, n) = self.layers();
        let (hidden, mut z) = if n == 2 {
            let mut h = self.affine(layers[0], input);
            h.as_mut_slice().iter_mut().for_each(|x| *x = math::tanh(*x));
            let z = self.affine(layers[1], &h);
            (Some(h), z)
        } else {
            (None, self.affine(layers[0], input))
        };
        let mut norms = Vec::with_capacity(z.rows());
        for r in 0..z.rows() {
            let n = linalg::norm(z.row(r));
            norms.push(n);
            if n > 0.0 {
                z.row_mut(r).iter_mut().for_each(|x| *x /= n);
            }
        }
        HeadCache { input: input.clone(), hidden, norms, output: z }
    }

    /// Parameter gradient given `dL/d(output)`.
    pub fn backward(&self, cache: &HeadCache, grad_output: &Matrix) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        let (layers, n) = self.layers();
        let rows = grad_output.rows();
        // through the normalisation: dz = (g - y (y·g)) / |z|
        let mut dz = Matrix::zeros(rows, self.output_dim);
        for r in 0..rows {
            let n = cache.norms[r];
            if n == 0.0 {
                continue;
            }
            let y = cache.output.row(r);
            let g = grad_output.row(r);
            let yg = linalg::dot(y, g);
            for (d, (gi, yi)) in dz.row_mut(r).iter_mut().zip(g.iter().zip(y)) {
                *d = (gi - yi * yg) / n;
            }
        }
        let top = layers[n - 1];
        let top_input = cache.hidden.as_ref().unwrap_or(&cache.input);
        let accumulate = |grad: &mut [f64], layer: (usize, usize, usize, usize), x: &Matrix, d: &Matrix| {
            let (w, b, fan_in, fan_out) = layer;
            for r in 0..d.rows() {
                let dr = d.row(r);
                let xr = x.row(r);
                for k in 0..fan_out {
                    grad[b + k] += dr[k];
                    linalg::axpy(dr[k], xr, &mut grad[w + k * fan_in..w + (k + 1) * fan_in]);
                }
            }
        };
        accumulate(&mut grad, top, top_input, &dz);
        if let (2, Some(h)) = (n, cache.hidden.as_ref()) {
            let (w2, _, fan_in2, fan_out2) = layers[1];
            let mut da = Matrix::zeros(rows, fan_in2);
            for r in 0..rows {
                let dzr = dz.row(r);
                let hr = h.row(r);
                let dar = da.row_mut(r);
                for k in 0..fan_out2 {
                    linalg::axpy(dzr[k], &self.params[w2 + k * fan_in2..w2 + (k + 1) * fan_in2], dar);
                }
                for (a, hv) in dar.iter_mut().zip(hr) {
                    *a *= 1.0 - hv * hv;
                }
            }
            accumulate(&mut grad, layers[0], &cache.input, &da);
        }
        grad
    }

    /// Projects every row of `set`.
    pub fn encode(&self, set: &EmbeddingSet) -> Result<EmbeddingSet> {
        if set.dim() != self.input_dim {
            return Err(Error::Shape(alloc::format!("head expects dim {}, set has {}", self.input_dim, set.dim())));
        }
        let out = self.forward(set.matrix()).output;
        EmbeddingSet::new(set.modality(), out)
    }

    /// Identity-weight head (no hidden layer).
    pub fn identity(dim: usize) -> Self {
        let mut params = vec![0.0; dim * dim + dim];
        for i in 0..dim {
            params[i * dim + i] = 1.0;
        }
        ProjectionHead { input_dim: dim, hidden_dim: None, output_dim: dim, params }
    }
}

/// Encodes `set` with the head for its modality.
pub fn encode_with(heads: (&ProjectionHead, &ProjectionHead), set: &EmbeddingSet) -> Result<EmbeddingSet> {
    match set.modality() {
        Modality::Image => heads.0.encode(set),
        Modality::Text => heads.1.encode(set),
    }
}
