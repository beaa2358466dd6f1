//! Bimodal embedding corpora: per-modality embedding sets, the many-to-many
//! image/text pair graph, optional ground-truth identities and a seeded
//! synthetic generator.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, Matrix};
use crate::{Error, Modality, Result};

/// Dense matrix of feature vectors for one modality. Instance ids are row
/// indices `0..count`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    modality: Modality,
    vectors: Matrix,
}

impl EmbeddingSet {
    pub fn new(modality: Modality, vectors: Matrix) -> Result<Self> {
        if vectors.rows() == 0 || vectors.cols() == 0 {
            return Err(Error::EmptyCorpus(format!(
                "{modality} set has count={} dim={}",
                vectors.rows(),
                vectors.cols()
            )));
        }
        Ok(EmbeddingSet { modality, vectors })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn count(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vector(&self, id: usize) -> &[f64] {
        self.vectors.row(id)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.vectors
    }

    pub fn into_matrix(self) -> Matrix {
        self.vectors
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize(mut self) -> Result<Self> {
        for id in 0..self.count() {
            if !linalg::normalize_in_place(self.vectors.row_mut(id)) {
                return Err(Error::DegenerateVector { modality: self.modality, id });
            }
        }
        Ok(self)
    }

    pub fn is_normalized(&self, tol: f64) -> bool {
        self.vectors.iter_rows().all(|r| (linalg::norm(r) - 1.0).abs() <= tol)
    }
}

/// Many-to-many image/text pairing. Both directions are kept, each list in
/// ascending id order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairGraph {
    image_to_texts: Vec<Vec<usize>>,
    text_to_images: Vec<Vec<usize>>,
}

impl PairGraph {
    /// Validates the image → texts lists against the instance counts and
    /// derives the inverse map. Every image and every text must take part in
    /// at least one pair.
    pub fn new(n_images: usize, n_texts: usize, image_to_texts: Vec<Vec<usize>>) -> Result<Self> {
        if image_to_texts.len() != n_images {
            return Err(Error::ReferentialIntegrity(format!(
                "pair lists cover {} images, corpus has {n_images}",
                image_to_texts.len()
            )));
        }
        let mut text_to_images = vec![Vec::new(); n_texts];
        let mut image_to_texts = image_to_texts;
        for (img, texts) in image_to_texts.iter_mut().enumerate() {
            if texts.is_empty() {
                return Err(Error::ReferentialIntegrity(format!("image {img} has no paired text")));
            }
            texts.sort_unstable();
            texts.dedup();
            for &t in texts.iter() {
                if t >= n_texts {
                    return Err(Error::ReferentialIntegrity(format!(
                        "image {img} references unknown text {t} (corpus has {n_texts})"
                    )));
                }
                text_to_images[t].push(img);
            }
        }
        if let Some(t) = text_to_images.iter().position(|v| v.is_empty()) {
            return Err(Error::ReferentialIntegrity(format!("text {t} has no paired image")));
        }
        Ok(PairGraph { image_to_texts, text_to_images })
    }

    pub fn n_images(&self) -> usize {
        self.image_to_texts.len()
    }

    pub fn n_texts(&self) -> usize {
        self.text_to_images.len()
    }

    pub fn texts_of(&self, image: usize) -> &[usize] {
        &self.image_to_texts[image]
    }

    pub fn images_of(&self, text: usize) -> &[usize] {
        &self.text_to_images[text]
    }

    /// Paired instances in the other modality (the paired-instance search).
    pub fn partners(&self, modality: Modality, id: usize) -> &[usize] {
        match modality {
            Modality::Image => self.texts_of(id),
            Modality::Text => self.images_of(id),
        }
    }

    pub fn image_to_texts(&self) -> &[Vec<usize>] {
        &self.image_to_texts
    }

    pub fn text_to_images(&self) -> &[Vec<usize>] {
        &self.text_to_images
    }

    pub fn contains(&self, image: usize, text: usize) -> bool {
        self.image_to_texts.get(image).is_some_and(|v| v.binary_search(&text).is_ok())
    }

    /// All `(image, text)` pairs, image-major.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.image_to_texts
            .iter()
            .enumerate()
            .flat_map(|(i, ts)| ts.iter().map(move |&t| (i, t)))
    }

    pub fn n_pairs(&self) -> usize {
        self.image_to_texts.iter().map(Vec::len).sum()
    }

    /// Exhaustive check that the two maps are mutual inverses.
    pub fn is_consistent(&self) -> bool {
        let forward = self.pairs().all(|(i, t)| self.text_to_images[t].contains(&i));
        let backward = self
            .text_to_images
            .iter()
            .enumerate()
            .all(|(t, is)| is.iter().all(|&i| self.image_to_texts[i].contains(&t)));
        forward && backward
    }
}

/// Planted identities, used only for evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub images: Vec<usize>,
    pub texts: Vec<usize>,
}

impl GroundTruth {
    pub fn of(&self, modality: Modality) -> &[usize] {
        match modality {
            Modality::Image => &self.images,
            Modality::Text => &self.texts,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub images: EmbeddingSet,
    pub texts: EmbeddingSet,
    pub pairs: PairGraph,
    pub ground_truth: Option<GroundTruth>,
}

impl Corpus {
    pub fn new(
        images: EmbeddingSet,
        texts: EmbeddingSet,
        pairs: PairGraph,
        ground_truth: Option<GroundTruth>,
    ) -> Result<Self> {
        if images.dim() != texts.dim() {
            return Err(Error::Shape(format!(
                "image dim {} != text dim {}",
                images.dim(),
                texts.dim()
            )));
        }
        if pairs.n_images() != images.count() || pairs.n_texts() != texts.count() {
            return Err(Error::ReferentialIntegrity(format!(
                "pair graph is {}x{}, corpus is {}x{}",
                pairs.n_images(),
                pairs.n_texts(),
                images.count(),
                texts.count()
            )));
        }
        if let Some(gt) = &ground_truth {
            if gt.images.len() != images.count() || gt.texts.len() != texts.count() {
                return Err(Error::ReferentialIntegrity(
                    "ground truth does not cover every instance".into(),
                ));
            }
        }
        Ok(Corpus { images, texts, pairs, ground_truth })
    }

    pub fn set(&self, modality: Modality) -> &EmbeddingSet {
        match modality {
            Modality::Image => &self.images,
            Modality::Text => &self.texts,
        }
    }

    pub fn dim(&self) -> usize {
        self.images.dim()
    }
}

/// Parameters of the synthetic corpus generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_identities: usize,
    pub images_per_id: usize,
    pub texts_per_image: usize,
    pub dim: usize,
    /// Per-component std-dev of the instance noise around an identity center.
    pub intra_id_noise: f64,
    /// Per-component std-dev of the per-modality offset vector.
    pub modality_offset_scale: f64,
    /// Fraction of identities generated with 3x noise.
    pub outlier_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_identities: 100,
            images_per_id: 4,
            texts_per_image: 2,
            dim: 64,
            intra_id_noise: 0.08,
            modality_offset_scale: 0.1,
            outlier_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities == 0 || self.images_per_id == 0 || self.texts_per_image == 0 || self.dim == 0 {
            return Err(Error::Parameter("synthetic corpus counts must all be >= 1".into()));
        }
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !finite_nonneg(self.intra_id_noise) || !finite_nonneg(self.modality_offset_scale) {
            return Err(Error::Parameter("noise scales must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(Error::Parameter("outlier_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Generates a corpus with planted identities.
///
/// Each identity gets a center on the unit sphere. Images are
/// `center + image_offset + noise`, texts `center + text_offset + noise`,
/// renormalized and rounded to `f32` precision so the corpus survives the
/// embedding file format bit-exactly. Image `i` of identity `k` has id
/// `k * images_per_id + i`; its captions are the `texts_per_image`
/// consecutive text ids starting at `image_id * texts_per_image`.
pub fn synth_corpus(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.dim;

    let image_offset = gaussian_vec(&mut rng, dim, spec.modality_offset_scale);
    let text_offset = gaussian_vec(&mut rng, dim, spec.modality_offset_scale);

    let n_noisy = libm::round(spec.outlier_fraction * spec.n_identities as f64) as usize;
    let mut order: Vec<usize> = (0..spec.n_identities).collect();
    order.shuffle(&mut rng);
    let mut noisy = vec![false; spec.n_identities];
    for &k in &order[..n_noisy] {
        noisy[k] = true;
    }

    let n_images = spec.n_identities * spec.images_per_id;
    let n_texts = n_images * spec.texts_per_image;
    let mut images = Vec::with_capacity(n_images * dim);
    let mut texts = Vec::with_capacity(n_texts * dim);
    let mut gt_images = Vec::with_capacity(n_images);
    let mut gt_texts = Vec::with_capacity(n_texts);
    let mut image_to_texts = Vec::with_capacity(n_images);

    let emit = |base: &[f64], offset: &[f64], sigma: f64, rng: &mut ChaCha8Rng, out: &mut Vec<f64>, modality, id| {
        let mut v: Vec<f64> = base.iter().zip(offset).map(|(c, o)| c + o).collect();
        if sigma > 0.0 {
            for x in v.iter_mut() {
                *x += sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        if !linalg::normalize_in_place(&mut v) {
            return Err(Error::DegenerateVector { modality, id });
        }
        out.extend(v.into_iter().map(|x| x as f32 as f64));
        Ok(())
    };

    for identity in 0..spec.n_identities {
        let mut center = gaussian_vec(&mut rng, dim, 1.0);
        if !linalg::normalize_in_place(&mut center) {
            center = vec![0.0; dim];
            center[0] = 1.0;
        }
        let sigma = if noisy[identity] { 3.0 * spec.intra_id_noise } else { spec.intra_id_noise };
        for _ in 0..spec.images_per_id {
            let image_id = gt_images.len();
            emit(&center, &image_offset, sigma, &mut rng, &mut images, Modality::Image, image_id)?;
            gt_images.push(identity);
            let mut caps = Vec::with_capacity(spec.texts_per_image);
            for _ in 0..spec.texts_per_image {
                let text_id = gt_texts.len();
                emit(&center, &text_offset, sigma, &mut rng, &mut texts, Modality::Text, text_id)?;
                gt_texts.push(identity);
                caps.push(text_id);
            }
            image_to_texts.push(caps);
        }
    }

    let images = EmbeddingSet::new(Modality::Image, Matrix::from_vec(n_images, dim, images)?)?;
    let texts = EmbeddingSet::new(Modality::Text, Matrix::from_vec(n_texts, dim, texts)?)?;
    let pairs = PairGraph::new(n_images, n_texts, image_to_texts)?;
    Corpus::new(images, texts, pairs, Some(GroundTruth { images: gt_images, texts: gt_texts }))
}
