//! Epoch loop: encode → cluster → initialise memories → mine outliers →
//! prototype/instance stage → supplementary ITC stage.

mod adam;
mod head;
mod sampler;
mod schedule;

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState};
pub use head::{encode_with, HeadCache, HeadConfig, ProjectionHead};
pub use sampler::sample_batches;
pub use schedule::LrSchedule;

use crate::clustering::{cluster_set, ClusteringConfig, PseudoLabeling};
use crate::corpus::{Corpus, EmbeddingSet};
use crate::hcm::{self, Batch, LossConfig, LossOutput};
use crate::metrics::{self, MetricsReport};
use crate::oplm::{self, MiningReport, OplmConfig};
use crate::pmm::{self, MemoryConfig, PrototypeMemory, TEMPERATURE_RANGE};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalDirection {
    TextToImage,
    ImageToText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    /// Learning rate at the start of warm-up.
    pub lr_floor: f64,
    pub memory: MemoryConfig,
    /// Initial prototype temperatures (image and text side).
    pub temperature: f64,
    pub learnable_temperature: bool,
    pub clustering: ClusteringConfig,
    pub loss: LossConfig,
    pub oplm: OplmConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub head: HeadConfig,
    pub eval_direction: EvalDirection,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            epochs: 60,
            warmup_epochs: 5,
            lr: 1e-5,
            lr_floor: 1e-6,
            memory: MemoryConfig::default(),
            temperature: 0.07,
            learnable_temperature: true,
            clustering: ClusteringConfig::default(),
            loss: LossConfig::default(),
            oplm: OplmConfig::default(),
            grad_clip: Some(5.0),
            head: HeadConfig::default(),
            eval_direction: EvalDirection::TextToImage,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.lr,
            warmup_start_lr: self.lr_floor,
            warmup_steps: self.warmup_epochs,
            total_steps: self.epochs,
        }
    }

    /// Learning rate for an epoch (the schedule advances once per epoch).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.schedule().lr_at(epoch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Parameter("batch_size must be >= 2".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_floor >= 0.0) {
            return Err(Error::Parameter("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.memory.momentum) {
            return Err(Error::Parameter("memory momentum must lie in [0, 1]".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Parameter("temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// Everything that carries over between epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub image_head: ProjectionHead,
    pub text_head: ProjectionHead,
    pub image_adam: AdamState,
    pub text_adam: AdamState,
    /// `[image, text]` prototype temperatures.
    pub temperatures: [f64; 2],
    pub temperature_adam: AdamState,
    pub epoch: usize,
    pub global_step: u64,
}

impl TrainState {
    pub fn new(input_dim: usize, config: &TrainConfig) -> Self {
        let image_head = ProjectionHead::random(input_dim, &config.head, config.seed.wrapping_mul(2).wrapping_add(1));
        let text_head = ProjectionHead::random(input_dim, &config.head, config.seed.wrapping_mul(2).wrapping_add(2));
        TrainState {
            image_adam: AdamState::new(image_head.params().len()),
            text_adam: AdamState::new(text_head.params().len()),
            image_head,
            text_head,
            temperatures: [config.temperature; 2],
            temperature_adam: AdamState::new(2),
            epoch: 0,
            global_step: 0,
        }
    }

    pub fn heads(&self) -> (&ProjectionHead, &ProjectionHead) {
        (&self.image_head, &self.text_head)
    }
}

/// Per-epoch summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub n_clusters_image: usize,
    pub n_clusters_text: usize,
    pub outliers_image_before: usize,
    pub outliers_text_before: usize,
    pub outliers_image_after: usize,
    pub outliers_text_after: usize,
    pub mined_pairs: usize,
    pub supplementary_pairs: usize,
    pub mined_batches: usize,
    pub supplementary_batches: usize,
    pub mined_loss: Option<f64>,
    pub supplementary_loss: Option<f64>,
    pub temperature_image: f64,
    pub temperature_text: f64,
    pub metrics: Option<MetricsReport>,
}

/// Everything computed before the optimisation loop of an epoch.
#[derive(Debug, Clone)]
pub struct EpochPlan {
    pub image_features: EmbeddingSet,
    pub text_features: EmbeddingSet,
    pub image_labels: PseudoLabeling,
    pub text_labels: PseudoLabeling,
    /// Memories exist only when both modalities produced clusters.
    pub memories: Option<(PrototypeMemory, PrototypeMemory)>,
    pub outliers_before: (usize, usize),
    pub mining: Option<MiningReport>,
    pub mined: Vec<(usize, usize)>,
    pub supplementary: Vec<(usize, usize)>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn epoch_seed(seed: u64, epoch: usize, salt: u64) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt
}

/// Steps 1-5: encode, cluster, initialise memories, mine and partition.
pub fn plan_epoch(state: &TrainState, corpus: &Corpus, config: &TrainConfig) -> Result<EpochPlan> {
    let image_features = state.image_head.encode(&corpus.images)?;
    let text_features = state.text_head.encode(&corpus.texts)?;
    let mut image_labels =
        cluster_set(&image_features, &config.clustering.image, epoch_seed(config.seed, state.epoch, 1))?;
    let mut text_labels =
        cluster_set(&text_features, &config.clustering.text, epoch_seed(config.seed, state.epoch, 2))?;
    let outliers_before = (image_labels.n_outliers(), text_labels.n_outliers());

    let memories = if image_labels.n_clusters() > 0 && text_labels.n_clusters() > 0 {
        let seed = epoch_seed(config.seed, state.epoch, 3);
        let mut im = pmm::init_memory(&image_features, &image_labels, &config.memory, state.temperatures[0], seed)?;
        let mut tm = pmm::init_memory(&text_features, &text_labels, &config.memory, state.temperatures[1], seed ^ 1)?;
        im.set_temperature(state.temperatures[0]);
        tm.set_temperature(state.temperatures[1]);
        Some((im, tm))
    } else {
        None
    };

    let mining = if config.oplm.refined {
        Some(oplm::run_refined_stage(
            &image_features,
            &text_features,
            &corpus.pairs,
            &mut image_labels,
            &mut text_labels,
            &config.oplm,
        )?)
    } else {
        None
    };
    let (mined, supplementary) = oplm::partition_two_stage(&corpus.pairs, &image_labels, &text_labels);
    Ok(EpochPlan {
        image_features,
        text_features,
        image_labels,
        text_labels,
        memories,
        outliers_before,
        mining,
        mined,
        supplementary,
    })
}

struct Forward {
    image: HeadCache,
    text: HeadCache,
}

fn forward_pairs(state: &TrainState, corpus: &Corpus, pairs: &[(usize, usize)]) -> Forward {
    let imgs: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let txts: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    Forward {
        image: state.image_head.forward(&corpus.images.matrix().select_rows(&imgs)),
        text: state.text_head.forward(&corpus.texts.matrix().select_rows(&txts)),
    }
}

/// Backpropagates a loss into the heads (and temperatures) and applies one
/// clipped Adam step.
fn apply_gradients(
    state: &mut TrainState,
    fwd: &Forward,
    loss: &LossOutput,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    let mut g_image = state.image_head.backward(&fwd.image, &loss.grad_image);
    let mut g_text = state.text_head.backward(&fwd.text, &loss.grad_text);
    let mut g_tau = if config.learnable_temperature {
        [loss.grad_temperature.image, loss.grad_temperature.text]
    } else {
        [0.0, 0.0]
    };
    if let Some(max_norm) = config.grad_clip {
        let sq: f64 = g_image.iter().chain(&g_text).chain(&g_tau).map(|g| g * g).sum();
        let norm = libm::sqrt(sq);
        if norm > max_norm {
            let s = max_norm / norm;
            g_image.iter_mut().chain(g_text.iter_mut()).chain(g_tau.iter_mut()).for_each(|g| *g *= s);
        }
    }
    adam_step(state.image_head.params_mut(), &g_image, &mut state.image_adam, lr, "image_head")?;
    adam_step(state.text_head.params_mut(), &g_text, &mut state.text_adam, lr, "text_head")?;
    if config.learnable_temperature {
        adam_step(&mut state.temperatures, &g_tau, &mut state.temperature_adam, lr, "temperature")?;
        for t in state.temperatures.iter_mut() {
            *t = t.clamp(TEMPERATURE_RANGE.0, TEMPERATURE_RANGE.1);
        }
    }
    state.global_step += 1;
    Ok(())
}

/// One optimisation step on a batch of mined pairs: overall loss, Adam step,
/// then momentum updates of both memories with the forward-pass features.
pub fn mined_step(
    state: &mut TrainState,
    plan: &mut EpochPlan,
    corpus: &Corpus,
    pairs: &[(usize, usize)],
    lr: f64,
    config: &TrainConfig,
) -> Result<f64> {
    let (image_mem, text_mem) = plan.memories.as_mut().ok_or(Error::EmptyMemory)?;
    let fwd = forward_pairs(state, corpus, pairs);
    let batch = Batch::new(
        fwd.image.output.clone(),
        fwd.text.output.clone(),
        pairs.iter().map(|p| p.0).collect(),
        pairs.iter().map(|p| p.1).collect(),
        pairs.iter().map(|p| plan.image_labels.label(p.0)).collect(),
        pairs.iter().map(|p| plan.text_labels.label(p.1)).collect(),
    )?;
    let loss = hcm::overall_loss(
        &batch,
        image_mem,
        text_mem,
        &plan.image_labels,
        &plan.text_labels,
        &corpus.pairs,
        &config.loss,
    )?;
    apply_gradients(state, &fwd, &loss, lr, config)?;
    for i in 0..batch.len() {
        if let Some(c) = batch.image_cluster[i] {
            image_mem.momentum_update(batch.image_features.row(i), c)?;
        }
        if let Some(c) = batch.text_cluster[i] {
            text_mem.momentum_update(batch.text_features.row(i), c)?;
        }
    }
    image_mem.set_temperature(state.temperatures[0]);
    text_mem.set_temperature(state.temperatures[1]);
    Ok(loss.value)
}

/// One ITC step on a batch of supplementary pairs.
pub fn supplementary_step(
    state: &mut TrainState,
    corpus: &Corpus,
    pairs: &[(usize, usize)],
    lr: f64,
    config: &TrainConfig,
) -> Result<f64> {
    let fwd = forward_pairs(state, corpus, pairs);
    let batch = Batch::from_features(fwd.image.output.clone(), fwd.text.output.clone())?;
    let mut loss = hcm::itc(&batch, config.loss.itc_temperature)?;
    // instance temperature is a fixed hyper-parameter
    loss.grad_temperature = Default::default();
    apply_gradients(state, &fwd, &loss, lr, config)?;
    Ok(loss.value)
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Runs one full epoch and advances `state.epoch`.
pub fn train_epoch(
    state: &mut TrainState,
    corpus: &Corpus,
    config: &TrainConfig,
    eval: Option<&Corpus>,
) -> Result<EpochReport> {
    config.validate()?;
    let lr = config.lr_at(state.epoch);
    let mut plan = plan_epoch(state, corpus, config)?;
    let mut rng = epoch_rng(config.seed, state.epoch);

    let mut mined_losses = Vec::new();
    if plan.memories.is_some() {
        for pairs in sampler::shuffled_batches(&plan.mined, config.batch_size, &mut rng) {
            mined_losses.push(mined_step(state, &mut plan, corpus, &pairs, lr, config)?);
        }
    }
    let mut supp_losses = Vec::new();
    if config.oplm.supplementary {
        for pairs in sampler::shuffled_batches(&plan.supplementary, config.batch_size, &mut rng) {
            supp_losses.push(supplementary_step(state, corpus, &pairs, lr, config)?);
        }
    }
    if mined_losses.is_empty() && supp_losses.is_empty() {
        return Err(Error::DegenerateEpoch);
    }

    let metrics = match eval {
        Some(c) => Some(evaluate(c, state.heads(), config.eval_direction)?),
        None => None,
    };
    let report = EpochReport {
        epoch: state.epoch,
        lr,
        n_clusters_image: plan.image_labels.n_clusters(),
        n_clusters_text: plan.text_labels.n_clusters(),
        outliers_image_before: plan.outliers_before.0,
        outliers_text_before: plan.outliers_before.1,
        outliers_image_after: plan.image_labels.n_outliers(),
        outliers_text_after: plan.text_labels.n_outliers(),
        mined_pairs: plan.mined.len(),
        supplementary_pairs: plan.supplementary.len(),
        mined_batches: mined_losses.len(),
        supplementary_batches: supp_losses.len(),
        mined_loss: mean(&mined_losses),
        supplementary_loss: mean(&supp_losses),
        temperature_image: state.temperatures[0],
        temperature_text: state.temperatures[1],
        metrics,
    };
    state.epoch += 1;
    Ok(report)
}

/// Encodes `corpus` with `heads` and scores retrieval in `direction`.
pub fn evaluate(corpus: &Corpus, heads: (&ProjectionHead, &ProjectionHead), direction: EvalDirection) -> Result<MetricsReport> {
    let truth = corpus.ground_truth.as_ref().ok_or(Error::EvalWithoutTruth)?;
    let images = encode_with(heads, &corpus.images)?;
    let texts = encode_with(heads, &corpus.texts)?;
    match direction {
        EvalDirection::TextToImage => metrics::evaluate_sets(&texts, &images, Some(truth)),
        EvalDirection::ImageToText => metrics::evaluate_sets(&images, &texts, Some(truth)),
    }
}

/// Prototype rows that differ between two snapshots of a memory.
pub fn changed_rows(before: &PrototypeMemory, after: &PrototypeMemory) -> Vec<usize> {
    (0..before.n_clusters())
        .filter(|&c| before.prototype(c) != after.prototype(c))
        .collect()
}

