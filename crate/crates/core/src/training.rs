//! Joint segmentation + alignment training over source, target and mixed
//! clouds, evaluation and pseudo-labelling.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::alignment::{align_loss, mean_cosine, AlignError, AlignmentBatch};
use crate::encoder::{
    argmax_rows, backward_into, encoder_inputs, forward_inputs, inputs_with_context,
    optimizer_step, seg_loss, softmax, AdamState, AdamWConfig, EncoderError, ModelGrads, SegModel,
    CONTEXT_NEIGHBORS,
};
use crate::exec::Exec;
use crate::metrics::{ConfusionMatrix, MetricsError};
use crate::mixup::{
    hybrid_mix_indexed, labels_or_ignore, Augmentation, DonorIndex, MixConfig, MixError, MixedCloud,
};
use crate::model::{DomainSample, EmbeddingMatrix, PointCloud, Vec3, IGNORE};
use crate::neighbors::{local_context_at, local_context_with};
use crate::projection::guided_features;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error("NoSourceSamples: training needs at least one labelled source sample")]
    NoSourceSamples,
    #[error("DimensionMismatch: {0}")]
    DimensionMismatch(String),
    #[error("DuplicateSampleId: {0}")]
    DuplicateSampleId(u64),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Mix(#[from] MixError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Source samples per step; the same number of target samples is drawn.
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the alignment loss.
    pub lambda: f64,
    pub epochs: usize,
    /// Fraction of mixed clouds among all clouds of a step.
    pub mix_proportion: f64,
    /// Confidence threshold for pseudo-labels.
    pub tau: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub hidden: usize,
    pub num_classes: usize,
    /// Random flip / scale / rotation of every training cloud.
    pub augment: bool,
    /// Points drawn at random from each training cloud per step (0 = all).
    pub points_per_cloud: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr: 0.01,
            lambda: 1.0,
            epochs: 100,
            mix_proportion: 0.5,
            tau: 0.9,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            hidden: 64,
            num_classes: 6,
            augment: true,
            points_per_cloud: 256,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.mix_proportion) {
            return bad("mix_proportion must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if self.hidden < 1 || self.num_classes < 1 {
            return bad("hidden and num_classes must be >= 1");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Mixed clouds per step for `normal` plain clouds.
    pub fn mixed_count(&self, normal: usize) -> usize {
        let p = self.mix_proportion;
        if p >= 1.0 {
            normal
        } else {
            (normal as f64 * p / (1.0 - p)).round() as usize
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub seg_loss: f64,
    pub align_loss: f64,
    pub target_miou: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "{} {:.6} {:.6} {:.6}",
            self.epoch, self.seg_loss, self.align_loss, self.target_miou
        )
    }
}

pub fn format_log(log: &[EpochLog]) -> String {
    let mut out = String::new();
    for e in log {
        writeln!(out, "{}", e.line()).unwrap();
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: SegModel,
    pub log: Vec<EpochLog>,
}

/// A sample together with its guided features and local context, computed
/// once on the unaugmented geometry.
struct Prepared {
    sample: DomainSample,
    guided: EmbeddingMatrix,
    covered: Vec<bool>,
    context: Vec<Vec3>,
    instances: DonorIndex,
}

impl Prepared {
    fn new(sample: DomainSample, channels: usize) -> Self {
        let (guided, covered) = guided_features(&sample.cloud, &sample.views, channels);
        let context = local_context_with(&sample.cloud, CONTEXT_NEIGHBORS, Exec::Sequential);
        let instances = DonorIndex::new(&sample);
        Self {
            sample,
            guided,
            covered,
            context,
            instances,
        }
    }
}

/// Points of one training cloud, each referring back to its prepared sample
/// as `(pool index, point index)`.
struct StepCloud {
    points: Vec<(usize, usize)>,
    labels: Vec<i32>,
    /// Mixed clouds get their context recomputed on the mixed geometry.
    mixed: bool,
}

fn gather(mixed: &MixedCloud, by_id: &HashMap<u64, usize>) -> StepCloud {
    StepCloud {
        points: mixed
            .provenance
            .iter()
            .map(|&(sid, j)| (by_id[&sid], j))
            .collect(),
        labels: labels_or_ignore(&mixed.cloud),
        mixed: true,
    }
}

fn plain(k: usize, p: &Prepared) -> StepCloud {
    StepCloud {
        points: (0..p.sample.cloud.len()).map(|j| (k, j)).collect(),
        labels: labels_or_ignore(&p.sample.cloud),
        mixed: false,
    }
}

/// Encoder inputs, labels, guided rows and coverage of a (sub-sampled,
/// augmented) training cloud.
fn materialize(
    sc: &StepCloud,
    pool: &[Prepared],
    pick: &[usize],
    aug: &Augmentation,
    channels: usize,
) -> (EmbeddingMatrix, Vec<i32>, EmbeddingMatrix, Vec<bool>) {
    let n = pick.len();
    let mut positions = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    let mut context = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut guided = EmbeddingMatrix::zeros(n, channels);
    let mut covered = vec![false; n];
    let fresh = sc.mixed.then(|| {
        let pts: Vec<Vec3> = sc
            .points
            .iter()
            .map(|&(k, j)| pool[k].sample.cloud.positions[j])
            .collect();
        local_context_at(&pts, pick, CONTEXT_NEIGHBORS, Exec::Sequential)
    });
    for (r, &i) in pick.iter().enumerate() {
        let (k, j) = sc.points[i];
        let p = &pool[k];
        positions.push(aug.apply_point(&p.sample.cloud.positions[j]));
        intensity.push(p.sample.cloud.intensity_at(j));
        let ctx = fresh.as_ref().map_or(&p.context[j], |f| &f[r]);
        context.push(aug.apply_point(ctx));
        labels.push(sc.labels[i]);
        if p.covered[j] {
            covered[r] = true;
            guided.row_mut(r).copy_from_slice(p.guided.row(j));
        }
    }
    let cloud = PointCloud::new(positions).with_intensity(intensity);
    (
        inputs_with_context(&cloud, &context),
        labels,
        guided,
        covered,
    )
}

/// Cycles through a shuffled index order, reshuffling after each pass.
struct Cycle {
    order: Vec<usize>,
    pos: usize,
}

impl Cycle {
    fn new<R: Rng>(n: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn next<R: Rng>(&mut self, rng: &mut R) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Trains a model from scratch. `targets` carry no labels into training
/// unless `pseudo` labels are attached; `eval` (labelled target samples)
/// only feeds the `target_miou` column of the log.
pub fn train(
    sources: &[DomainSample],
    targets: &[DomainSample],
    eval: &[DomainSample],
    mix: Option<&MixConfig>,
    cfg: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    train_from(None, sources, targets, eval, mix, cfg)
}

/// Like [`train`], optionally continuing from an existing model.
pub fn train_from(
    init: Option<SegModel>,
    sources: &[DomainSample],
    targets: &[DomainSample],
    eval: &[DomainSample],
    mix: Option<&MixConfig>,
    cfg: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    cfg.check()?;
    if let Some(m) = mix {
        m.check()?;
    }
    if sources.is_empty() {
        return Err(TrainError::NoSourceSamples);
    }
    let channels = sources
        .iter()
        .chain(targets)
        .find_map(|s| s.channels())
        .ok_or_else(|| TrainError::DimensionMismatch("no sample has a camera view".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = match init {
        Some(m) => m,
        None => SegModel::init(cfg.hidden, channels, cfg.num_classes, &mut rng),
    };
    if model.dim() != channels {
        return Err(TrainError::DimensionMismatch(format!(
            "embedding width {} != feature channels {channels}",
            model.dim()
        )));
    }
    if model.classes() != cfg.num_classes {
        return Err(TrainError::DimensionMismatch(format!(
            "model has {} classes, config {}",
            model.classes(),
            cfg.num_classes
        )));
    }

    let all: Vec<&DomainSample> = sources.iter().chain(targets).collect();
    let pool: Vec<Prepared> =
        Exec::default().map_slice(&all, |s| Prepared::new((*s).clone(), channels));
    let mut by_id = HashMap::new();
    for (i, p) in pool.iter().enumerate() {
        if by_id.insert(p.sample.sample_id, i).is_some() {
            return Err(TrainError::DuplicateSampleId(p.sample.sample_id));
        }
    }
    let n_src = sources.len();
    let n_tgt = targets.len();

    let mut adam = AdamState::for_model(&model);
    let opt = cfg.adamw();
    let b = cfg.batch_size;
    let steps = n_src.div_ceil(b);
    let mut src_cycle = Cycle::new(n_src, &mut rng);
    let mut tgt_cycle = Cycle::new(n_tgt, &mut rng);
    let mixing = mix.filter(|_| n_tgt > 0 && cfg.mix_proportion > 0.0);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let (mut seg_sum, mut seg_n, mut al_sum, mut al_n) = (0.0, 0usize, 0.0, 0usize);
        for _ in 0..steps {
            let src: Vec<usize> = (0..b).map(|_| src_cycle.next(&mut rng)).collect();
            let tgt: Vec<usize> = if n_tgt > 0 {
                (0..b).map(|_| n_src + tgt_cycle.next(&mut rng)).collect()
            } else {
                Vec::new()
            };
            let mut clouds: Vec<StepCloud> = Vec::new();
            let normal = src.len() + tgt.len();
            let n_mixed = if mixing.is_some() {
                cfg.mixed_count(normal)
            } else {
                0
            };
            if mixing.is_none() || cfg.mix_proportion < 1.0 {
                clouds.extend(src.iter().chain(&tgt).map(|&i| plain(i, &pool[i])));
            }
            if let Some(mc) = mixing {
                for j in 0..n_mixed {
                    let s = &pool[src[j % src.len()]];
                    let t = &pool[tgt[j % tgt.len()]];
                    let (a, bb) = if j % 2 == 0 { (t, s) } else { (s, t) };
                    let mixed = hybrid_mix_indexed(
                        &a.sample,
                        Some(&a.instances),
                        &bb.sample,
                        mc,
                        rng.gen(),
                    )?;
                    clouds.push(gather(&mixed, &by_id));
                }
            }

            let mut batch = Vec::with_capacity(clouds.len());
            for sc in &clouds {
                let n = sc.points.len();
                if n == 0 {
                    continue;
                }
                let pick = if cfg.points_per_cloud > 0 && n > cfg.points_per_cloud {
                    let mut v = index::sample(&mut rng, n, cfg.points_per_cloud).into_vec();
                    v.sort_unstable();
                    v
                } else {
                    (0..n).collect()
                };
                let aug = if cfg.augment {
                    Augmentation::draw(&mut rng)
                } else {
                    Augmentation::IDENTITY
                };
                batch.push(materialize(sc, &pool, &pick, &aug, channels));
            }
            // losses are means over the whole step, as if the clouds were one tensor
            let n_valid: usize = batch
                .iter()
                .map(|m| m.1.iter().filter(|&&l| l != IGNORE).count())
                .sum();
            let n_cov: usize = batch
                .iter()
                .map(|m| m.3.iter().filter(|&&c| c).count())
                .sum();
            let (mut step_seg, mut step_al) = (0.0, 0.0);
            let mut grads = ModelGrads::zeros_like(&model);
            for (inputs, labels, guided, covered) in batch {
                let rows = labels.len();
                let cache = forward_inputs(&model, inputs);
                let valid = labels.iter().filter(|&&l| l != IGNORE).count();
                let grad_logits = match seg_loss(&cache.logits, &labels) {
                    Ok((loss, g)) => {
                        let w = valid as f64 / n_valid as f64;
                        step_seg += w * loss;
                        let mut g = g;
                        g.data.iter_mut().for_each(|v| *v *= w);
                        g
                    }
                    Err(EncoderError::NoValidLabels) => {
                        EmbeddingMatrix::zeros(rows, model.classes())
                    }
                    Err(e) => return Err(e.into()),
                };
                let cov = covered.iter().filter(|&&c| c).count();
                let grad_emb = if cfg.lambda > 0.0 && cov > 0 {
                    let out = align_loss(AlignmentBatch {
                        f_point: &cache.embeddings,
                        f_guided: &guided,
                        covered: &covered,
                    })?;
                    let w = cov as f64 / n_cov as f64;
                    step_al += w * out.loss;
                    let mut g = out.grad;
                    g.data.iter_mut().for_each(|v| *v *= w * cfg.lambda);
                    Some(g)
                } else {
                    None
                };
                if grad_emb.is_none() && valid == 0 {
                    continue;
                }
                backward_into(
                    &model,
                    &cache,
                    &grad_logits,
                    grad_emb.as_ref(),
                    1.0,
                    &mut grads,
                );
            }
            if n_valid > 0 {
                seg_sum += step_seg;
                seg_n += 1;
            }
            if cfg.lambda > 0.0 && n_cov > 0 {
                al_sum += step_al;
                al_n += 1;
            }
            optimizer_step(&mut model, &grads, &mut adam, &opt);
        }
        let target_miou = if eval.is_empty() {
            f64::NAN
        } else {
            evaluate(&model, eval, Exec::default())?.miou()
        };
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        log.push(EpochLog {
            epoch,
            seg_loss: mean(seg_sum, seg_n),
            align_loss: mean(al_sum, al_n),
            target_miou,
        });
    }
    Ok(TrainOutput { model, log })
}

/// Argmax class per point.
pub fn predict(model: &SegModel, cloud: &PointCloud) -> Vec<i32> {
    let cache = forward_inputs(model, encoder_inputs(cloud, Exec::Sequential));
    argmax_rows(&cache.logits)
}

/// Confusion matrix of the model's predictions over labelled samples.
/// Samples are processed concurrently; the result does not depend on `exec`.
pub fn evaluate(
    model: &SegModel,
    samples: &[DomainSample],
    exec: Exec,
) -> Result<ConfusionMatrix, TrainError> {
    let preds = exec.map_slice(samples, |s| predict(model, &s.cloud));
    let mut cm = ConfusionMatrix::new(model.classes());
    for (s, p) in samples.iter().zip(&preds) {
        cm.accumulate(&labels_or_ignore(&s.cloud), p)?;
    }
    Ok(cm)
}

/// Mean cosine between point embeddings and guided features over the
/// covered points of the given samples.
pub fn guided_similarity(model: &SegModel, samples: &[DomainSample]) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for s in samples {
        let Some(c) = s.channels() else { continue };
        let (guided, covered) = guided_features(&s.cloud, &s.views, c);
        let cache = forward_inputs(model, encoder_inputs(&s.cloud, Exec::Sequential));
        let k = covered.iter().filter(|&&v| v).count();
        if let Some(m) = mean_cosine(&cache.embeddings, &guided, &covered) {
            sum += m * k as f64;
            n += k;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Confident-argmax labels: `IGNORE` where the top softmax probability is
/// below `tau`.
pub fn confident_labels(logits: &EmbeddingMatrix, tau: f64) -> Vec<i32> {
    let probs = softmax(logits);
    argmax_rows(logits)
        .into_iter()
        .enumerate()
        .map(|(i, k)| {
            if probs.row(i)[k as usize] >= tau {
                k
            } else {
                IGNORE
            }
        })
        .collect()
}

/// Copies of `targets` labelled with the model's confident predictions, and
/// the fraction of points that kept a label.
pub fn pseudo_labels(
    model: &SegModel,
    targets: &[DomainSample],
    tau: f64,
    exec: Exec,
) -> (Vec<DomainSample>, f64) {
    let labels = exec.map_slice(targets, |s| {
        let cache = forward_inputs(model, encoder_inputs(&s.cloud, Exec::Sequential));
        confident_labels(&cache.logits, tau)
    });
    let total: usize = labels.iter().map(Vec::len).sum();
    let kept: usize = labels.iter().flatten().filter(|&&l| l != IGNORE).count();
    let samples = targets
        .iter()
        .zip(labels)
        .map(|(s, l)| {
            let mut s = s.clone();
            s.cloud.labels = Some(l);
            s
        })
        .collect();
    let frac = if total == 0 {
        0.0
    } else {
        kept as f64 / total as f64
    };
    (samples, frac)
}

/// Target samples with their labels removed.
pub fn strip_labels(samples: &[DomainSample]) -> Vec<DomainSample> {
    samples
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.cloud.labels = None;
            s
        })
        .collect()
}
