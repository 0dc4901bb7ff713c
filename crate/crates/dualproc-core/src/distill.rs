//! The dual-process training loop: generate base images without gradients,
//! partially re-noise them, denoise once with gradient tracking, stamp the
//! task overlay, score with the rater loss, and step only the adapter
//! factors. Base weights never change.

use crate::error::{Error, Result};
use crate::flow::{clean_estimate_node, interpolate, PatchMixer, SamplingSchedule};
use crate::graph::Graph;
use crate::lora::{LoraAdapter, LoraBinder, PlainBinder};
use crate::optim::{Adam, AdamConfig};
use crate::real::Real;
use crate::rng::{step_noise, stream, STEP_GENERATION};
use crate::synthworld::ConditionId;
use crate::tensor::{ImageTensor, Tensor};
use crate::vqa::{vqa_loss_node, Discriminator, VqaQuery, DEFAULT_PROB_FLOOR};
use std::time::Instant;

/// Noise time used when re-noising base images, either a fixed value in
/// (0, 1] or a uniform draw over {0.25, 0.5, 0.75, 1.0} per step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseTime {
    Fixed(f64),
    UniformGrid,
}

pub const NOISE_TIME_GRID: [f64; 4] = [0.25, 0.5, 0.75, 1.0];
/// RNG step id for per-iteration noise-time draws.
const STEP_NOISE_TIME: u64 = 0x9e77;

impl Default for NoiseTime {
    fn default() -> Self {
        NoiseTime::Fixed(1.0)
    }
}

impl NoiseTime {
    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseTime::Fixed(t) if !(*t > 0.0 && *t <= 1.0) => {
                Err(Error::invalid(format!("noise time {} outside (0, 1]", t)))
            }
            _ => Ok(()),
        }
    }

    /// Noise time for one iteration, deterministic in (base_seed, iter).
    pub fn at(&self, base_seed: u64, iter: u64) -> f64 {
        match self {
            NoiseTime::Fixed(t) => *t,
            NoiseTime::UniformGrid => {
                use rand::Rng;
                let rng = &mut stream(base_seed, iter, STEP_NOISE_TIME);
                NOISE_TIME_GRID[rng.random_range(0..NOISE_TIME_GRID.len())]
            }
        }
    }
}

impl serde::Serialize for NoiseTime {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            NoiseTime::Fixed(t) => s.serialize_f64(*t),
            NoiseTime::UniformGrid => s.serialize_str("uniform_grid"),
        }
    }
}

impl<'de> serde::Deserialize<'de> for NoiseTime {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        match &v {
            serde_json::Value::Number(n) => n
                .as_f64()
                .map(NoiseTime::Fixed)
                .ok_or_else(|| serde::de::Error::custom("noise_time must be a real number")),
            serde_json::Value::String(s) if s == "uniform_grid" => Ok(NoiseTime::UniformGrid),
            _ => Err(serde::de::Error::custom(
                "noise_time must be a number or \"uniform_grid\"",
            )),
        }
    }
}

/// One distillation problem: which condition to generate, what the rater
/// should come to believe about it, and the seed population.
#[derive(Debug, Clone)]
pub struct DistillTask {
    pub cond: ConditionId,
    pub query: VqaQuery,
    pub n_seeds: usize,
    pub base_seed: u64,
    pub noise_time: NoiseTime,
}

impl DistillTask {
    pub fn validate(&self) -> Result<()> {
        if self.n_seeds == 0 {
            return Err(Error::invalid("n_seeds must be at least 1"));
        }
        self.noise_time.validate()
    }
}

/// Default seed population size.
pub const DEFAULT_N_SEEDS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimMethod {
    AdaptiveMoment,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimizerConfig {
    pub method: OptimMethod,
    pub learning_rate: f64,
    pub max_iters: usize,
    pub batch_seeds_per_step: usize,
    /// Stop once the step's mean answer probability reaches this value.
    pub early_stop_probability: f64,
    /// Optional global-norm clip over all adapter gradients.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            method: OptimMethod::AdaptiveMoment,
            learning_rate: 5e-5,
            max_iters: 100,
            batch_seeds_per_step: 8,
            early_stop_probability: 0.9,
            grad_clip: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if self.batch_seeds_per_step == 0 {
            return Err(Error::invalid("batch_seeds_per_step must be at least 1"));
        }
        if !(self.early_stop_probability > 0.0 && self.early_stop_probability <= 1.0) {
            return Err(Error::invalid("early_stop_probability outside (0, 1]"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::invalid("grad_clip must be positive"));
            }
        }
        Ok(())
    }
}

/// One line of the training trace.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub mean_vqa_loss: f64,
    pub mean_answer_probability: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct DistillTrace {
    pub records: Vec<TraceRecord>,
    pub early_stopped: bool,
}

impl DistillTrace {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).unwrap());
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Vec<TraceRecord>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }
}

/// Deterministic generation noise for one seed index of a task.
pub fn seed_noise<T: Real>(
    model: &PatchMixer<T>,
    base_seed: u64,
    seed_index: u64,
) -> ImageTensor<T> {
    Tensor::randn(
        model.config().image.dims(),
        &mut stream(base_seed, seed_index, STEP_GENERATION),
    )
}

/// Generate one image per seed index with no gradient state retained.
pub fn generate_base_images<T: Real>(
    model: &PatchMixer<T>,
    adapter: Option<&LoraAdapter<T>>,
    cond: ConditionId,
    base_seed: u64,
    seed_indices: &[u64],
) -> Result<Vec<ImageTensor<T>>> {
    let schedule = SamplingSchedule::single_step();
    seed_indices
        .iter()
        .map(|&i| {
            let eps = seed_noise(model, base_seed, i);
            model.sample(&schedule, &eps, cond.index(), adapter)
        })
        .collect()
}

/// One optimizer step over a mini-batch of base images. Each image is
/// re-noised with fresh per-iteration noise, denoised in exactly one
/// gradient-tracked model evaluation, scored through the overlay + rater
/// pipeline, and the mean loss is backpropagated into the adapter factors
/// only. The update is skipped when the batch already clears the early-stop
/// probability; the record still carries the measured gradient norm.
#[allow(clippy::too_many_arguments)]
pub fn distill_step<T: Real>(
    model: &PatchMixer<T>,
    adapter: &mut LoraAdapter<T>,
    disc: &dyn Discriminator<T>,
    adam: &mut Adam<T>,
    batch: &[(u64, ImageTensor<T>)],
    task: &DistillTask,
    t: f64,
    iter: usize,
    cfg: &OptimizerConfig,
) -> Result<TraceRecord> {
    if batch.is_empty() {
        return Err(Error::invalid("empty distillation batch"));
    }
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid(format!("noise time {} outside (0, 1]", t)));
    }
    let start = Instant::now();
    let mut g = Graph::new();
    let mut binder = LoraBinder::trainable(adapter);
    let mut disc_binder = PlainBinder::frozen();
    let mut losses = Vec::with_capacity(batch.len());
    let tt = T::from_f64(t);
    for (seed_index, image) in batch {
        let eps = Tensor::randn(
            model.config().image.dims(),
            &mut stream(task.base_seed, *seed_index, step_noise(iter)),
        );
        let z_t = interpolate(image, &eps, tt)?;
        let z_node = g.constant(z_t);
        let u = model.velocity(&mut g, z_node, tt, task.cond.index(), &mut binder)?;
        let x_hat = clean_estimate_node(&mut g, z_node, u, tt);
        let loss = vqa_loss_node(
            &mut g,
            disc,
            x_hat,
            &task.query,
            DEFAULT_PROB_FLOOR,
            &mut disc_binder,
        )?;
        losses.push(loss);
    }
    let mean_loss_node = g.mean_scalars(&losses);
    let mean_loss = g.value(mean_loss_node).item().to_f64x();
    let mean_prob = losses
        .iter()
        .map(|&l| (-g.value(l).item().to_f64x()).exp())
        .sum::<f64>()
        / losses.len() as f64;
    if !mean_loss.is_finite() {
        return Err(Error::non_finite(
            "distillation loss",
            format!("iteration {}", iter),
        ));
    }

    let grads = g.backward(mean_loss_node);
    let mut layer_grads = binder.collect_grads(&grads);
    let mut sq_norm = 0.0f64;
    for (ga, gb) in layer_grads.values() {
        sq_norm += ga.sq_sum().to_f64x() + gb.sq_sum().to_f64x();
    }
    let grad_norm = sq_norm.sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::non_finite(
            "distillation gradient",
            format!("iteration {}", iter),
        ));
    }
    if let Some(clip) = cfg.grad_clip {
        if grad_norm > clip {
            let s = T::from_f64(clip / grad_norm);
            for (ga, gb) in layer_grads.values_mut() {
                *ga = ga.scale(s);
                *gb = gb.scale(s);
            }
        }
    }

    // A step that reaches the stop threshold keeps the adapter untouched,
    // so the returned weights are exactly the state its record measured.
    if mean_prob < cfg.early_stop_probability {
        adam.begin_step();
        for (name, (ga, gb)) in &layer_grads {
            let layer = adapter
                .layer_mut(name)
                .ok_or_else(|| Error::adapter(format!("gradient for unknown layer '{}'", name)))?;
            adam.update(&format!("{}.A", name), &mut layer.a, ga)?;
            adam.update(&format!("{}.B", name), &mut layer.b, gb)?;
        }
    }

    Ok(TraceRecord {
        iter,
        mean_vqa_loss: mean_loss,
        mean_answer_probability: mean_prob,
        grad_norm,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Full distillation run. Seed mini-batches cycle; base images are
/// regenerated each step from the current adapted model; stops early once
/// the mean answer probability reaches the configured threshold.
///
/// `on_record` (when given) sees every trace record as it is produced, so
/// callers can stream the trace to disk and retain it even if a later step
/// aborts on a non-finite loss.
pub fn distill<T: Real>(
    task: &DistillTask,
    model: &PatchMixer<T>,
    mut adapter: LoraAdapter<T>,
    disc: &dyn Discriminator<T>,
    cfg: &OptimizerConfig,
    mut on_record: Option<&mut dyn FnMut(&TraceRecord)>,
) -> Result<(LoraAdapter<T>, DistillTrace)> {
    task.validate()?;
    cfg.validate()?;
    adapter.validate_against(model)?;
    let mut adam = Adam::<T>::new(AdamConfig::with_lr(cfg.learning_rate));
    let mut trace = DistillTrace::default();

    for iter in 0..cfg.max_iters {
        let idx: Vec<u64> = (0..cfg.batch_seeds_per_step)
            .map(|j| ((iter * cfg.batch_seeds_per_step + j) % task.n_seeds) as u64)
            .collect();
        let images = generate_base_images(model, Some(&adapter), task.cond, task.base_seed, &idx)?;
        let batch: Vec<(u64, ImageTensor<T>)> = idx.into_iter().zip(images).collect();
        let t = task.noise_time.at(task.base_seed, iter as u64);
        let record = distill_step(model, &mut adapter, disc, &mut adam, &batch, task, t, iter, cfg)?;
        if let Some(cb) = on_record.as_deref_mut() {
            cb(&record);
        }
        trace.records.push(record);
        if record.mean_answer_probability >= cfg.early_stop_probability {
            trace.early_stopped = true;
            break;
        }
    }
    Ok((adapter, trace))
}

/// Recomputes the scoring pass of one iteration without touching any state:
/// regenerate the cycled mini-batch with the given adapter, re-noise each
/// image to the iteration's time with the iteration's noise stream, denoise
/// once, and score the clean estimates through the overlay + rater pipeline.
/// Returns per-image answer probabilities; a `distill_step` run at the same
/// adapter state records exactly their mean.
pub fn score_batch<T: Real>(
    model: &PatchMixer<T>,
    adapter: Option<&LoraAdapter<T>>,
    disc: &dyn Discriminator<T>,
    task: &DistillTask,
    cfg: &OptimizerConfig,
    iter: usize,
) -> Result<Vec<f64>> {
    let idx: Vec<u64> = (0..cfg.batch_seeds_per_step)
        .map(|j| ((iter * cfg.batch_seeds_per_step + j) % task.n_seeds) as u64)
        .collect();
    let images = generate_base_images(model, adapter, task.cond, task.base_seed, &idx)?;
    let t = task.noise_time.at(task.base_seed, iter as u64);
    let tt = T::from_f64(t);
    idx.iter()
        .zip(&images)
        .map(|(&i, img)| {
            let eps = Tensor::randn(
                model.config().image.dims(),
                &mut stream(task.base_seed, i, step_noise(iter)),
            );
            let z_t = interpolate(img, &eps, tt)?;
            let u = model.velocity_plain(&z_t, tt, task.cond.index(), adapter)?;
            let x_hat = clean_estimate(&z_t, &u, tt)?;
            let loss = crate::vqa::vqa_loss(disc, &x_hat, &task.query)?;
            Ok((-loss.to_f64x()).exp())
        })
        .collect()
}

/// Mean answer probability of the task's query over freshly generated
/// images for the given seed indices.
pub fn score_seeds<T: Real>(
    model: &PatchMixer<T>,
    adapter: Option<&LoraAdapter<T>>,
    disc: &dyn Discriminator<T>,
    task: &DistillTask,
    seed_indices: &[u64],
) -> Result<Vec<f64>> {
    let images = generate_base_images(model, adapter, task.cond, task.base_seed, seed_indices)?;
    images
        .iter()
        .map(|img| {
            let loss = crate::vqa::vqa_loss(disc, img, &task.query)?;
            Ok((-loss.to_f64x()).exp())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GeneralizationReport {
    pub seed_indices: Vec<u64>,
    pub with_adapter: Vec<f64>,
    pub without_adapter: Vec<f64>,
    pub mean_with: f64,
    pub mean_without: f64,
}

/// Scores the adapted and base generators on seeds never used in training.
pub fn evaluate_generalization<T: Real>(
    adapter: &LoraAdapter<T>,
    model: &PatchMixer<T>,
    disc: &dyn Discriminator<T>,
    task: &DistillTask,
    unseen_seed_indices: &[u64],
) -> Result<GeneralizationReport> {
    if unseen_seed_indices.is_empty() {
        return Err(Error::invalid("no seeds to evaluate"));
    }
    for &i in unseen_seed_indices {
        if i < task.n_seeds as u64 {
            return Err(Error::invalid(format!(
                "seed index {} was part of the training population 0..{}",
                i, task.n_seeds
            )));
        }
    }
    let with_adapter = score_seeds(model, Some(adapter), disc, task, unseen_seed_indices)?;
    let without_adapter = score_seeds(model, None, disc, task, unseen_seed_indices)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(GeneralizationReport {
        seed_indices: unseen_seed_indices.to_vec(),
        mean_with: mean(&with_adapter),
        mean_without: mean(&without_adapter),
        with_adapter,
        without_adapter,
    })
}

// ---------------------------------------------------------------------------
// Run configuration document
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TaskSection {
    pub condition: ConditionId,
    pub question_template: String,
    pub question_params: serde_json::Value,
    pub answer: crate::vqa::Answer,
    pub overlay: Option<crate::overlay::OverlaySpec>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LoraSection {
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimizerSection {
    pub lr: f64,
    pub max_iters: usize,
    pub batch: usize,
    pub early_stop: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SeedSection {
    pub base_seed: u64,
    pub n: usize,
}

/// The portable run document: everything needed to reproduce one
/// distillation run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub task: TaskSection,
    pub lora: LoraSection,
    pub optimizer: OptimizerSection,
    pub seeds: SeedSection,
    pub noise_time: NoiseTime,
}

impl RunConfig {
    pub fn from_parts(
        cond: ConditionId,
        question: &crate::vqa::Question,
        answer: crate::vqa::Answer,
        overlay: Option<crate::overlay::OverlaySpec>,
        lora: &crate::lora::LoraConfig,
        opt: &OptimizerConfig,
        base_seed: u64,
        n_seeds: usize,
        noise_time: NoiseTime,
    ) -> Result<Self> {
        let qv = serde_json::to_value(question)?;
        Ok(RunConfig {
            task: TaskSection {
                condition: cond,
                question_template: qv["template"]
                    .as_str()
                    .ok_or_else(|| Error::invalid("question did not serialize to a template"))?
                    .to_string(),
                question_params: qv["params"].clone(),
                answer,
                overlay,
            },
            lora: LoraSection {
                rank: lora.rank,
                alpha: lora.alpha,
            },
            optimizer: OptimizerSection {
                lr: opt.learning_rate,
                max_iters: opt.max_iters,
                batch: opt.batch_seeds_per_step,
                early_stop: opt.early_stop_probability,
            },
            seeds: SeedSection {
                base_seed,
                n: n_seeds,
            },
            noise_time,
        })
    }

    pub fn question(&self) -> Result<crate::vqa::Question> {
        let v = serde_json::json!({
            "template": self.task.question_template,
            "params": self.task.question_params,
        });
        serde_json::from_value(v).map_err(Error::from)
    }

    pub fn to_task(&self) -> Result<DistillTask> {
        let question = self.question()?;
        let answer = crate::vqa::TokenSequence::new(vec![self.task.answer.token()])?;
        Ok(DistillTask {
            cond: self.task.condition,
            query: VqaQuery::new(question.tokenize()?, answer, self.task.overlay.clone()),
            n_seeds: self.seeds.n,
            base_seed: self.seeds.base_seed,
            noise_time: self.noise_time,
        })
    }

    pub fn to_optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            method: OptimMethod::AdaptiveMoment,
            learning_rate: self.optimizer.lr,
            max_iters: self.optimizer.max_iters,
            batch_seeds_per_step: self.optimizer.batch,
            early_stop_probability: self.optimizer.early_stop,
            grad_clip: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::PatchMixerConfig;
    use crate::lora::{init_adapter, LoraConfig, TargetSelector};
    use crate::tensor::ImageShape;
    use crate::vqa::{
        MockDiscriminator, Question, TokenSequence, NamedColor, TOK_YES,
    };
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> PatchMixer<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        PatchMixer::init(PatchMixerConfig::tiny(), &mut rng).unwrap()
    }

    fn tiny_adapter(model: &PatchMixer<f64>, rank: usize) -> LoraAdapter<f64> {
        let cfg = LoraConfig {
            rank,
            alpha: 5.0 * rank as f64,
            init_scale: 0.02,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        init_adapter(model, cfg, TargetSelector::All2d, &mut rng).unwrap()
    }

    fn toy_task(n_seeds: usize) -> DistillTask {
        DistillTask {
            cond: ConditionId::Landscape,
            query: VqaQuery {
                question: Question::AttributePresence {
                    color: NamedColor::Red,
                }
                .tokenize()
                .unwrap(),
                answer: TokenSequence::new(vec![TOK_YES]).unwrap(),
                overlay: None,
            },
            n_seeds,
            base_seed: 77,
            noise_time: NoiseTime::Fixed(1.0),
        }
    }

    fn shape8() -> ImageShape {
        ImageShape::new(8, 8)
    }

    #[test]
    fn base_generation_is_deterministic_and_diverse() {
        let model = tiny_model();
        let a = generate_base_images(&model, None, ConditionId::Landscape, 7, &[0, 1]).unwrap();
        let b = generate_base_images(&model, None, ConditionId::Landscape, 7, &[0, 1]).unwrap();
        assert_eq!(a[0].data(), b[0].data());
        assert_eq!(a[1].data(), b[1].data());
        assert!(a[0].max_abs_diff(&a[1]) > 0.0);
    }

    #[test]
    fn zero_init_adapter_generates_identically_to_base() {
        let model = tiny_model();
        let adapter = tiny_adapter(&model, 2);
        let base = generate_base_images(&model, None, ConditionId::Landscape, 7, &[0]).unwrap();
        let adapted =
            generate_base_images(&model, Some(&adapter), ConditionId::Landscape, 7, &[0]).unwrap();
        assert_eq!(base[0].data(), adapted[0].data());
    }

    #[test]
    fn noise_time_serializes_both_ways() {
        assert_eq!(serde_json::to_string(&NoiseTime::Fixed(1.0)).unwrap(), "1.0");
        assert_eq!(
            serde_json::to_string(&NoiseTime::UniformGrid).unwrap(),
            "\"uniform_grid\""
        );
        let f: NoiseTime = serde_json::from_str("0.5").unwrap();
        assert_eq!(f, NoiseTime::Fixed(0.5));
        let u: NoiseTime = serde_json::from_str("\"uniform_grid\"").unwrap();
        assert_eq!(u, NoiseTime::UniformGrid);
        assert!(serde_json::from_str::<NoiseTime>("\"sometimes\"").is_err());
        for i in 0..20 {
            let t = NoiseTime::UniformGrid.at(3, i);
            assert!(NOISE_TIME_GRID.contains(&t));
            assert_eq!(t, NoiseTime::UniformGrid.at(3, i));
        }
    }

    #[test]
    fn step_leaves_base_weights_untouched_and_moves_adapter() {
        let model = tiny_model();
        let before = model.params().clone();
        let mut adapter = tiny_adapter(&model, 2);
        let a_before = adapter.clone();
        let disc = MockDiscriminator::yes_no(shape8(), &[0.3]);
        let task = toy_task(4);
        let mut adam = Adam::new(AdamConfig::with_lr(1e-3));
        let images =
            generate_base_images(&model, Some(&adapter), task.cond, task.base_seed, &[0, 1])
                .unwrap();
        let batch: Vec<(u64, ImageTensor<f64>)> =
            vec![(0, images[0].clone()), (1, images[1].clone())];
        let cfg = OptimizerConfig::default();
        let rec = distill_step(
            &model,
            &mut adapter,
            &disc,
            &mut adam,
            &batch,
            &task,
            1.0,
            0,
            &cfg,
        )
        .unwrap();
        assert_eq!(model.params().max_abs_diff(&before), 0.0);
        assert!(rec.mean_vqa_loss.is_finite());
        // mock ignores pixels: gradient is exactly zero and the adapter
        // stays put, which is itself worth pinning
        assert_eq!(rec.grad_norm, 0.0);
        assert_eq!(
            adapter.max_abs_diff(&a_before).unwrap(),
            0.0
        );
    }

    #[test]
    fn at_time_one_noised_input_is_pure_noise() {
        let x0 = Tensor::<f64>::full(vec![3, 8, 8], 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let eps = Tensor::<f64>::randn(vec![3, 8, 8], &mut rng);
        let z = interpolate(&x0, &eps, 1.0).unwrap();
        assert_eq!(z.data(), eps.data());
    }

    #[test]
    fn exactly_one_tracked_eval_per_image_per_step() {
        let model = tiny_model();
        let mut adapter = tiny_adapter(&model, 2);
        let disc = MockDiscriminator::yes_no(shape8(), &[0.5]);
        let task = toy_task(4);
        let mut adam = Adam::new(AdamConfig::with_lr(1e-3));
        let images =
            generate_base_images(&model, Some(&adapter), task.cond, task.base_seed, &[0, 1, 2])
                .unwrap();
        let batch: Vec<(u64, ImageTensor<f64>)> =
            images.into_iter().enumerate().map(|(i, im)| (i as u64, im)).collect();
        model.reset_call_count();
        let cfg = OptimizerConfig::default();
        distill_step(
            &model,
            &mut adapter,
            &disc,
            &mut adam,
            &batch,
            &task,
            1.0,
            0,
            &cfg,
        )
        .unwrap();
        assert_eq!(model.grad_call_count(), 3);
    }

    #[test]
    fn trace_fields_are_monotonic_and_reproducible() {
        let model = tiny_model();
        let adapter = tiny_adapter(&model, 2);
        let disc = MockDiscriminator::yes_no(shape8(), &[0.4]);
        let task = toy_task(5);
        let cfg = OptimizerConfig {
            max_iters: 4,
            batch_seeds_per_step: 2,
            early_stop_probability: 0.99,
            ..OptimizerConfig::default()
        };
        let mut seen = Vec::new();
        let mut cb = |r: &TraceRecord| seen.push(r.iter);
        let (a1, t1) = distill(&task, &model, adapter.clone(), &disc, &cfg, Some(&mut cb)).unwrap();
        let (a2, t2) = distill(&task, &model, adapter, &disc, &cfg, None).unwrap();
        assert_eq!(t1.records.len(), 4);
        assert_eq!(seen, vec![0, 1, 2, 3]);
        for w in t1.records.windows(2) {
            assert!(w[1].iter > w[0].iter);
        }
        for r in &t1.records {
            assert!(r.wall_ms >= 0.0);
        }
        // bit-identical adapters across reruns
        assert_eq!(a1.max_abs_diff(&a2).unwrap(), 0.0);
        assert_eq!(t1.records.len(), t2.records.len());
        let jsonl = t1.to_jsonl();
        let back = DistillTrace::from_jsonl(&jsonl).unwrap();
        assert_eq!(back, t1.records);
    }

    #[test]
    fn early_stop_respects_threshold() {
        let model = tiny_model();
        let adapter = tiny_adapter(&model, 2);
        // mock at P(Yes)=0.95: the very first step should satisfy a 0.9 stop
        let disc = MockDiscriminator::yes_no(shape8(), &[0.95]);
        let task = toy_task(4);
        let cfg = OptimizerConfig {
            max_iters: 50,
            batch_seeds_per_step: 2,
            early_stop_probability: 0.9,
            ..OptimizerConfig::default()
        };
        let (_, trace) = distill(&task, &model, adapter, &disc, &cfg, None).unwrap();
        assert!(trace.early_stopped);
        assert_eq!(trace.records.len(), 1);
        assert!(trace.records.last().unwrap().mean_answer_probability >= 0.9);
    }

    #[test]
    fn generalization_rejects_training_seeds_and_is_deterministic() {
        let model = tiny_model();
        let adapter = tiny_adapter(&model, 2);
        let disc = MockDiscriminator::yes_no(shape8(), &[0.5]);
        let task = toy_task(4);
        assert!(evaluate_generalization(&adapter, &model, &disc, &task, &[2]).is_err());
        let r1 = evaluate_generalization(&adapter, &model, &disc, &task, &[10, 11]).unwrap();
        let r2 = evaluate_generalization(&adapter, &model, &disc, &task, &[10, 11]).unwrap();
        assert_eq!(r1, r2);
        // zero-init adapter scores identically with and without
        assert_eq!(r1.with_adapter, r1.without_adapter);
    }

    #[test]
    fn adapter_gradient_matches_finite_differences() {
        // real pixel-sensitive discriminator so gradients flow to the adapter
        let model = tiny_model();
        let mut adapter = tiny_adapter(&model, 2);
        // pull one adapter A off zero so both factors carry gradient
        {
            let layer = adapter.layer_mut("out.w").unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(23);
            layer.b = Tensor::randn_scaled(layer.b.shape().to_vec(), 0.05, &mut rng);
        }
        let disc = crate::vqa::ToyDiscriminator::<f64>::init(
            crate::vqa::ToyDiscConfig::tiny(),
            &mut ChaCha8Rng::seed_from_u64(31),
        )
        .unwrap();
        let task = toy_task(2);
        let images =
            generate_base_images(&model, Some(&adapter), task.cond, task.base_seed, &[0]).unwrap();
        let batch = vec![(0u64, images[0].clone())];
        let t = 0.75;

        // analytic gradient from one un-stepped pass
        let mut g = Graph::new();
        let mut binder = LoraBinder::trainable(&adapter);
        let mut disc_binder = PlainBinder::frozen();
        let eps = Tensor::randn(
            model.config().image.dims(),
            &mut stream(task.base_seed, 0, step_noise(0)),
        );
        let z_t = interpolate(&batch[0].1, &eps, t).unwrap();
        let zn = g.constant(z_t);
        let u = model
            .velocity(&mut g, zn, t, task.cond.index(), &mut binder)
            .unwrap();
        let xh = clean_estimate_node(&mut g, zn, u, t);
        let loss = vqa_loss_node(&mut g, &disc, xh, &task.query, DEFAULT_PROB_FLOOR, &mut disc_binder)
            .unwrap();
        let grads = g.backward(loss);
        let lg = binder.collect_grads(&grads);
        let (ga, gb) = &lg["out.w"];

        let loss_with = |ad: &LoraAdapter<f64>| -> f64 {
            let mut g2 = Graph::new();
            let mut b2 = LoraBinder::frozen(ad);
            let mut d2 = PlainBinder::frozen();
            let zn2 = g2.constant(interpolate(&batch[0].1, &eps, t).unwrap());
            let u2 = model
                .velocity(&mut g2, zn2, t, task.cond.index(), &mut b2)
                .unwrap();
            let xh2 = clean_estimate_node(&mut g2, zn2, u2, t);
            let l2 = vqa_loss_node(&mut g2, &disc, xh2, &task.query, DEFAULT_PROB_FLOOR, &mut d2)
                .unwrap();
            g2.value(l2).item()
        };

        let h = 1e-5;
        let mut checked = 0;
        for (mat, analytic) in [("A", ga), ("B", gb)] {
            for &i in &[0usize, 1, 3] {
                let mut plus = adapter.clone();
                let mut minus = adapter.clone();
                {
                    let lp = plus.layer_mut("out.w").unwrap();
                    let lm = minus.layer_mut("out.w").unwrap();
                    if mat == "A" {
                        lp.a.data_mut()[i] += h;
                        lm.a.data_mut()[i] -= h;
                    } else {
                        lp.b.data_mut()[i] += h;
                        lm.b.data_mut()[i] -= h;
                    }
                }
                let num = (loss_with(&plus) - loss_with(&minus)) / (2.0 * h);
                let ana = analytic.data()[i];
                let denom = num.abs().max(ana.abs()).max(1e-7);
                assert!(
                    (num - ana).abs() / denom < 1e-4,
                    "{}[{}]: numeric {} vs analytic {}",
                    mat,
                    i,
                    num,
                    ana
                );
                checked += 1;
            }
        }
        assert_eq!(checked, 6);
    }

    #[test]
    fn run_config_round_trips() {
        let q = Question::LineAlignment { row_frac: 0.5 };
        let cfg = RunConfig::from_parts(
            ConditionId::Landscape,
            &q,
            crate::vqa::Answer::Yes,
            None,
            &LoraConfig::default(),
            &OptimizerConfig::default(),
            42,
            100,
            NoiseTime::default(),
        )
        .unwrap();
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains("\"question_template\":\"line_alignment\""));
        let back: RunConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.question().unwrap(), q);
        let task = back.to_task().unwrap();
        assert_eq!(task.n_seeds, 100);
        assert_eq!(task.query.question, q.tokenize().unwrap());
        let opt = back.to_optimizer();
        assert_eq!(opt.learning_rate, 5e-5);
        assert_eq!(opt.max_iters, 100);
        assert_eq!(opt.batch_seeds_per_step, 8);
    }
}
