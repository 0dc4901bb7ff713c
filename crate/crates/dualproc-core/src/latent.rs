//! Baseline that spends its gradient budget on the initial noise instead of
//! the weights: same generator, same rater loss, but the only trainable
//! object is one latent. Includes the cost/amortization instrumentation for
//! comparing the two approaches.

use crate::distill::{DistillTask, OptimizerConfig, TraceRecord};
use crate::error::{Error, Result};
use crate::flow::{clean_estimate_node, PatchMixer, SamplingSchedule};
use crate::graph::Graph;
use crate::lora::{merged_model, LoraAdapter, LoraBinder, PlainBinder};
use crate::optim::{Adam, AdamConfig};
use crate::real::Real;
use crate::tensor::{ImageTensor, Tensor};
use crate::vqa::{vqa_loss_node, Discriminator, VqaQuery, DEFAULT_PROB_FLOOR};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LatentOptConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    pub early_stop_probability: f64,
    /// Re-standardize the latent to zero mean, unit variance after each
    /// step. Off by default.
    pub renorm: bool,
}

impl Default for LatentOptConfig {
    // Mirrors the weight-path optimizer defaults; the latent path has no
    // separately documented settings.
    fn default() -> Self {
        LatentOptConfig {
            learning_rate: 5e-5,
            max_iters: 100,
            early_stop_probability: 0.9,
            renorm: false,
        }
    }
}

impl LatentOptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning_rate must be nonnegative"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if !(self.early_stop_probability > 0.0 && self.early_stop_probability <= 1.0) {
            return Err(Error::invalid("early_stop_probability outside (0, 1]"));
        }
        Ok(())
    }
}

fn standardize<T: Real>(z: &Tensor<T>) -> Tensor<T> {
    let n = z.numel() as f64;
    let mean = z.data().iter().map(|v| v.to_f64x()).sum::<f64>() / n;
    let var = z
        .data()
        .iter()
        .map(|v| {
            let d = v.to_f64x() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt().max(1e-12);
    z.map(|v| T::from_f64((v.to_f64x() - mean) / std))
}

/// Single-step generation from an explicit latent, shared by the optimizer
/// and by scoring so both see the same pixels.
pub fn generate_from_latent<T: Real>(
    model: &PatchMixer<T>,
    z: &ImageTensor<T>,
    cond: usize,
) -> Result<ImageTensor<T>> {
    model.sample(&SamplingSchedule::single_step(), z, cond, None)
}

/// Gradient steps on the latent only; weights are bound frozen and never
/// change. The loss pipeline (one denoise, clean estimate, overlay, rater
/// loss) is identical to the weight path.
pub fn optimize_latent<T: Real>(
    z_init: &ImageTensor<T>,
    model: &PatchMixer<T>,
    disc: &dyn Discriminator<T>,
    query: &VqaQuery,
    cond: usize,
    cfg: &LatentOptConfig,
) -> Result<(ImageTensor<T>, Vec<TraceRecord>)> {
    cfg.validate()?;
    if z_init.shape() != model.config().image.dims().as_slice() {
        return Err(Error::shape(format!(
            "latent shape {:?}, model wants {:?}",
            z_init.shape(),
            model.config().image.dims()
        )));
    }
    let mut z = z_init.clone();
    let mut adam = Adam::<T>::new(AdamConfig::with_lr(cfg.learning_rate));
    let mut trace = Vec::new();
    let one = T::one();

    for iter in 0..cfg.max_iters {
        let start = Instant::now();
        let mut g = Graph::new();
        let z_node = g.leaf(z.clone(), true);
        let mut binder = PlainBinder::frozen();
        let mut disc_binder = PlainBinder::frozen();
        let u = model.velocity(&mut g, z_node, one, cond, &mut binder)?;
        let x_hat = clean_estimate_node(&mut g, z_node, u, one);
        let loss_node = vqa_loss_node(
            &mut g,
            disc,
            x_hat,
            query,
            DEFAULT_PROB_FLOOR,
            &mut disc_binder,
        )?;
        let loss = g.value(loss_node).item().to_f64x();
        if !loss.is_finite() {
            return Err(Error::non_finite(
                "latent optimization loss",
                format!("iteration {}", iter),
            ));
        }
        let grads = g.backward(loss_node);
        // a loss constant in z (possible with degenerate raters) has zero grad
        let zero_grad;
        let gz = match grads.get(z_node) {
            Some(g) => g,
            None => {
                zero_grad = Tensor::zeros(z.shape().to_vec());
                &zero_grad
            }
        };
        let grad_norm = gz.sq_sum().to_f64x().sqrt();

        adam.begin_step();
        adam.update("z", &mut z, gz)?;
        if cfg.renorm {
            z = standardize(&z);
        }

        let record = TraceRecord {
            iter,
            mean_vqa_loss: loss,
            mean_answer_probability: (-loss).exp(),
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        trace.push(record);
        if record.mean_answer_probability >= cfg.early_stop_probability {
            break;
        }
    }
    Ok((z, trace))
}

// ---------------------------------------------------------------------------
// Cost instrumentation
// ---------------------------------------------------------------------------

/// Peak resident set size of this process in bytes, from the kernel's
/// accounting when available. Monotone over the process lifetime, so only
/// deltas between phases are attributable to a phase.
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    for line in status.lines() {
        if let Some(rest) = line.strip_prefix("VmHWM:") {
            let kb: u64 = rest.trim().trim_end_matches("kB").trim().parse().ok()?;
            return Some(kb * 1024);
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MethodCost {
    pub optimize_wall_ms: f64,
    pub inference_wall_ms: f64,
    /// Kernel-reported peak RSS after the phase, when the platform exposes
    /// it. Process-wide and monotone; comparable only as deltas.
    pub peak_rss_bytes: Option<u64>,
    /// Analytic memory proxy: number of optimized scalars.
    pub trainable_params: usize,
    /// Analytic proxy for activation storage: nodes in one forward graph.
    pub graph_nodes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CostReport {
    pub latent: MethodCost,
    pub weights: MethodCost,
    /// Latent re-optimization time divided by merged-adapter inference
    /// time: how many adapter inferences one fresh latent search buys.
    pub amortization_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ComparisonReport {
    pub latent_final_probability: f64,
    pub weights_final_probability: f64,
    pub latent_iters: usize,
    pub weights_iters: usize,
    pub cost: CostReport,
}

impl ComparisonReport {
    /// Aligned text table with one row per cost dimension.
    pub fn text_table(&self) -> String {
        let mem = |m: &MethodCost| match m.peak_rss_bytes {
            Some(b) => format!("{:.1} MiB", b as f64 / (1024.0 * 1024.0)),
            None => "n/a".to_string(),
        };
        let mut out = String::new();
        out.push_str(&format!(
            "{:<26} {:>14} {:>14}\n",
            "quantity", "latent", "weights"
        ));
        out.push_str(&format!(
            "{:<26} {:>14.1} {:>14.1}\n",
            "optimization time (ms)", self.cost.latent.optimize_wall_ms, self.cost.weights.optimize_wall_ms
        ));
        out.push_str(&format!(
            "{:<26} {:>14.3} {:>14.3}\n",
            "inference time (ms)", self.cost.latent.inference_wall_ms, self.cost.weights.inference_wall_ms
        ));
        out.push_str(&format!(
            "{:<26} {:>14} {:>14}\n",
            "peak RSS", mem(&self.cost.latent), mem(&self.cost.weights)
        ));
        out.push_str(&format!(
            "{:<26} {:>14} {:>14}\n",
            "trainable params", self.cost.latent.trainable_params, self.cost.weights.trainable_params
        ));
        out.push_str(&format!(
            "{:<26} {:>14} {:>14}\n",
            "graph nodes", self.cost.latent.graph_nodes, self.cost.weights.graph_nodes
        ));
        out.push_str(&format!(
            "{:<26} {:>14.1} {:>14}\n",
            "final answer probability",
            self.latent_final_probability,
            format!("{:.1}", self.weights_final_probability)
        ));
        out.push_str(&format!(
            "amortization ratio (latent re-opt / adapter inference): {:.1}\n",
            self.cost.amortization_ratio
        ));
        out
    }
}

/// Nodes allocated by one gradient-tracked forward + loss graph, as an
/// activation-memory proxy.
fn count_graph_nodes<T: Real>(
    model: &PatchMixer<T>,
    disc: &dyn Discriminator<T>,
    query: &VqaQuery,
    cond: usize,
    z: &ImageTensor<T>,
    adapter: Option<&LoraAdapter<T>>,
) -> Result<usize> {
    let mut g = Graph::new();
    let z_node = g.leaf(z.clone(), true);
    let mut disc_binder = PlainBinder::frozen();
    let one = T::one();
    let u = match adapter {
        Some(a) => {
            let mut binder = LoraBinder::trainable(a);
            model.velocity(&mut g, z_node, one, cond, &mut binder)?
        }
        None => {
            let mut binder = PlainBinder::frozen();
            model.velocity(&mut g, z_node, one, cond, &mut binder)?
        }
    };
    let x_hat = clean_estimate_node(&mut g, z_node, u, one);
    vqa_loss_node(&mut g, disc, x_hat, query, DEFAULT_PROB_FLOOR, &mut disc_binder)?;
    Ok(g.len())
}

/// Runs both optimization modes on the identical single seed and reports
/// parity and costs. The weight path trains on exactly one seed so the two
/// methods answer the same question: "make THIS generation satisfy the
/// rater".
pub fn compare_latent_vs_weights<T: Real>(
    task: &DistillTask,
    model: &PatchMixer<T>,
    adapter: LoraAdapter<T>,
    disc: &dyn Discriminator<T>,
    latent_cfg: &LatentOptConfig,
    weight_cfg: &OptimizerConfig,
) -> Result<ComparisonReport> {
    let single_seed_task = DistillTask {
        n_seeds: 1,
        ..task.clone()
    };
    let z_init = crate::distill::seed_noise(model, task.base_seed, 0);
    let cond = task.cond.index();

    // latent phase
    let t0 = Instant::now();
    let (z_star, latent_trace) =
        optimize_latent(&z_init, model, disc, &task.query, cond, latent_cfg)?;
    let latent_opt_ms = t0.elapsed().as_secs_f64() * 1e3;
    let t1 = Instant::now();
    let latent_image = generate_from_latent(model, &z_star, cond)?;
    let latent_inf_ms = t1.elapsed().as_secs_f64() * 1e3;
    let latent_prob = (-crate::vqa::vqa_loss(disc, &latent_image, &task.query)?.to_f64x()).exp();
    let latent_rss = peak_rss_bytes();
    let latent_nodes = count_graph_nodes(model, disc, &task.query, cond, &z_init, None)?;

    // weight phase
    let t2 = Instant::now();
    let (trained, weight_trace) = crate::distill::distill(
        &single_seed_task,
        model,
        adapter,
        disc,
        weight_cfg,
        None,
    )?;
    let weight_opt_ms = t2.elapsed().as_secs_f64() * 1e3;
    let merged = merged_model(model, &trained)?;
    let t3 = Instant::now();
    let weight_image = merged.sample(
        &SamplingSchedule::single_step(),
        &z_init,
        cond,
        None,
    )?;
    let weight_inf_ms = t3.elapsed().as_secs_f64() * 1e3;
    let weight_prob = (-crate::vqa::vqa_loss(disc, &weight_image, &task.query)?.to_f64x()).exp();
    let weight_rss = peak_rss_bytes();
    let weight_nodes =
        count_graph_nodes(model, disc, &task.query, cond, &z_init, Some(&trained))?;

    let amortization = if weight_inf_ms > 0.0 {
        latent_opt_ms / weight_inf_ms
    } else {
        f64::INFINITY
    };
    Ok(ComparisonReport {
        latent_final_probability: latent_prob,
        weights_final_probability: weight_prob,
        latent_iters: latent_trace.len(),
        weights_iters: weight_trace.records.len(),
        cost: CostReport {
            latent: MethodCost {
                optimize_wall_ms: latent_opt_ms,
                inference_wall_ms: latent_inf_ms,
                peak_rss_bytes: latent_rss,
                trainable_params: z_init.numel(),
                graph_nodes: latent_nodes,
            },
            weights: MethodCost {
                optimize_wall_ms: weight_opt_ms,
                inference_wall_ms: weight_inf_ms,
                peak_rss_bytes: weight_rss,
                trainable_params: trained.total_elements(),
                graph_nodes: weight_nodes,
            },
            amortization_ratio: amortization,
        },
    })
}
