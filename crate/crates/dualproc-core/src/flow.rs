//! Rectified-flow generation: straight-path interpolation, the velocity
//! matching loss, Euler sampling over a time schedule, the patch-mixing
//! velocity model, and pretraining (velocity matching plus a rectification
//! phase that re-straightens the learned transport for one-step sampling).
//!
//! Time convention: `t = 0` is clean data, `t = 1` is pure noise.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::lora::{LoraAdapter, LoraBinder, PlainBinder, WeightBinder};
use crate::optim::{Adam, AdamConfig};
use crate::real::Real;
use crate::rng::{mix64, stream, STEP_GENERATION};
use crate::tensor::{ImageShape, ImageTensor, ParamSet, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

/// Straight-path point `z_t = (1 - t) * x0 + t * eps`.
///
/// `t = 0` and `t = 1` return the exact input tensor, so endpoint recovery
/// holds at the bit level even for signed zeros.
pub fn interpolate<T: Real>(x0: &Tensor<T>, eps: &Tensor<T>, t: T) -> Result<Tensor<T>> {
    if !x0.same_shape(eps) {
        return Err(Error::shape(format!(
            "interpolate: {:?} vs {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    if t == T::zero() {
        return Ok(x0.clone());
    }
    if t == T::one() {
        return Ok(eps.clone());
    }
    let omt = T::one() - t;
    x0.zip(eps, |a, b| omt * a + t * b)
}

/// Velocity target of the straight path, `u = eps - x0`. Constant in `t`.
pub fn velocity_target<T: Real>(x0: &Tensor<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
    eps.sub(x0)
}

/// Velocity-matching loss `|u_hat - u|^2`, summed over every entry.
pub fn cfm_loss<T: Real>(u_hat: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if !u_hat.same_shape(target) {
        return Err(Error::shape(format!(
            "cfm_loss: {:?} vs {:?}",
            u_hat.shape(),
            target.shape()
        )));
    }
    Ok(u_hat.sub(target)?.sq_sum())
}

/// Graph form of [`cfm_loss`]; returns a scalar node.
pub fn cfm_loss_node<T: Real>(g: &mut Graph<T>, u_hat: NodeId, target: NodeId) -> NodeId {
    let d = g.sub(u_hat, target);
    g.sq_sum(d)
}

/// One Euler step of the reverse process: `z_{t'} = z_t + u_hat * (t' - t)`.
pub fn sample_step<T: Real>(
    z: &Tensor<T>,
    u_hat: &Tensor<T>,
    t: T,
    t_next: T,
) -> Result<Tensor<T>> {
    z.add_scaled(u_hat, t_next - t)
}

/// Clean-image estimate from a noisy point: `x0_hat = z_t - u_hat * t`.
pub fn clean_estimate<T: Real>(z: &Tensor<T>, u_hat: &Tensor<T>, t: T) -> Result<Tensor<T>> {
    z.add_scaled(u_hat, -t)
}

/// Graph form of [`clean_estimate`]; differentiable through both inputs.
pub fn clean_estimate_node<T: Real>(g: &mut Graph<T>, z: NodeId, u_hat: NodeId, t: T) -> NodeId {
    g.add_scaled(z, u_hat, -t)
}

/// A strictly decreasing time grid from 1 to 0 for Euler sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingSchedule {
    times: Vec<f64>,
}

impl SamplingSchedule {
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::invalid("schedule needs at least two times"));
        }
        if times[0] != 1.0 || *times.last().unwrap() != 0.0 {
            return Err(Error::invalid(format!(
                "schedule must run from 1 to 0, got {} .. {}",
                times[0],
                times.last().unwrap()
            )));
        }
        for w in times.windows(2) {
            if !(w[1] < w[0]) || !w[1].is_finite() {
                return Err(Error::invalid(format!(
                    "schedule times must strictly decrease, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(SamplingSchedule { times })
    }

    /// `n` equal Euler steps: `1, (n-1)/n, ..., 1/n, 0`.
    pub fn uniform(n: usize) -> Self {
        assert!(n >= 1, "schedule needs at least one step");
        let times = (0..=n).map(|i| (n - i) as f64 / n as f64).collect();
        SamplingSchedule { times }
    }

    /// The single jump `1 -> 0` used by a distilled one-step generator.
    pub fn single_step() -> Self {
        Self::uniform(1)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }
}

/// Euler-integrate the reverse process from pure noise using a caller-chosen
/// velocity evaluator. The evaluator sees the current state and time.
pub fn sample_with<T: Real>(
    schedule: &SamplingSchedule,
    eps: &Tensor<T>,
    mut velocity: impl FnMut(&Tensor<T>, T) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    let mut z = eps.clone();
    for w in schedule.times().windows(2) {
        let t = T::from_f64(w[0]);
        let t_next = T::from_f64(w[1]);
        let u = velocity(&z, t)?;
        z = sample_step(&z, &u, t, t_next)?;
    }
    Ok(z)
}

/// Configuration of the patch-mixing velocity model.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PatchMixerConfig {
    pub image: ImageShape,
    pub patch: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    /// Number of Fourier time features; must be even.
    pub time_feats: usize,
    /// Number of condition labels the model can be asked to generate.
    pub n_cond: usize,
}

impl Default for PatchMixerConfig {
    fn default() -> Self {
        PatchMixerConfig {
            image: ImageShape::new(32, 32),
            patch: 4,
            d_model: 64,
            n_blocks: 2,
            time_feats: 16,
            n_cond: 4,
        }
    }
}

impl PatchMixerConfig {
    /// A deliberately tiny variant (under 1k parameters) for gradient
    /// verification against finite differences.
    pub fn tiny() -> Self {
        PatchMixerConfig {
            image: ImageShape::new(8, 8),
            patch: 4,
            d_model: 8,
            n_blocks: 1,
            time_feats: 4,
            n_cond: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.channels != 3 {
            return Err(Error::invalid("images must have 3 channels"));
        }
        if self.patch == 0
            || self.image.height % self.patch != 0
            || self.image.width % self.patch != 0
        {
            return Err(Error::invalid(format!(
                "patch {} must evenly divide {}x{}",
                self.patch, self.image.height, self.image.width
            )));
        }
        if self.time_feats < 2 || self.time_feats % 2 != 0 {
            return Err(Error::invalid("time_feats must be even and >= 2"));
        }
        if self.d_model == 0 || self.n_blocks == 0 || self.n_cond == 0 {
            return Err(Error::invalid("d_model, n_blocks, n_cond must be positive"));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.image.height / self.patch) * (self.image.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.image.channels * self.patch * self.patch
    }
}

/// Velocity model: patchify, embed, then mixer blocks whose residual stream
/// is gated and shifted by learned functions of the time features, so the
/// overall input-to-output gain can vary with `t`. Finally project back to
/// patches and reassemble the image.
pub struct PatchMixer<T: Real> {
    cfg: PatchMixerConfig,
    params: ParamSet<T>,
    patch_idx: Rc<Vec<usize>>,
    unpatch_idx: Rc<Vec<usize>>,
    calls: AtomicU64,
    grad_calls: AtomicU64,
}

fn patch_index_maps(cfg: &PatchMixerConfig) -> (Vec<usize>, Vec<usize>) {
    let (h, w, p) = (cfg.image.height, cfg.image.width, cfg.patch);
    let cols = w / p;
    let pd = cfg.patch_dim();
    let mut patch_idx = Vec::with_capacity(cfg.n_patches() * pd);
    for q in 0..cfg.n_patches() {
        let (py, px) = (q / cols, q % cols);
        for c in 0..cfg.image.channels {
            for dy in 0..p {
                for dx in 0..p {
                    patch_idx.push(cfg.image.index(c, py * p + dy, px * p + dx));
                }
            }
        }
    }
    // patchify is a permutation, so unpatchify is its inverse
    let mut unpatch_idx = vec![0usize; h * w * cfg.image.channels];
    for (flat_out, &src) in patch_idx.iter().enumerate() {
        unpatch_idx[src] = flat_out;
    }
    (patch_idx, unpatch_idx)
}

impl<T: Real> PatchMixer<T> {
    pub fn init(cfg: PatchMixerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let (p_dim, d) = (cfg.patch_dim(), cfg.d_model);
        let np = cfg.n_patches();
        let mut params = ParamSet::new();
        let std_in = T::from_f64(1.0 / (p_dim as f64).sqrt());
        params.insert("patch_embed.w", Tensor::randn_scaled(vec![p_dim, d], std_in, rng));
        params.insert("patch_embed.b", Tensor::zeros(vec![d]));
        params.insert(
            "cond_embed",
            Tensor::randn_scaled(vec![cfg.n_cond, d], T::from_f64(0.02), rng),
        );
        for b in 0..cfg.n_blocks {
            let std_tok = T::from_f64(1.0 / (np as f64).sqrt());
            let std_ch = T::from_f64(1.0 / (d as f64).sqrt());
            // Small film weights start the gates near identity.
            params.insert(
                format!("block{}.film_scale.w", b),
                Tensor::randn_scaled(vec![cfg.time_feats, d], T::from_f64(0.02), rng),
            );
            params.insert(
                format!("block{}.film_shift.w", b),
                Tensor::randn_scaled(vec![cfg.time_feats, d], T::from_f64(0.02), rng),
            );
            params.insert(
                format!("block{}.token_mix.w", b),
                Tensor::randn_scaled(vec![np, np], std_tok, rng),
            );
            params.insert(
                format!("block{}.channel_mix.w", b),
                Tensor::randn_scaled(vec![d, d], std_ch, rng),
            );
            params.insert(format!("block{}.channel_mix.b", b), Tensor::zeros(vec![d]));
        }
        params.insert(
            "out.w",
            Tensor::randn_scaled(vec![d, p_dim], T::from_f64(1.0 / (d as f64).sqrt()), rng),
        );
        params.insert("out.b", Tensor::zeros(vec![p_dim]));
        // Zero-init skip gain: the identity component of the velocity field
        // carries a 1/t gain the trunk would otherwise have to learn through
        // the embed/unembed pair.
        params.insert("skip_gain.w", Tensor::zeros(vec![cfg.time_feats, p_dim]));
        let (pi, ui) = patch_index_maps(&cfg);
        Ok(PatchMixer {
            cfg,
            params,
            patch_idx: Rc::new(pi),
            unpatch_idx: Rc::new(ui),
            calls: AtomicU64::new(0),
            grad_calls: AtomicU64::new(0),
        })
    }

    pub fn from_params(cfg: PatchMixerConfig, params: ParamSet<T>) -> Result<Self> {
        cfg.validate()?;
        let (pi, ui) = patch_index_maps(&cfg);
        Ok(PatchMixer {
            cfg,
            params,
            patch_idx: Rc::new(pi),
            unpatch_idx: Rc::new(ui),
            calls: AtomicU64::new(0),
            grad_calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &PatchMixerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Number of velocity evaluations since construction or the last reset.
    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    /// Velocity evaluations that entered a gradient-tracked graph.
    pub fn grad_call_count(&self) -> u64 {
        self.grad_calls.load(Ordering::Relaxed)
    }

    pub fn reset_call_count(&self) {
        self.calls.store(0, Ordering::Relaxed);
        self.grad_calls.store(0, Ordering::Relaxed);
    }

    pub fn save(&self, path: &std::path::Path, mode: crate::ckpt::PayloadMode) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "patch_mixer",
            "config": self.cfg,
        });
        crate::ckpt::save_checkpoint(path, &meta, &self.params, mode)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (meta, params) = crate::ckpt::load_checkpoint::<T>(path)?;
        if meta["kind"] != "patch_mixer" {
            return Err(Error::checkpoint(format!(
                "expected a generator checkpoint, found kind {}",
                meta["kind"]
            )));
        }
        let cfg: PatchMixerConfig = serde_json::from_value(meta["config"].clone())?;
        Self::from_params(cfg, params)
    }

    pub fn cast<U: Real>(&self) -> PatchMixer<U> {
        PatchMixer {
            cfg: self.cfg,
            params: self.params.cast::<U>(),
            patch_idx: self.patch_idx.clone(),
            unpatch_idx: self.unpatch_idx.clone(),
            calls: AtomicU64::new(0),
            grad_calls: AtomicU64::new(0),
        }
    }

    fn fourier_features(&self, t: T) -> Tensor<T> {
        let f = self.cfg.time_feats;
        let two_pi = T::from_f64(std::f64::consts::TAU);
        let mut data = Vec::with_capacity(f);
        for j in 0..f / 2 {
            let freq = T::from_f64((1u64 << j) as f64);
            let angle = two_pi * freq * t;
            data.push(angle.sin());
            data.push(angle.cos());
        }
        Tensor::new(vec![1, f], data).unwrap()
    }

    /// Predicted velocity at `(z, t)` under condition label `cond`.
    /// Parameters enter the graph through `binder`, which decides whether
    /// they are trainable, frozen, or wrapped by a low-rank adapter.
    pub fn velocity(
        &self,
        g: &mut Graph<T>,
        z: NodeId,
        t: T,
        cond: usize,
        binder: &mut dyn WeightBinder<T>,
    ) -> Result<NodeId> {
        if g.value(z).shape() != self.cfg.image.dims().as_slice() {
            return Err(Error::shape(format!(
                "velocity input {:?}, model wants {:?}",
                g.value(z).shape(),
                self.cfg.image.dims()
            )));
        }
        if cond >= self.cfg.n_cond {
            return Err(Error::invalid(format!(
                "condition {} out of range ({} known)",
                cond, self.cfg.n_cond
            )));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        if binder.tracks_gradients() {
            self.grad_calls.fetch_add(1, Ordering::Relaxed);
        }
        let (np, pd) = (self.cfg.n_patches(), self.cfg.patch_dim());

        let x = g.index_map(z, self.patch_idx.clone(), vec![np, pd]);
        let we = binder.bind(g, "patch_embed.w", self.params.get("patch_embed.w")?);
        let be = binder.bind(g, "patch_embed.b", self.params.get("patch_embed.b")?);
        let mut h = g.matmul(x, we);
        h = g.add_row(h, be);

        let ce = binder.bind(g, "cond_embed", self.params.get("cond_embed")?);
        let crow = g.select_rows(ce, Rc::new(vec![cond]));
        h = g.add_row(h, crow);

        let tau = g.constant(self.fourier_features(t));
        for b in 0..self.cfg.n_blocks {
            let ws = binder.bind(
                g,
                &format!("block{}.film_scale.w", b),
                self.params.get(&format!("block{}.film_scale.w", b))?,
            );
            let wsh = binder.bind(
                g,
                &format!("block{}.film_shift.w", b),
                self.params.get(&format!("block{}.film_shift.w", b))?,
            );
            // Gate and shift the residual stream as a function of time, so
            // the linear input-to-output path has a time-dependent gain.
            let s = g.matmul(tau, ws);
            let gate = g.add_const(s, T::one());
            h = g.mul_row(h, gate);
            let shift = g.matmul(tau, wsh);
            h = g.add_row(h, shift);

            let tm = binder.bind(
                g,
                &format!("block{}.token_mix.w", b),
                self.params.get(&format!("block{}.token_mix.w", b))?,
            );
            let cm = binder.bind(
                g,
                &format!("block{}.channel_mix.w", b),
                self.params.get(&format!("block{}.channel_mix.w", b))?,
            );
            let cb = binder.bind(
                g,
                &format!("block{}.channel_mix.b", b),
                self.params.get(&format!("block{}.channel_mix.b", b))?,
            );
            let mut v = g.matmul(tm, h);
            v = g.tanh(v);
            v = g.matmul(v, cm);
            v = g.add_row(v, cb);
            v = g.tanh(v);
            h = g.add(h, v);
        }

        let wo = binder.bind(g, "out.w", self.params.get("out.w")?);
        let bo = binder.bind(g, "out.b", self.params.get("out.b")?);
        let mut y = g.matmul(h, wo);
        y = g.add_row(y, bo);
        let wskip = binder.bind(g, "skip_gain.w", self.params.get("skip_gain.w")?);
        let gain = g.matmul(tau, wskip);
        let skip = g.mul_row(x, gain);
        y = g.add(y, skip);
        Ok(g.index_map(y, self.unpatch_idx.clone(), self.cfg.image.dims()))
    }

    /// Forward-only velocity. Runs the same graph code as the differentiable
    /// path, so values are bit-identical to a gradient-tracked evaluation.
    pub fn velocity_plain(
        &self,
        z: &ImageTensor<T>,
        t: T,
        cond: usize,
        adapter: Option<&LoraAdapter<T>>,
    ) -> Result<ImageTensor<T>> {
        let mut g = Graph::new();
        let zn = g.constant(z.clone());
        let out = match adapter {
            None => {
                let mut binder = PlainBinder::frozen();
                self.velocity(&mut g, zn, t, cond, &mut binder)?
            }
            Some(a) => {
                let mut binder = LoraBinder::frozen(a);
                self.velocity(&mut g, zn, t, cond, &mut binder)?
            }
        };
        Ok(g.value(out).clone())
    }

    /// Euler sampling from noise with this model (optionally adapted).
    pub fn sample(
        &self,
        schedule: &SamplingSchedule,
        eps: &ImageTensor<T>,
        cond: usize,
        adapter: Option<&LoraAdapter<T>>,
    ) -> Result<ImageTensor<T>> {
        sample_with(schedule, eps, |z, t| self.velocity_plain(z, t, cond, adapter))
    }
}

/// Settings for the velocity-matching pretraining phase.
#[derive(Debug, Clone, Copy)]
pub struct PretrainConfig {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    /// Lower bound for drawn training times; 0 matches the flow-matching
    /// expectation over uniform t.
    pub t_min: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            iters: 1500,
            batch: 16,
            lr: 2e-3,
            t_min: 0.0,
            seed: 0x5eed,
        }
    }
}

/// Settings for the rectification phase: sample couplings from the current
/// model with a multi-step schedule, then retrain on the straightened pairs
/// so a single Euler step reproduces the multi-step output.
#[derive(Debug, Clone, Copy)]
pub struct ReflowConfig {
    pub n_pairs: usize,
    pub sample_steps: usize,
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of reflow examples trained at exactly t = 1, the only time
    /// the single-step schedule ever evaluates; the rest draw t uniformly
    /// so multi-step sampling stays usable.
    pub unit_time_frac: f64,
}

impl Default for ReflowConfig {
    fn default() -> Self {
        ReflowConfig {
            n_pairs: 512,
            sample_steps: 8,
            iters: 1000,
            batch: 16,
            lr: 1e-3,
            unit_time_frac: 0.5,
        }
    }
}

/// Loss curves from pretraining; values are per-image sums averaged over
/// the batch.
#[derive(Debug, Clone, Default)]
pub struct PretrainReport {
    pub cfm_losses: Vec<f64>,
    pub reflow_losses: Vec<f64>,
}

/// Stream id for coupling generation during rectification. Optimizer steps
/// use small ids, so this cannot collide.
const STEP_REFLOW_PAIR: u64 = u64::MAX;

fn train_matching_phase<T: Real>(
    model: &mut PatchMixer<T>,
    mut example: impl FnMut(usize, &mut ChaCha8Rng) -> Result<(ImageTensor<T>, ImageTensor<T>, usize)>,
    mut sample_t: impl FnMut(&mut ChaCha8Rng) -> f64,
    iters: usize,
    batch: usize,
    lr: f64,
    seed: u64,
    losses: &mut Vec<f64>,
) -> Result<()> {
    let mut adam = Adam::<T>::new(AdamConfig::with_lr(lr));
    for k in 0..iters {
        let mut grad_sum: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        let mut loss_sum = 0.0f64;
        for j in 0..batch {
            let idx = k * batch + j;
            let mut rng = stream(seed, idx as u64, STEP_GENERATION);
            let (x0, eps, cond) = example(idx, &mut rng)?;
            let t = T::from_f64(sample_t(&mut rng));
            let zt = interpolate(&x0, &eps, t)?;
            let target = velocity_target(&x0, &eps)?;

            let mut g = Graph::new();
            let zn = g.constant(zt);
            let tn = g.constant(target);
            let mut binder = PlainBinder::trainable();
            let u_hat = model.velocity(&mut g, zn, t, cond, &mut binder)?;
            let loss = cfm_loss_node(&mut g, u_hat, tn);
            let lv = g.value(loss).item().to_f64x();
            if !lv.is_finite() {
                return Err(Error::non_finite(
                    "pretraining loss",
                    format!("iteration {} example {}", k, j),
                ));
            }
            loss_sum += lv;
            let grads = g.backward(loss);
            for (name, gt) in binder.collect_grads(&grads) {
                grad_sum
                    .entry(name)
                    .and_modify(|acc| *acc = acc.add(&gt).unwrap())
                    .or_insert(gt);
            }
        }
        adam.begin_step();
        let inv_b = T::from_f64(1.0 / batch as f64);
        for (name, gsum) in grad_sum {
            let gmean = gsum.scale(inv_b);
            adam.update(&name, model.params_mut().get_mut(&name)?, &gmean)?;
        }
        losses.push(loss_sum / batch as f64);
    }
    Ok(())
}

/// Pretrain on clean images drawn by `scene_source`; returns loss curves.
/// `scene_source` receives a dedicated RNG per example and must give back a
/// clean image plus its condition label.
pub fn pretrain<T: Real>(
    model: &mut PatchMixer<T>,
    mut scene_source: impl FnMut(&mut ChaCha8Rng) -> Result<(ImageTensor<T>, usize)>,
    cfg: PretrainConfig,
    reflow: Option<ReflowConfig>,
) -> Result<PretrainReport> {
    let mut report = PretrainReport::default();
    let shape = model.config().image;
    train_matching_phase(
        model,
        |_idx, rng| {
            let (x0, cond) = scene_source(rng)?;
            let eps = Tensor::randn(shape.dims(), rng);
            Ok((x0, eps, cond))
        },
        |rng| cfg.t_min + (1.0 - cfg.t_min) * f64::uniform_01(rng),
        cfg.iters,
        cfg.batch,
        cfg.lr,
        cfg.seed,
        &mut report.cfm_losses,
    )?;

    if let Some(rf) = reflow {
        // Couplings sampled from the stage-one model define straight paths
        // whose endpoints the rectified model must connect in one step.
        let schedule = SamplingSchedule::uniform(rf.sample_steps);
        let n_cond = model.config().n_cond;
        let mut pairs: Vec<(ImageTensor<T>, ImageTensor<T>, usize)> =
            Vec::with_capacity(rf.n_pairs);
        for i in 0..rf.n_pairs {
            let mut rng = stream(cfg.seed, i as u64, STEP_REFLOW_PAIR);
            let cond = rng.random_range(0..n_cond);
            let eps = Tensor::randn(shape.dims(), &mut rng);
            let xhat = model.sample(&schedule, &eps, cond, None)?;
            pairs.push((xhat, eps, cond));
        }
        let reflow_seed = mix64(cfg.seed, 0x7ec7, 1);
        train_matching_phase(
            model,
            |idx, _rng| {
                let (x0, eps, cond) = &pairs[idx % pairs.len()];
                Ok((x0.clone(), eps.clone(), *cond))
            },
            |rng| {
                let u = f64::uniform_01(rng);
                if f64::uniform_01(rng) < rf.unit_time_frac {
                    1.0
                } else {
                    cfg.t_min + (1.0 - cfg.t_min) * u
                }
            },
            rf.iters,
            rf.batch,
            rf.lr,
            reflow_seed,
            &mut report.reflow_losses,
        )?;
    }
    Ok(report)
}
