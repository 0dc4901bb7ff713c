//! The deliberative rater: a differentiable scorer that assigns
//! probabilities to answer token sequences given an image and a tokenized
//! question, trained on the synthetic world's oracle labels. Also hosts the
//! bit-exact chat-template formatting used when the same queries are sent
//! to real VLMs.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::lora::{PlainBinder, WeightBinder};
use crate::optim::{Adam, AdamConfig};
use crate::overlay::{apply_overlay_node, OverlaySpec, Rgb};
use crate::real::Real;
use crate::rng::{stream, STEP_GENERATION};

/// Step id for augmentation noise during rater training.
const STEP_AUGMENT_NOISE: u64 = 0xau64 << 32;
use crate::tensor::{ImageShape, ImageTensor, ParamSet, Tensor};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

pub const TOK_PAD: u16 = 0;
pub const TOK_YES: u16 = 1;
pub const TOK_NO: u16 = 2;
pub const TOK_TPL_PALETTE: u16 = 3;
pub const TOK_TPL_LINE_ALIGN: u16 = 4;
pub const TOK_TPL_LINE_THICK: u16 = 5;
pub const TOK_TPL_DEPTH_ORDER: u16 = 6;
pub const TOK_TPL_ATTR: u16 = 7;
/// Sixteen quantized value tokens follow.
pub const TOK_VAL_BASE: u16 = 8;
/// Eight named-color tokens follow.
pub const TOK_COL_BASE: u16 = 24;
pub const TOK_POINT_A: u16 = 32;
pub const TOK_POINT_B: u16 = 33;
pub const VOCAB_SIZE: usize = 34;

/// Quantize a fraction in [0, 1] to one of the sixteen value tokens.
pub fn value_token(frac: f64) -> u16 {
    let bin = (frac * 16.0).floor() as i64;
    TOK_VAL_BASE + bin.clamp(0, 15) as u16
}

/// Value token for a small integer (pixel thickness and the like).
pub fn int_value_token(v: usize) -> Result<u16> {
    if v > 15 {
        return Err(Error::invalid(format!("value {} exceeds the 0..=15 range", v)));
    }
    Ok(TOK_VAL_BASE + v as u16)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedColor {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Black,
}

pub const NAMED_COLORS: [NamedColor; 8] = [
    NamedColor::Red,
    NamedColor::Green,
    NamedColor::Blue,
    NamedColor::Yellow,
    NamedColor::Cyan,
    NamedColor::Magenta,
    NamedColor::White,
    NamedColor::Black,
];

impl NamedColor {
    pub fn rgb(self) -> Rgb {
        match self {
            NamedColor::Red => [1.0, -1.0, -1.0],
            NamedColor::Green => [-1.0, 1.0, -1.0],
            NamedColor::Blue => [-1.0, -1.0, 1.0],
            NamedColor::Yellow => [1.0, 1.0, -1.0],
            NamedColor::Cyan => [-1.0, 1.0, 1.0],
            NamedColor::Magenta => [1.0, -1.0, 1.0],
            NamedColor::White => [1.0, 1.0, 1.0],
            NamedColor::Black => [-1.0, -1.0, -1.0],
        }
    }

    pub fn index(self) -> usize {
        NAMED_COLORS.iter().position(|&c| c == self).unwrap()
    }

    pub fn token(self) -> u16 {
        TOK_COL_BASE + self.index() as u16
    }

    pub fn name(self) -> &'static str {
        match self {
            NamedColor::Red => "red",
            NamedColor::Green => "green",
            NamedColor::Blue => "blue",
            NamedColor::Yellow => "yellow",
            NamedColor::Cyan => "cyan",
            NamedColor::Magenta => "magenta",
            NamedColor::White => "white",
            NamedColor::Black => "black",
        }
    }

    /// Max-abs distance between an arbitrary color and this named color.
    pub fn distance(self, c: &Rgb) -> f64 {
        let r = self.rgb();
        (0..3).map(|i| (r[i] - c[i]).abs()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    pub fn token(self) -> u16 {
        match self {
            Answer::Yes => TOK_YES,
            Answer::No => TOK_NO,
        }
    }

    pub fn opposite(self) -> Answer {
        match self {
            Answer::Yes => Answer::No,
            Answer::No => Answer::Yes,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Answer::Yes => "Yes",
            Answer::No => "No",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum PointLabel {
    A,
    B,
}

impl PointLabel {
    pub fn token(self) -> u16 {
        match self {
            PointLabel::A => TOK_POINT_A,
            PointLabel::B => TOK_POINT_B,
        }
    }

    pub fn glyph(self) -> char {
        match self {
            PointLabel::A => 'A',
            PointLabel::B => 'B',
        }
    }
}

/// Ordered token ids over the fixed vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct TokenSequence(Vec<u16>);

impl TokenSequence {
    pub fn new(tokens: Vec<u16>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("token sequence must be nonempty"));
        }
        for &t in &tokens {
            if t as usize >= VOCAB_SIZE {
                return Err(Error::invalid(format!("token id {} out of vocabulary", t)));
            }
        }
        Ok(TokenSequence(tokens))
    }

    pub fn tokens(&self) -> &[u16] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

// ---------------------------------------------------------------------------
// Question catalog
// ---------------------------------------------------------------------------

/// The parameterized question catalog. Tokenization is canonical: one
/// template token followed by three parameter slots padded with `PAD`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "template", content = "params", rename_all = "snake_case")]
pub enum Question {
    /// Do all scene colors come from this palette?
    PaletteMatch { colors: Vec<NamedColor> },
    /// Is the horizon aligned with the marked row?
    LineAlignment { row_frac: f64 },
    /// Does the shape outline weight equal this thickness?
    LineThickness { thickness_px: usize },
    /// Is the first marked point nearer than the second?
    DepthOrder { first: PointLabel, second: PointLabel },
    /// Does the scene contain an object of this color?
    AttributePresence { color: NamedColor },
}

/// Tokenized question length: template token plus three parameter slots.
pub const QUESTION_SLOTS: usize = 4;

impl Question {
    pub fn template_token(&self) -> u16 {
        match self {
            Question::PaletteMatch { .. } => TOK_TPL_PALETTE,
            Question::LineAlignment { .. } => TOK_TPL_LINE_ALIGN,
            Question::LineThickness { .. } => TOK_TPL_LINE_THICK,
            Question::DepthOrder { .. } => TOK_TPL_DEPTH_ORDER,
            Question::AttributePresence { .. } => TOK_TPL_ATTR,
        }
    }

    pub fn template_name(&self) -> &'static str {
        match self {
            Question::PaletteMatch { .. } => "palette_match",
            Question::LineAlignment { .. } => "line_alignment",
            Question::LineThickness { .. } => "line_thickness",
            Question::DepthOrder { .. } => "depth_order",
            Question::AttributePresence { .. } => "attribute_presence",
        }
    }

    pub fn tokenize(&self) -> Result<TokenSequence> {
        let mut toks = vec![self.template_token()];
        match self {
            Question::PaletteMatch { colors } => {
                if colors.is_empty() || colors.len() > 3 {
                    return Err(Error::invalid(
                        "palette question takes between 1 and 3 colors",
                    ));
                }
                for c in colors {
                    toks.push(c.token());
                }
            }
            Question::LineAlignment { row_frac } => {
                if !(0.0..=1.0).contains(row_frac) {
                    return Err(Error::invalid("row_frac outside [0, 1]"));
                }
                toks.push(value_token(*row_frac));
            }
            Question::LineThickness { thickness_px } => {
                toks.push(int_value_token(*thickness_px)?);
            }
            Question::DepthOrder { first, second } => {
                if first == second {
                    return Err(Error::invalid("depth question needs two distinct points"));
                }
                toks.push(first.token());
                toks.push(second.token());
            }
            Question::AttributePresence { color } => toks.push(color.token()),
        }
        while toks.len() < QUESTION_SLOTS {
            toks.push(TOK_PAD);
        }
        TokenSequence::new(toks)
    }

    /// English rendering, used for chat-template formatting and reports.
    pub fn text(&self) -> String {
        match self {
            Question::PaletteMatch { colors } => {
                let names: Vec<&str> = colors.iter().map(|c| c.name()).collect();
                format!(
                    "Does the image use only colors from the palette shown at the bottom ({})?",
                    names.join(", ")
                )
            }
            Question::LineAlignment { .. } => {
                "Is the horizon aligned with the red line?".to_string()
            }
            Question::LineThickness { thickness_px } => format!(
                "Is the shape outline the same weight as the marked line ({} px)?",
                thickness_px
            ),
            Question::DepthOrder { first, second } => format!(
                "Is Point {} nearer to the camera than Point {}?",
                match first {
                    PointLabel::A => "A",
                    PointLabel::B => "B",
                },
                match second {
                    PointLabel::A => "A",
                    PointLabel::B => "B",
                }
            ),
            Question::AttributePresence { color } => {
                format!("Does the scene contain a {} object?", color.name())
            }
        }
    }
}

/// A scoring request: question tokens, desired answer tokens, and the
/// visual-prompt overlay to stamp on the image before rating.
#[derive(Debug, Clone, PartialEq)]
pub struct VqaQuery {
    pub question: TokenSequence,
    pub answer: TokenSequence,
    pub overlay: Option<OverlaySpec>,
}

impl VqaQuery {
    pub fn new(
        question: TokenSequence,
        answer: TokenSequence,
        overlay: Option<OverlaySpec>,
    ) -> Self {
        VqaQuery {
            question,
            answer,
            overlay,
        }
    }

    pub fn yes_for(question: &Question, overlay: Option<OverlaySpec>) -> Result<Self> {
        Ok(VqaQuery {
            question: question.tokenize()?,
            answer: TokenSequence::new(vec![TOK_YES])?,
            overlay,
        })
    }
}

// ---------------------------------------------------------------------------
// Discriminator interface and losses
// ---------------------------------------------------------------------------

/// Probability floor applied inside the loss so zero-probability tokens
/// yield a large finite loss with finite (zero) gradient instead of NaN.
pub const DEFAULT_PROB_FLOOR: f64 = 1e-12;

/// A differentiable next-answer-token scorer. Implementations must route
/// every parameter through `binder` so the same forward code serves
/// training, frozen scoring, and adapter-wrapped variants.
pub trait Discriminator<T: Real> {
    fn next_token_logits(
        &self,
        g: &mut Graph<T>,
        image: NodeId,
        question: &TokenSequence,
        prefix: &[u16],
        binder: &mut dyn WeightBinder<T>,
    ) -> Result<NodeId>;

    fn image_shape(&self) -> ImageShape;
}

/// Autoregressive answer loss: `-sum_i log D(a_i | image, q, a_<i)`, with
/// each step's probability floored at `prob_floor` (`0.0` disables the
/// floor, letting impossible answers return +inf).
///
/// If `query.overlay` is present it is stamped onto the image node first,
/// so gradients reach only non-overlaid pixels.
pub fn vqa_loss_node<T: Real>(
    g: &mut Graph<T>,
    disc: &dyn Discriminator<T>,
    image: NodeId,
    query: &VqaQuery,
    prob_floor: f64,
    binder: &mut dyn WeightBinder<T>,
) -> Result<NodeId> {
    let shape = disc.image_shape();
    let scored = match &query.overlay {
        Some(spec) => apply_overlay_node(g, image, spec, shape)?,
        None => image,
    };
    let floor_log = T::from_f64(prob_floor.max(0.0).ln());
    let mut step_logps = Vec::with_capacity(query.answer.len());
    let answer = query.answer.tokens();
    for i in 0..answer.len() {
        let logits = disc.next_token_logits(g, scored, &query.question, &answer[..i], binder)?;
        let logp = g.log_softmax(logits);
        let mut picked = g.get(logp, answer[i] as usize);
        if prob_floor > 0.0 {
            picked = g.clamp_min(picked, floor_log);
        }
        step_logps.push(picked);
    }
    let total = g.concat(&step_logps);
    let sum = g.sum_all(total);
    Ok(g.scale(sum, -T::one()))
}

/// Plain value of [`vqa_loss_node`] on a frozen discriminator.
pub fn vqa_loss<T: Real>(
    disc: &dyn Discriminator<T>,
    image: &ImageTensor<T>,
    query: &VqaQuery,
) -> Result<T> {
    let mut g = Graph::new();
    let img = g.constant(image.clone());
    let mut binder = PlainBinder::frozen();
    let loss = vqa_loss_node(&mut g, disc, img, query, DEFAULT_PROB_FLOOR, &mut binder)?;
    Ok(g.value(loss).item())
}

/// `exp(-loss)`: the probability the discriminator assigns to the full
/// answer. Infinite loss maps to 0.
pub fn answer_probability<T: Real>(loss: T) -> T {
    (-loss).exp()
}

/// `P(Yes) - P(No)` at the first answer position.
pub fn yes_no_margin<T: Real>(
    disc: &dyn Discriminator<T>,
    image: &ImageTensor<T>,
    question: &TokenSequence,
) -> Result<T> {
    let (py, pn) = yes_no_probabilities(disc, image, question)?;
    Ok(py - pn)
}

/// First-position probabilities of the Yes and No tokens.
pub fn yes_no_probabilities<T: Real>(
    disc: &dyn Discriminator<T>,
    image: &ImageTensor<T>,
    question: &TokenSequence,
) -> Result<(T, T)> {
    let mut g = Graph::new();
    let img = g.constant(image.clone());
    let mut binder = PlainBinder::frozen();
    let logits = disc.next_token_logits(&mut g, img, question, &[], &mut binder)?;
    let logp = g.log_softmax(logits);
    let v = g.value(logp);
    Ok((
        v.data()[TOK_YES as usize].exp(),
        v.data()[TOK_NO as usize].exp(),
    ))
}

/// Top answer between Yes and No.
pub fn predict_answer<T: Real>(
    disc: &dyn Discriminator<T>,
    image: &ImageTensor<T>,
    question: &TokenSequence,
) -> Result<Answer> {
    let (py, pn) = yes_no_probabilities(disc, image, question)?;
    Ok(if py >= pn { Answer::Yes } else { Answer::No })
}

// ---------------------------------------------------------------------------
// Toy discriminator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ToyDiscConfig {
    pub image: ImageShape,
    pub patch: usize,
    pub d_img: usize,
    pub q_embed_dim: usize,
    pub a_embed_dim: usize,
    pub d_head: usize,
}

impl Default for ToyDiscConfig {
    fn default() -> Self {
        ToyDiscConfig {
            image: ImageShape::new(32, 32),
            patch: 4,
            d_img: 32,
            q_embed_dim: 16,
            a_embed_dim: 16,
            d_head: 64,
        }
    }
}

impl ToyDiscConfig {
    /// Sub-1k-parameter variant for finite-difference verification.
    pub fn tiny() -> Self {
        ToyDiscConfig {
            image: ImageShape::new(8, 8),
            patch: 4,
            d_img: 2,
            q_embed_dim: 4,
            a_embed_dim: 2,
            d_head: 6,
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
            return Err(Error::invalid("patch must evenly divide the image"));
        }
        if self.d_img == 0 || self.q_embed_dim == 0 || self.a_embed_dim == 0 || self.d_head == 0 {
            return Err(Error::invalid("all embedding sizes must be positive"));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.image.height / self.patch) * (self.image.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.image.channels * self.patch * self.patch
    }

    fn feature_dim(&self) -> usize {
        self.n_patches() * self.d_img + QUESTION_SLOTS * self.q_embed_dim + self.a_embed_dim
    }
}

/// Small patch encoder + question/answer embeddings + a two-layer head over
/// the shared vocabulary. Deliberately simple; only the scoring contract
/// matters.
pub struct ToyDiscriminator<T: Real> {
    cfg: ToyDiscConfig,
    params: ParamSet<T>,
    patch_idx: Rc<Vec<usize>>,
    calls: AtomicU64,
}

fn disc_patch_indices(cfg: &ToyDiscConfig) -> Vec<usize> {
    let (p, cols) = (cfg.patch, cfg.image.width / cfg.patch);
    let mut idx = Vec::with_capacity(cfg.n_patches() * cfg.patch_dim());
    for q in 0..cfg.n_patches() {
        let (py, px) = (q / cols, q % cols);
        for c in 0..cfg.image.channels {
            for dy in 0..p {
                for dx in 0..p {
                    idx.push(cfg.image.index(c, py * p + dy, px * p + dx));
                }
            }
        }
    }
    idx
}

impl<T: Real> ToyDiscriminator<T> {
    pub fn init(cfg: ToyDiscConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let (np, pd, d) = (cfg.n_patches(), cfg.patch_dim(), cfg.d_img);
        let mut params = ParamSet::new();
        let s_embed = T::from_f64(1.0 / (pd as f64).sqrt());
        params.insert("img_embed.w", Tensor::randn_scaled(vec![pd, d], s_embed, rng));
        params.insert("img_embed.b", Tensor::zeros(vec![d]));
        params.insert(
            "pos_embed",
            Tensor::randn_scaled(vec![np, d], T::from_f64(0.02), rng),
        );
        params.insert(
            "token_mix.w",
            Tensor::randn_scaled(vec![np, np], T::from_f64(1.0 / (np as f64).sqrt()), rng),
        );
        params.insert(
            "channel_mix.w",
            Tensor::randn_scaled(vec![d, d], T::from_f64(1.0 / (d as f64).sqrt()), rng),
        );
        params.insert("channel_mix.b", Tensor::zeros(vec![d]));
        params.insert(
            "q_embed",
            Tensor::randn_scaled(vec![VOCAB_SIZE, cfg.q_embed_dim], T::from_f64(0.25), rng),
        );
        params.insert(
            "a_embed",
            Tensor::randn_scaled(vec![VOCAB_SIZE, cfg.a_embed_dim], T::from_f64(0.25), rng),
        );
        let f = cfg.feature_dim();
        params.insert(
            "head.w",
            Tensor::randn_scaled(vec![f, cfg.d_head], T::from_f64(1.0 / (f as f64).sqrt()), rng),
        );
        params.insert("head.b", Tensor::zeros(vec![cfg.d_head]));
        params.insert(
            "out.w",
            Tensor::randn_scaled(
                vec![cfg.d_head, VOCAB_SIZE],
                T::from_f64(1.0 / (cfg.d_head as f64).sqrt()),
                rng,
            ),
        );
        params.insert("out.b", Tensor::zeros(vec![VOCAB_SIZE]));
        Ok(ToyDiscriminator {
            patch_idx: Rc::new(disc_patch_indices(&cfg)),
            cfg,
            params,
            calls: AtomicU64::new(0),
        })
    }

    pub fn from_params(cfg: ToyDiscConfig, params: ParamSet<T>) -> Result<Self> {
        cfg.validate()?;
        Ok(ToyDiscriminator {
            patch_idx: Rc::new(disc_patch_indices(&cfg)),
            cfg,
            params,
            calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ToyDiscConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset_call_count(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    pub fn cast<U: Real>(&self) -> ToyDiscriminator<U> {
        ToyDiscriminator {
            cfg: self.cfg,
            params: self.params.cast::<U>(),
            patch_idx: self.patch_idx.clone(),
            calls: AtomicU64::new(0),
        }
    }

    pub fn save(&self, path: &std::path::Path, mode: crate::ckpt::PayloadMode) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "toy_discriminator",
            "config": self.cfg,
        });
        crate::ckpt::save_checkpoint(path, &meta, &self.params, mode)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (meta, params) = crate::ckpt::load_checkpoint::<T>(path)?;
        if meta["kind"] != "toy_discriminator" {
            return Err(Error::checkpoint(format!(
                "expected a discriminator checkpoint, found kind {}",
                meta["kind"]
            )));
        }
        let cfg: ToyDiscConfig = serde_json::from_value(meta["config"].clone())?;
        Self::from_params(cfg, params)
    }
}

impl<T: Real> Discriminator<T> for ToyDiscriminator<T> {
    fn next_token_logits(
        &self,
        g: &mut Graph<T>,
        image: NodeId,
        question: &TokenSequence,
        prefix: &[u16],
        binder: &mut dyn WeightBinder<T>,
    ) -> Result<NodeId> {
        if g.value(image).shape() != self.cfg.image.dims().as_slice() {
            return Err(Error::shape(format!(
                "discriminator input {:?}, expected {:?}",
                g.value(image).shape(),
                self.cfg.image.dims()
            )));
        }
        if question.len() != QUESTION_SLOTS {
            return Err(Error::invalid(format!(
                "question must occupy {} slots, got {}",
                QUESTION_SLOTS,
                question.len()
            )));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let (np, pd, d) = (self.cfg.n_patches(), self.cfg.patch_dim(), self.cfg.d_img);

        let x = g.index_map(image, self.patch_idx.clone(), vec![np, pd]);
        let we = binder.bind(g, "img_embed.w", self.params.get("img_embed.w")?);
        let be = binder.bind(g, "img_embed.b", self.params.get("img_embed.b")?);
        let pos = binder.bind(g, "pos_embed", self.params.get("pos_embed")?);
        let mut h = g.matmul(x, we);
        h = g.add_row(h, be);
        h = g.add(h, pos);
        h = g.tanh(h);
        let tm = binder.bind(g, "token_mix.w", self.params.get("token_mix.w")?);
        h = g.matmul(tm, h);
        h = g.tanh(h);
        let cm = binder.bind(g, "channel_mix.w", self.params.get("channel_mix.w")?);
        let cb = binder.bind(g, "channel_mix.b", self.params.get("channel_mix.b")?);
        h = g.matmul(h, cm);
        h = g.add_row(h, cb);
        h = g.tanh(h);
        let img_flat = g.reshape(h, vec![np * d]);

        let qe = binder.bind(g, "q_embed", self.params.get("q_embed")?);
        let q_ids: Vec<usize> = question.tokens().iter().map(|&t| t as usize).collect();
        let q_rows = g.select_rows(qe, Rc::new(q_ids));
        let q_flat = g.reshape(q_rows, vec![QUESTION_SLOTS * self.cfg.q_embed_dim]);

        let ae = binder.bind(g, "a_embed", self.params.get("a_embed")?);
        let p_flat = if prefix.is_empty() {
            g.constant(Tensor::zeros(vec![self.cfg.a_embed_dim]))
        } else {
            let rows = g.select_rows(ae, Rc::new(prefix.iter().map(|&t| t as usize).collect()));
            let ones = g.constant(Tensor::full(vec![1, prefix.len()], T::one()));
            let summed = g.matmul(ones, rows);
            g.reshape(summed, vec![self.cfg.a_embed_dim])
        };

        let feats = g.concat(&[img_flat, q_flat, p_flat]);
        let feats2 = g.reshape(feats, vec![1, self.cfg.feature_dim()]);
        let hw = binder.bind(g, "head.w", self.params.get("head.w")?);
        let hb = binder.bind(g, "head.b", self.params.get("head.b")?);
        let mut y = g.matmul(feats2, hw);
        y = g.add_row(y, hb);
        y = g.tanh(y);
        let ow = binder.bind(g, "out.w", self.params.get("out.w")?);
        let ob = binder.bind(g, "out.b", self.params.get("out.b")?);
        let mut logits = g.matmul(y, ow);
        logits = g.add_row(logits, ob);
        Ok(g.reshape(logits, vec![VOCAB_SIZE]))
    }

    fn image_shape(&self) -> ImageShape {
        self.cfg.image
    }
}

// ---------------------------------------------------------------------------
// Mock discriminator for frozen-value tests
// ---------------------------------------------------------------------------

/// Emits prescribed next-token distributions by prefix length, ignoring the
/// image and question. Used to pin loss arithmetic to hand-derived values.
pub struct MockDiscriminator {
    pub shape: ImageShape,
    /// `step_probs[i]` is the full-vocabulary distribution at prefix len i.
    pub step_probs: Vec<Vec<f64>>,
}

impl MockDiscriminator {
    /// Distribution concentrated on Yes/No with the given Yes probability;
    /// remaining mass spread over No.
    pub fn yes_no(shape: ImageShape, p_yes_by_step: &[f64]) -> Self {
        let step_probs = p_yes_by_step
            .iter()
            .map(|&p| {
                let mut dist = vec![0.0; VOCAB_SIZE];
                dist[TOK_YES as usize] = p;
                dist[TOK_NO as usize] = 1.0 - p;
                dist
            })
            .collect();
        MockDiscriminator { shape, step_probs }
    }
}

impl<T: Real> Discriminator<T> for MockDiscriminator {
    fn next_token_logits(
        &self,
        g: &mut Graph<T>,
        _image: NodeId,
        _question: &TokenSequence,
        prefix: &[u16],
        _binder: &mut dyn WeightBinder<T>,
    ) -> Result<NodeId> {
        let dist = self.step_probs.get(prefix.len()).ok_or_else(|| {
            Error::invalid(format!("mock has no distribution for step {}", prefix.len()))
        })?;
        // ln p as logits: log_softmax of ln(p) returns ln(p) exactly when
        // the distribution sums to 1.
        let logits: Vec<T> = dist.iter().map(|&p| T::from_f64(p.ln())).collect();
        Ok(g.constant(Tensor::new(vec![VOCAB_SIZE], logits)?))
    }

    fn image_shape(&self) -> ImageShape {
        self.shape
    }
}

// ---------------------------------------------------------------------------
// Chat templates
// ---------------------------------------------------------------------------

/// A named chat layout with literal segments around the question slot.
/// Rendering appends the fixed suffix "Answer with Yes or No." after the
/// question, then stops where the answer would begin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChatTemplate {
    pub name: &'static str,
    before_question: &'static str,
    after_question: &'static str,
}

pub const IDEFICS2_TEMPLATE: ChatTemplate = ChatTemplate {
    name: "idefics2",
    before_question: "User: <image> ",
    after_question: " Answer with Yes or No.<end_of_utterance>\nAssistant:",
};

pub const QWEN25VL_TEMPLATE: ChatTemplate = ChatTemplate {
    name: "qwen2.5-vl",
    before_question: "<|im_start|>system\nYou are a helpful assistant.\n<|im_end|>\n<|im_start|>user\n<|vision_start|><|image_pad|><|vision_end|>\n",
    after_question: " Answer with Yes or No.\n<|im_end|>\n<|im_start|>assistant\n",
};

pub const CHAT_TEMPLATES: [&ChatTemplate; 2] = [&IDEFICS2_TEMPLATE, &QWEN25VL_TEMPLATE];

pub fn chat_template(name: &str) -> Result<&'static ChatTemplate> {
    CHAT_TEMPLATES
        .iter()
        .find(|t| t.name == name)
        .copied()
        .ok_or_else(|| Error::invalid(format!("unknown chat template '{}'", name)))
}

/// Byte-exact prompt rendering for a question.
pub fn format_question(template: &ChatTemplate, question_text: &str) -> Result<String> {
    if question_text.is_empty() {
        return Err(Error::invalid("question text must be nonempty"));
    }
    Ok(format!(
        "{}{}{}",
        template.before_question, question_text, template.after_question
    ))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// One supervised rating example: the image already carries its overlay.
#[derive(Debug, Clone)]
pub struct DiscExample<T> {
    pub image: ImageTensor<T>,
    pub question: TokenSequence,
    pub label: Answer,
}

#[derive(Debug, Clone, Copy)]
pub struct DiscTrainConfig {
    pub arch: ToyDiscConfig,
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    /// Cross-entropy smoothing toward the opposite class; keeps the trained
    /// rater off probability saturation so its pixel gradients stay useful.
    pub label_smoothing: f64,
    /// Gaussian pixel noise added to training images only. Generated images
    /// the rater later grades are blurrier than clean renders; a noised
    /// rater keeps its verdicts stable on them.
    pub input_noise_std: f64,
    pub prob_floor: f64,
    pub seed: u64,
}

impl Default for DiscTrainConfig {
    fn default() -> Self {
        DiscTrainConfig {
            arch: ToyDiscConfig::default(),
            iters: 900,
            batch: 16,
            lr: 2e-3,
            label_smoothing: 0.02,
            input_noise_std: 0.0,
            prob_floor: DEFAULT_PROB_FLOOR,
            seed: 0xd15c,
        }
    }
}

/// Every question template must appear with both labels before training
/// can start.
pub fn check_dataset_coverage<T: Real>(dataset: &[DiscExample<T>]) -> Result<()> {
    let mut seen: HashSet<(u16, Answer)> = HashSet::new();
    for ex in dataset {
        seen.insert((ex.question.tokens()[0], ex.label));
    }
    for tpl in [
        TOK_TPL_PALETTE,
        TOK_TPL_LINE_ALIGN,
        TOK_TPL_LINE_THICK,
        TOK_TPL_DEPTH_ORDER,
        TOK_TPL_ATTR,
    ] {
        for label in [Answer::Yes, Answer::No] {
            if !seen.contains(&(tpl, label)) {
                return Err(Error::coverage(format!(
                    "dataset is missing template token {} with label {}",
                    tpl,
                    label.as_str()
                )));
            }
        }
    }
    Ok(())
}

/// Supervised training of the toy rater on oracle-labeled examples.
pub fn train_toy_discriminator<T: Real>(
    dataset: &[DiscExample<T>],
    cfg: DiscTrainConfig,
) -> Result<ToyDiscriminator<T>> {
    check_dataset_coverage(dataset)?;
    let mut disc = ToyDiscriminator::<T>::init(cfg.arch, &mut stream(cfg.seed, 0, STEP_GENERATION))?;
    let mut adam = Adam::<T>::new(AdamConfig::with_lr(cfg.lr));
    let smooth = cfg.label_smoothing;
    let floor_log = T::from_f64(cfg.prob_floor.max(0.0).ln());

    for k in 0..cfg.iters {
        let mut grad_sum: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for j in 0..cfg.batch {
            let idx = k * cfg.batch + j;
            let ex = &dataset[idx % dataset.len()];
            let mut g = Graph::new();
            let image = if cfg.input_noise_std > 0.0 {
                let rng = &mut stream(cfg.seed, idx as u64, STEP_AUGMENT_NOISE);
                let noise = Tensor::randn(ex.image.shape().to_vec(), rng);
                ex.image.add_scaled(&noise, T::from_f64(cfg.input_noise_std))?
            } else {
                ex.image.clone()
            };
            let img = g.constant(image);
            let mut binder = PlainBinder::trainable();
            let logits =
                disc.next_token_logits(&mut g, img, &ex.question, &[], &mut binder)?;
            let logp = g.log_softmax(logits);
            let mut lp_label = g.get(logp, ex.label.token() as usize);
            let mut lp_other = g.get(logp, ex.label.opposite().token() as usize);
            if cfg.prob_floor > 0.0 {
                lp_label = g.clamp_min(lp_label, floor_log);
                lp_other = g.clamp_min(lp_other, floor_log);
            }
            let main = g.scale(lp_label, -T::from_f64(1.0 - smooth));
            let reg = g.scale(lp_other, -T::from_f64(smooth));
            let loss = g.add(main, reg);
            let lv = g.value(loss).item().to_f64x();
            if !lv.is_finite() {
                return Err(Error::non_finite(
                    "discriminator training loss",
                    format!("iteration {} example {}", k, j),
                ));
            }
            let grads = g.backward(loss);
            for (name, gt) in binder.collect_grads(&grads) {
                grad_sum
                    .entry(name)
                    .and_modify(|acc| *acc = acc.add(&gt).unwrap())
                    .or_insert(gt);
            }
        }
        adam.begin_step();
        let inv_b = T::from_f64(1.0 / cfg.batch as f64);
        for (name, gsum) in grad_sum {
            adam.update(&name, disc.params_mut().get_mut(&name)?, &gsum.scale(inv_b))?;
        }
    }
    Ok(disc)
}

/// Fraction of examples whose top Yes/No answer matches the label.
pub fn classification_accuracy<T: Real>(
    disc: &ToyDiscriminator<T>,
    dataset: &[DiscExample<T>],
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let mut correct = 0usize;
    for ex in dataset {
        if predict_answer(disc, &ex.image, &ex.question)? == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn shape8() -> ImageShape {
        ImageShape::new(8, 8)
    }

    fn dummy_image() -> ImageTensor<f64> {
        Tensor::zeros(shape8().dims())
    }

    fn q_tokens() -> TokenSequence {
        Question::AttributePresence {
            color: NamedColor::Red,
        }
        .tokenize()
        .unwrap()
    }

    #[test]
    fn certain_answer_has_zero_loss() {
        let disc = MockDiscriminator::yes_no(shape8(), &[1.0]);
        let query = VqaQuery {
            question: q_tokens(),
            answer: TokenSequence::new(vec![TOK_YES]).unwrap(),
            overlay: None,
        };
        let loss = vqa_loss(&disc, &dummy_image(), &query).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(answer_probability(loss), 1.0);
    }

    #[test]
    fn half_probability_yes_costs_ln2() {
        let disc = MockDiscriminator::yes_no(shape8(), &[0.5]);
        let query = VqaQuery {
            question: q_tokens(),
            answer: TokenSequence::new(vec![TOK_YES]).unwrap(),
            overlay: None,
        };
        let loss = vqa_loss(&disc, &dummy_image(), &query).unwrap();
        assert!((loss - 0.693147).abs() < 1e-6, "got {}", loss);
        assert!((answer_probability(loss) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn two_token_answer_chains_stepwise_probabilities() {
        // steps: P(Yes)=0.8 then P(No)=0.5
        let disc = MockDiscriminator::yes_no(shape8(), &[0.8, 0.5]);
        let query = VqaQuery {
            question: q_tokens(),
            answer: TokenSequence::new(vec![TOK_YES, TOK_NO]).unwrap(),
            overlay: None,
        };
        let loss = vqa_loss(&disc, &dummy_image(), &query).unwrap();
        assert!((loss - 0.916291).abs() < 1e-6, "got {}", loss);
        assert!((answer_probability(loss) - 0.4).abs() < 1e-9);
    }

    #[test]
    fn loss_decomposes_into_teacher_forced_steps() {
        let disc = MockDiscriminator::yes_no(shape8(), &[0.7, 0.2]);
        let q = q_tokens();
        let full = VqaQuery {
            question: q.clone(),
            answer: TokenSequence::new(vec![TOK_YES, TOK_NO]).unwrap(),
            overlay: None,
        };
        let img = dummy_image();
        let total = vqa_loss(&disc, &img, &full).unwrap();
        // step 1 alone
        let s1 = vqa_loss(
            &disc,
            &img,
            &VqaQuery {
                question: q.clone(),
                answer: TokenSequence::new(vec![TOK_YES]).unwrap(),
                overlay: None,
            },
        )
        .unwrap();
        // step 2 with the prefix teacher-forced: build by hand
        let mut g = Graph::new();
        let img_n = g.constant(img.clone());
        let mut binder = PlainBinder::frozen();
        let logits = Discriminator::<f64>::next_token_logits(
            &disc,
            &mut g,
            img_n,
            &q,
            &[TOK_YES],
            &mut binder,
        )
        .unwrap();
        let lp = g.log_softmax(logits);
        let s2 = -g.value(lp).data()[TOK_NO as usize];
        assert!((total - (s1 + s2)).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_token_gives_floored_finite_loss() {
        let disc = MockDiscriminator::yes_no(shape8(), &[1.0]);
        let query = VqaQuery {
            question: q_tokens(),
            answer: TokenSequence::new(vec![TOK_NO]).unwrap(),
            overlay: None,
        };
        let loss: f64 = vqa_loss(&disc, &dummy_image(), &query).unwrap();
        assert!(loss.is_finite());
        assert!((loss - (-(1e-12f64.ln()))).abs() < 1e-6);
        assert!(answer_probability(loss) < 1e-11);

        // with the floor disabled the sentinel is +inf, not NaN
        let mut g = Graph::new();
        let img = g.constant(dummy_image());
        let mut binder = PlainBinder::frozen();
        let node = vqa_loss_node(&mut g, &disc, img, &query, 0.0, &mut binder).unwrap();
        let raw = g.value(node).item();
        assert!(raw.is_infinite() && raw > 0.0);
        assert_eq!(answer_probability(raw), 0.0);
    }

    #[test]
    fn margin_matches_definition_and_probabilities() {
        let disc = MockDiscriminator::yes_no(shape8(), &[0.9]);
        let img = dummy_image();
        let q = q_tokens();
        let m = yes_no_margin(&disc, &img, &q).unwrap();
        assert!((m - 0.8).abs() < 1e-9);
        // cross-operation consistency for single-token answers
        let yes_q = VqaQuery {
            question: q.clone(),
            answer: TokenSequence::new(vec![TOK_YES]).unwrap(),
            overlay: None,
        };
        let no_q = VqaQuery {
            question: q.clone(),
            answer: TokenSequence::new(vec![TOK_NO]).unwrap(),
            overlay: None,
        };
        let py = answer_probability(vqa_loss(&disc, &img, &yes_q).unwrap());
        let pn = answer_probability(vqa_loss(&disc, &img, &no_q).unwrap());
        assert!((m - (py - pn)).abs() < 1e-9);
    }

    #[test]
    fn equal_probabilities_have_zero_margin() {
        let disc = MockDiscriminator::yes_no(shape8(), &[0.5]);
        let m = yes_no_margin(&disc, &dummy_image(), &q_tokens()).unwrap();
        assert!(m.abs() < 1e-12);
    }

    #[test]
    fn toy_disc_outputs_a_distribution() {
        let disc = ToyDiscriminator::<f64>::init(ToyDiscConfig::tiny(), &mut rng(1)).unwrap();
        let img = Tensor::randn(shape8().dims(), &mut rng(2));
        let mut g = Graph::new();
        let n = g.constant(img);
        let mut binder = PlainBinder::frozen();
        let logits = disc
            .next_token_logits(&mut g, n, &q_tokens(), &[], &mut binder)
            .unwrap();
        let lp = g.log_softmax(logits);
        let total: f64 = g.value(lp).data().iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn tiny_disc_is_under_1k_params() {
        let disc = ToyDiscriminator::<f64>::init(ToyDiscConfig::tiny(), &mut rng(3)).unwrap();
        assert!(
            disc.params().total_elements() <= 1000,
            "got {}",
            disc.params().total_elements()
        );
    }

    #[test]
    fn question_order_matters_for_depth() {
        let disc = ToyDiscriminator::<f64>::init(ToyDiscConfig::tiny(), &mut rng(4)).unwrap();
        let img = Tensor::randn(shape8().dims(), &mut rng(5));
        let ab = Question::DepthOrder {
            first: PointLabel::A,
            second: PointLabel::B,
        }
        .tokenize()
        .unwrap();
        let ba = Question::DepthOrder {
            first: PointLabel::B,
            second: PointLabel::A,
        }
        .tokenize()
        .unwrap();
        let m1 = yes_no_margin(&disc, &img, &ab).unwrap();
        let m2 = yes_no_margin(&disc, &img, &ba).unwrap();
        assert!((m1 - m2).abs() > 1e-9, "margins identical: {}", m1);
    }

    #[test]
    fn pixel_gradient_matches_finite_differences() {
        let disc = ToyDiscriminator::<f64>::init(ToyDiscConfig::tiny(), &mut rng(6)).unwrap();
        let img0 = Tensor::randn(shape8().dims(), &mut rng(7));
        let query = VqaQuery {
            question: q_tokens(),
            answer: TokenSequence::new(vec![TOK_YES]).unwrap(),
            overlay: None,
        };
        let mut g = Graph::new();
        let img_n = g.leaf(img0.clone(), true);
        let mut binder = PlainBinder::frozen();
        let loss = vqa_loss_node(&mut g, &disc, img_n, &query, DEFAULT_PROB_FLOOR, &mut binder)
            .unwrap();
        let grads = g.backward(loss);
        let analytic = grads.wrt(img_n);
        for &i in &[0usize, 17, 63, 100, 191] {
            let eps = 1e-6;
            let mut ip = img0.clone();
            ip.data_mut()[i] += eps;
            let mut im = img0.clone();
            im.data_mut()[i] -= eps;
            let lp = vqa_loss(&disc, &ip, &query).unwrap();
            let lm = vqa_loss(&disc, &im, &query).unwrap();
            let num = (lp - lm) / (2.0 * eps);
            let ana = analytic.data()[i];
            let denom = num.abs().max(ana.abs()).max(1e-8);
            assert!(
                (num - ana).abs() / denom < 1e-4,
                "pixel {}: numeric {} analytic {}",
                i,
                num,
                ana
            );
        }
    }

    #[test]
    fn idefics2_rendering_matches_reference_layout() {
        let out = format_question(&IDEFICS2_TEMPLATE, "Is the horizon aligned with the red line?")
            .unwrap();
        assert_eq!(
            out,
            "User: <image> Is the horizon aligned with the red line? Answer with Yes or No.<end_of_utterance>\nAssistant:"
        );
    }

    #[test]
    fn qwen_rendering_contains_required_markers() {
        let out = format_question(&QWEN25VL_TEMPLATE, "Is the sky blue?").unwrap();
        assert!(out.contains("<|im_start|>"));
        assert!(out.contains("<|vision_start|><|image_pad|><|vision_end|>"));
        assert!(out.ends_with("<|im_start|>assistant\n"));
    }

    #[test]
    fn rendering_is_pure() {
        let a = format_question(&IDEFICS2_TEMPLATE, "Q?").unwrap();
        let b = format_question(&IDEFICS2_TEMPLATE, "Q?").unwrap();
        assert_eq!(a, b);
        assert!(chat_template("idefics2").is_ok());
        assert!(chat_template("nonexistent").is_err());
    }

    #[test]
    fn coverage_check_demands_all_templates_and_labels() {
        let ex = DiscExample {
            image: dummy_image(),
            question: q_tokens(),
            label: Answer::Yes,
        };
        let err = check_dataset_coverage(&[ex]).unwrap_err();
        assert!(matches!(err, Error::Coverage(_)));
    }

    #[test]
    fn tokenization_is_canonical() {
        let q = Question::PaletteMatch {
            colors: vec![NamedColor::Red, NamedColor::Blue],
        };
        let toks = q.tokenize().unwrap();
        assert_eq!(
            toks.tokens(),
            &[
                TOK_TPL_PALETTE,
                NamedColor::Red.token(),
                NamedColor::Blue.token(),
                TOK_PAD
            ]
        );
        assert_eq!(value_token(0.0), TOK_VAL_BASE);
        assert_eq!(value_token(1.0), TOK_VAL_BASE + 15);
        assert_eq!(value_token(0.5), TOK_VAL_BASE + 8);
    }
}
