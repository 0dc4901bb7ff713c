//! Tuning probe for the end-to-end pipeline: pretrains the generator on
//! scene renders, trains the rater, then reports base-model satisfaction
//! rates and a distillation trace per task. Not part of the test suite.
//!
//! Usage: probe [judge|gen|disc|distill|all] [--fresh]
//! Trained models are cached under target/probe/ keyed by a config tag.

use std::path::PathBuf;
use std::time::Instant;

use dualproc_core::ckpt::PayloadMode;
use dualproc_core::distill::{
    distill, generate_base_images, score_seeds, seed_noise, DistillTask, NoiseTime,
    OptimizerConfig,
};
use dualproc_core::eval::{estimate_horizon, judge_generated_image, mmd_quality};
use dualproc_core::flow::{
    pretrain, PatchMixer, PatchMixerConfig, PretrainConfig, ReflowConfig, SamplingSchedule,
};
use dualproc_core::lora::{init_adapter, LoraConfig, TargetSelector};
use dualproc_core::overlay::{OverlaySpec, RED};
use dualproc_core::rng::stream;
use dualproc_core::synthworld::{
    render, sample_case, sample_scene, ConditionId, QaCase, TaskFamily, CONDITIONS,
    PALETTE_STRIP_FRAC, TASK_FAMILIES,
};
use dualproc_core::tensor::{ImageShape, Tensor};
use dualproc_core::vqa::{
    classification_accuracy, train_toy_discriminator, Answer, DiscTrainConfig, NamedColor,
    Question, TokenSequence, ToyDiscConfig, ToyDiscriminator, VqaQuery,
};

const GEN_TAG: &str = "c";
const DISC_TAG: &str = "b";

const CFM_ITERS: usize = 8000;
const REFLOW_ITERS: usize = 6000;
const REFLOW_PAIRS: usize = 2048;
const DISC_PER_FAMILY: usize = 1000;
const DISC_ITERS: usize = 8000;
const DISC_NOISE: f64 = 0.08;

fn cache_dir() -> PathBuf {
    let d = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/probe");
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let phase = args
        .iter()
        .skip(1)
        .find(|a| !a.starts_with("--"))
        .cloned()
        .unwrap_or_else(|| "all".into());
    let fresh = args.iter().any(|a| a == "--fresh");
    let t0 = Instant::now();

    if phase == "judge" || phase == "all" {
        judge_phase();
    }
    let need_model = matches!(phase.as_str(), "gen" | "distill" | "all");
    let need_disc = matches!(phase.as_str(), "disc" | "distill" | "all");
    let model = need_model.then(|| gen_phase(fresh, phase != "distill"));
    let disc = need_disc.then(|| disc_phase(fresh, true));
    if phase == "distill" || phase == "all" {
        distill_phase(model.as_ref().unwrap(), disc.as_ref().unwrap());
    }
    println!("[probe] total {:.1}s", t0.elapsed().as_secs_f64());
}

// ---------------------------------------------------------------------------
// judge calibration on ground-truth renders
// ---------------------------------------------------------------------------

fn judge_phase() {
    let shape = ImageShape::new(32, 32);
    let mut err_sum = 0.0;
    let mut low_conf = 0usize;
    for i in 0..64u64 {
        let scene = sample_scene(ConditionId::Landscape, 9_000 + i);
        let img = render::<f32>(&scene, shape).unwrap();
        let est = estimate_horizon(&img).unwrap();
        err_sum += (est.row_frac - scene.horizon_row_frac.unwrap()).abs();
        low_conf += est.low_confidence as usize;
    }
    println!(
        "[probe] real horizon: mean err {:.4}  low-conf {}/64",
        err_sum / 64.0,
        low_conf
    );

    // library judge vs the variance-gated candidate, on clean renders
    let mut lib = [0usize; 2];
    let mut cand = [0usize; 2];
    for i in 0..128u64 {
        let case = sample_case(TaskFamily::Palette, 0x7e57, i).unwrap();
        let img = render::<f32>(&case.scene, shape).unwrap();
        let palette = match &case.question {
            Question::PaletteMatch { colors } => colors.clone(),
            _ => unreachable!(),
        };
        let want_yes = case.answer == Answer::Yes;
        lib[(i % 2) as usize] += judge_generated_image(&img, &case).unwrap() as usize;
        cand[(i % 2) as usize] += (candidate_palette_yes(&img, &palette) == want_yes) as usize;
    }
    println!(
        "[probe] palette judges on renders (agree yes/no out of 64): lib {}/{}  candidate {}/{}",
        lib[0], lib[1], cand[0], cand[1]
    );
}

/// Candidate palette judge: over non-overlapping 4x4 blocks, ignore blocks
/// with high per-channel variance (edges), demand the flat blocks cover the
/// palette and make up at least half the image.
fn candidate_palette_yes(img: &Tensor<f32>, palette: &[NamedColor]) -> bool {
    let (cov, flat) = block_stats(img, palette, 0.3);
    flat >= 0.5 && cov >= 1.0
}

/// (covered-fraction among flat windows, flat-window fraction) with flatness
/// threshold `flat_std` on per-channel standard deviation. Windows overlap
/// at stride 1 so small pure regions cannot hide between grid cells.
fn block_stats(img: &Tensor<f32>, palette: &[NamedColor], flat_std: f64) -> (f64, f64) {
    let shape = ImageShape::new(32, 32);
    let d = img.data();
    let tol = dualproc_core::synthworld::COLOR_TOL * 1.5;
    let (mut covered, mut flat, mut total) = (0usize, 0usize, 0usize);
    for y0 in 0..29 {
        for x0 in 0..29 {
            let mut mean = [0.0f64; 3];
            let mut sq = [0.0f64; 3];
            for c in 0..3 {
                for dy in 0..4 {
                    for dx in 0..4 {
                        let v = d[shape.index(c, y0 + dy, x0 + dx)] as f64;
                        mean[c] += v;
                        sq[c] += v * v;
                    }
                }
                mean[c] /= 16.0;
                sq[c] = (sq[c] / 16.0 - mean[c] * mean[c]).max(0.0);
            }
            total += 1;
            if sq.iter().all(|&v| v.sqrt() < flat_std) {
                flat += 1;
                if palette
                    .iter()
                    .any(|p| (0..3).all(|c| (mean[c] - p.rgb()[c]).abs() <= tol))
                {
                    covered += 1;
                }
            }
        }
    }
    let cov = if flat == 0 {
        0.0
    } else {
        covered as f64 / flat as f64
    };
    (cov, flat as f64 / total as f64)
}

// ---------------------------------------------------------------------------
// generator pretraining with staged quality reporting
// ---------------------------------------------------------------------------

fn gen_phase(fresh: bool, verbose: bool) -> PatchMixer<f32> {
    let shape = ImageShape::new(32, 32);
    let cfm_path = cache_dir().join(format!("gen_cfm_{GEN_TAG}.json"));
    let rf_path = cache_dir().join(format!("gen_rf_{GEN_TAG}.json"));

    // landscapes carry the most structural variation (horizon position),
    // so they get a double share of the training mix
    let source = |rng: &mut rand_chacha::ChaCha8Rng| {
        use rand::Rng;
        let cond_ix = match rng.random_range(0..5usize) {
            0 | 1 => 0,
            k => k - 1,
        };
        let scene_seed: u64 = rng.random();
        let scene = sample_scene(CONDITIONS[cond_ix], scene_seed);
        Ok((render::<f32>(&scene, shape)?, cond_ix))
    };

    let mut model = if !fresh && cfm_path.exists() {
        PatchMixer::<f32>::load(&cfm_path).unwrap()
    } else {
        let mut m =
            PatchMixer::<f32>::init(PatchMixerConfig::default(), &mut stream(0x5eed, 0, 0))
                .unwrap();
        let t = Instant::now();
        let report = pretrain(
            &mut m,
            source,
            PretrainConfig {
                iters: CFM_ITERS,
                ..PretrainConfig::default()
            },
            None,
        )
        .unwrap();
        let head: f64 = report.cfm_losses.iter().take(20).sum::<f64>() / 20.0;
        let tail: f64 = report.cfm_losses.iter().rev().take(50).sum::<f64>() / 50.0;
        println!(
            "[probe] cfm {} iters {:.0}s: loss {:.1} -> {:.1}",
            CFM_ITERS,
            t.elapsed().as_secs_f64(),
            head,
            tail
        );
        m.save(&cfm_path, PayloadMode::Sidecar).unwrap();
        m
    };

    if verbose {
        println!("[probe] teacher (8-step) samples after matching phase:");
        sample_report(&model, 8);
    }

    let model = if !fresh && rf_path.exists() {
        PatchMixer::<f32>::load(&rf_path).unwrap()
    } else {
        let t = Instant::now();
        let report = pretrain(
            &mut model,
            source,
            PretrainConfig {
                iters: 0,
                ..PretrainConfig::default()
            },
            Some(ReflowConfig {
                iters: REFLOW_ITERS,
                n_pairs: REFLOW_PAIRS,
                ..ReflowConfig::default()
            }),
        )
        .unwrap();
        let tail: f64 = report.reflow_losses.iter().rev().take(50).sum::<f64>() / 50.0;
        println!(
            "[probe] reflow {} iters {:.0}s: tail loss {:.1}",
            REFLOW_ITERS,
            t.elapsed().as_secs_f64(),
            tail
        );
        model.save(&rf_path, PayloadMode::Sidecar).unwrap();
        model
    };

    if verbose {
        println!("[probe] one-step samples after rectification:");
        sample_report(&model, 1);
    }
    model
}

/// MMD per condition plus image descriptions for the two task conditions.
fn sample_report(model: &PatchMixer<f32>, steps: usize) {
    let shape = ImageShape::new(32, 32);
    let schedule = if steps == 1 {
        SamplingSchedule::single_step()
    } else {
        SamplingSchedule::uniform(steps)
    };
    for cond in CONDITIONS {
        let gen: Vec<Tensor<f32>> = (0..32u64)
            .map(|i| {
                let eps = seed_noise(model, 0xbeef, i);
                model.sample(&schedule, &eps, cond.index(), None).unwrap()
            })
            .collect();
        let real: Vec<Tensor<f32>> = (0..32u64)
            .map(|i| render::<f32>(&sample_scene(cond, 5_000 + i), shape).unwrap())
            .collect();
        let mmd = mmd_quality(&gen, &real, 42).unwrap();
        let real_mmd = {
            let real2: Vec<Tensor<f32>> = (0..32u64)
                .map(|i| render::<f32>(&sample_scene(cond, 6_000 + i), shape).unwrap())
                .collect();
            mmd_quality(&real2, &real, 42).unwrap()
        };
        println!(
            "[probe]   {:?}: mmd {:.4} (real-vs-real floor {:.4})",
            cond, mmd, real_mmd
        );
        if cond == ConditionId::Landscape || cond == ConditionId::ColoredScene {
            for im in gen.iter().take(2) {
                describe_image(im, cond);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// rater training
// ---------------------------------------------------------------------------

fn disc_phase(fresh: bool, verbose: bool) -> ToyDiscriminator<f32> {
    let shape = ImageShape::new(32, 32);
    let path = cache_dir().join(format!("disc_{DISC_TAG}.json"));
    let disc = if !fresh && path.exists() {
        ToyDiscriminator::<f32>::load(&path).unwrap()
    } else {
        let t = Instant::now();
        let train_set =
            dualproc_core::synthworld::build_disc_dataset::<f32>(shape, DISC_PER_FAMILY, 0xabc)
                .unwrap();
        let d = train_toy_discriminator(
            &train_set,
            DiscTrainConfig {
                arch: ToyDiscConfig {
                    d_img: 16,
                    ..ToyDiscConfig::default()
                },
                iters: DISC_ITERS,
                input_noise_std: DISC_NOISE,
                ..DiscTrainConfig::default()
            },
        )
        .unwrap();
        println!(
            "[probe] disc {:.0}s: train acc {:.3}",
            t.elapsed().as_secs_f64(),
            classification_accuracy(&d, &train_set).unwrap()
        );
        d.save(&path, PayloadMode::Sidecar).unwrap();
        d
    };
    if verbose {
        let held = dualproc_core::synthworld::build_disc_dataset::<f32>(shape, 32, 0xdef).unwrap();
        let total = classification_accuracy(&disc, &held).unwrap();
        print!("[probe] disc held-out acc {total:.3}  per family:");
        for (fi, fam) in TASK_FAMILIES.iter().enumerate() {
            let sub: Vec<_> = held
                .iter()
                .enumerate()
                .filter(|(i, _)| i % TASK_FAMILIES.len() == fi)
                .map(|(_, e)| e.clone())
                .collect();
            print!(
                "  {} {:.3}",
                fam.name(),
                classification_accuracy(&disc, &sub).unwrap()
            );
        }
        println!();
    }
    disc
}

// ---------------------------------------------------------------------------
// distillation
// ---------------------------------------------------------------------------

fn distill_phase(model: &PatchMixer<f32>, disc: &ToyDiscriminator<f32>) {
    let tasks = [horizon_task(), palette_task()];
    for (task, qa) in &tasks {
        let seed_indices: Vec<u64> = (0..task.n_seeds as u64).collect();
        let base_imgs =
            generate_base_images(model, None, task.cond, task.base_seed, &seed_indices).unwrap();
        let sat: usize = base_imgs
            .iter()
            .map(|im| judge_generated_image(im, qa).unwrap() as usize)
            .sum();
        let base_probs = score_seeds(model, None, disc, task, &seed_indices).unwrap();
        let mean_p: f64 = base_probs.iter().sum::<f64>() / base_probs.len() as f64;
        println!(
            "[probe] base {:?}: oracle satisfaction {}/{}  mean answer prob {:.3}",
            task.cond,
            sat,
            base_imgs.len(),
            mean_p
        );

        let run = Instant::now();
        let adapter = init_adapter(
            model,
            LoraConfig::default(),
            TargetSelector::All2d,
            &mut stream(task.base_seed, 0, 77),
        )
        .unwrap();
        let cfg = OptimizerConfig::default();
        let (tuned, trace) = distill(task, model, adapter, disc, &cfg, None).unwrap();
        let n = trace.records.len();
        for r in trace.records.iter().step_by((n / 6).max(1)) {
            println!(
                "[probe]   it {:>3}  loss {:.4}  prob {:.3}  gnorm {:.2e}",
                r.iter, r.mean_vqa_loss, r.mean_answer_probability, r.grad_norm
            );
        }
        let last = trace.records.last().unwrap();
        let tuned_imgs =
            generate_base_images(model, Some(&tuned), task.cond, task.base_seed, &seed_indices)
                .unwrap();
        let sat: usize = tuned_imgs
            .iter()
            .map(|im| judge_generated_image(im, qa).unwrap() as usize)
            .sum();
        let held: Vec<u64> = (task.n_seeds as u64..task.n_seeds as u64 + 8).collect();
        let base_held = score_seeds(model, None, disc, task, &held).unwrap();
        let tuned_held = score_seeds(model, Some(&tuned), disc, task, &held).unwrap();
        let mb: f64 = base_held.iter().sum::<f64>() / 8.0;
        let mt: f64 = tuned_held.iter().sum::<f64>() / 8.0;
        println!(
            "[probe] distill {:?} {:.0}s: final prob {:.3} (early stop {})  oracle {}/{}  held-out {:.3} -> {:.3}",
            task.cond,
            run.elapsed().as_secs_f64(),
            last.mean_answer_probability,
            trace.early_stopped,
            sat,
            tuned_imgs.len(),
            mb,
            mt
        );
        for im in tuned_imgs.iter().take(3) {
            describe_image(im, task.cond);
        }
    }
}

// ---------------------------------------------------------------------------
// image description helpers
// ---------------------------------------------------------------------------

/// Pixel-range stats, per-task judge internals, and a coarse color map.
fn describe_image(img: &Tensor<f32>, cond: ConditionId) {
    let d = img.data();
    let (mut lo, mut hi, mut mean) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for &v in d {
        let v = v as f64;
        lo = lo.min(v);
        hi = hi.max(v);
        mean += v;
    }
    mean /= d.len() as f64;
    let mut head = String::new();
    match cond {
        ConditionId::Landscape => {
            let est = estimate_horizon(img).unwrap();
            head = format!(
                "horizon est {:.3} strength {:.3} low_conf {}",
                est.row_frac, est.strength, est.low_confidence
            );
        }
        ConditionId::ColoredScene => {
            let palette = [NamedColor::Blue, NamedColor::Green, NamedColor::White];
            let (cov, flat) = block_stats(img, &palette, 0.3);
            head = format!(
                "flat-block coverage {:.2}  flat frac {:.2}  candidate {}",
                cov,
                flat,
                candidate_palette_yes(img, &palette)
            );
        }
        _ => {}
    }
    println!(
        "[probe]   img range [{:.2},{:.2}] mean {:.2}  {}",
        lo, hi, mean, head
    );
    let shape = ImageShape::new(32, 32);
    let letters = ['R', 'G', 'B', 'Y', 'C', 'M', 'W', 'K'];
    let named = [
        NamedColor::Red,
        NamedColor::Green,
        NamedColor::Blue,
        NamedColor::Yellow,
        NamedColor::Cyan,
        NamedColor::Magenta,
        NamedColor::White,
        NamedColor::Black,
    ];
    for by in 0..16 {
        let mut row = String::from("[probe]     ");
        for bx in 0..16 {
            let mut m = [0.0f64; 3];
            for c in 0..3 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        m[c] += d[shape.index(c, by * 2 + dy, bx * 2 + dx)] as f64;
                    }
                }
                m[c] /= 4.0;
            }
            let (mut best, mut best_d) = (0usize, f64::INFINITY);
            for (i, n) in named.iter().enumerate() {
                let rgb = n.rgb();
                let dist: f64 = (0..3).map(|c| (m[c] - rgb[c]).powi(2)).sum();
                if dist < best_d {
                    best_d = dist;
                    best = i;
                }
            }
            // lowercase marks blends far from every reference color
            if best_d > 0.8 {
                row.push(letters[best].to_ascii_lowercase());
            } else {
                row.push(letters[best]);
            }
        }
        println!("{row}");
    }
}

// ---------------------------------------------------------------------------
// task definitions
// ---------------------------------------------------------------------------

fn horizon_task() -> (DistillTask, QaCase) {
    let question = Question::LineAlignment { row_frac: 0.5 };
    let overlay = OverlaySpec::LineMark {
        row_frac: 0.5,
        thickness_px: 1,
        color: RED,
    };
    let task = DistillTask {
        cond: ConditionId::Landscape,
        query: VqaQuery {
            question: question.clone().tokenize().unwrap(),
            answer: TokenSequence::new(vec![Answer::Yes.token()]).unwrap(),
            overlay: Some(overlay.clone()),
        },
        n_seeds: 32,
        base_seed: 0xa11d,
        noise_time: NoiseTime::Fixed(1.0),
    };
    // scene/answer fields only matter to the judge
    let qa = QaCase {
        condition: ConditionId::Landscape,
        scene: sample_scene(ConditionId::Landscape, 1),
        question,
        answer: Answer::Yes,
        overlay: Some(overlay),
    };
    (task, qa)
}

fn palette_task() -> (DistillTask, QaCase) {
    let colors = vec![NamedColor::Blue, NamedColor::Green, NamedColor::White];
    let question = Question::PaletteMatch {
        colors: colors.clone(),
    };
    let overlay = OverlaySpec::PaletteStrip {
        colors: colors.iter().map(|c| c.rgb()).collect(),
        strip_height_frac: PALETTE_STRIP_FRAC,
    };
    let task = DistillTask {
        cond: ConditionId::ColoredScene,
        query: VqaQuery {
            question: question.clone().tokenize().unwrap(),
            answer: TokenSequence::new(vec![Answer::Yes.token()]).unwrap(),
            overlay: Some(overlay.clone()),
        },
        n_seeds: 32,
        base_seed: 0xca10,
        noise_time: NoiseTime::Fixed(1.0),
    };
    let qa = QaCase {
        condition: ConditionId::ColoredScene,
        scene: sample_scene(ConditionId::ColoredScene, 1),
        question,
        answer: Answer::Yes,
        overlay: Some(overlay),
    };
    (task, qa)
}
