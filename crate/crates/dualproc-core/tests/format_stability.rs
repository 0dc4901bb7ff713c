//! Byte-level stability of externally visible formats: chat prompts,
//! adapter files, trace files, and checkpoint round-trips.

use dualproc_core::ckpt::PayloadMode;
use dualproc_core::distill::{DistillTrace, TraceRecord};
use dualproc_core::flow::{PatchMixer, PatchMixerConfig};
use dualproc_core::lora::{init_adapter, load_adapter, save_adapter, LoraConfig, TargetSelector};
use dualproc_core::rng::stream;
use dualproc_core::vqa::{chat_template, format_question, Question, CHAT_TEMPLATES};

#[test]
fn chat_prompts_match_golden_files_byte_for_byte() {
    let q = Question::LineAlignment { row_frac: 0.5 }.text();
    for (tpl_name, golden) in [
        ("idefics2", include_str!("golden/idefics2.txt")),
        ("qwen2.5-vl", include_str!("golden/qwen2.5-vl.txt")),
    ] {
        let tpl = chat_template(tpl_name).unwrap();
        let rendered = format_question(tpl, &q).unwrap();
        assert_eq!(
            rendered.as_bytes(),
            golden.as_bytes(),
            "template {} drifted from its golden file",
            tpl_name
        );
    }
}

#[test]
fn template_catalog_is_closed() {
    assert_eq!(CHAT_TEMPLATES.len(), 2);
    assert!(chat_template("idefics2").is_ok());
    assert!(chat_template("qwen2.5-vl").is_ok());
    assert!(chat_template("llava").is_err());
}

#[test]
fn adapter_file_round_trip_is_bit_stable() {
    let model = PatchMixer::<f32>::init(PatchMixerConfig::tiny(), &mut stream(3, 0, 0)).unwrap();
    let adapter = init_adapter(
        &model,
        LoraConfig {
            rank: 2,
            alpha: 8.0,
            init_scale: 0.02,
        },
        TargetSelector::All2d,
        &mut stream(4, 0, 0),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a1.json");
    let p2 = dir.path().join("a2.json");
    save_adapter(&adapter, &p1).unwrap();
    let loaded = load_adapter::<f32>(&p1).unwrap();
    save_adapter(&loaded, &p2).unwrap();
    let b1 = std::fs::read(&p1).unwrap();
    let b2 = std::fs::read(&p2).unwrap();
    assert_eq!(b1, b2, "save, load, save changed adapter bytes");
    assert_eq!(adapter.max_abs_diff(&loaded).unwrap(), 0.0);
}

#[test]
fn checkpoint_round_trip_preserves_params_exactly() {
    // the checkpoint payload encoding is f32, so f32 models round-trip
    // bitwise and resaves are byte-stable
    let model = PatchMixer::<f32>::init(PatchMixerConfig::tiny(), &mut stream(9, 0, 0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("gen1.ckpt.json");
    let p2 = dir.path().join("gen2.ckpt.json");
    model.save(&p1, PayloadMode::Embedded).unwrap();
    let back = PatchMixer::<f32>::load(&p1).unwrap();
    assert_eq!(model.params().max_abs_diff(back.params()), 0.0);
    assert_eq!(model.config(), back.config());
    back.save(&p2, PayloadMode::Embedded).unwrap();
    assert_eq!(
        std::fs::read(&p1).unwrap(),
        std::fs::read(&p2).unwrap(),
        "resave changed checkpoint bytes"
    );
    // f64 params survive the f32 payload to within single precision
    let wide = PatchMixer::<f64>::init(PatchMixerConfig::tiny(), &mut stream(9, 0, 0)).unwrap();
    let pw = dir.path().join("gen64.ckpt.json");
    wide.save(&pw, PayloadMode::Embedded).unwrap();
    let wide_back = PatchMixer::<f64>::load(&pw).unwrap();
    assert!(wide.params().max_abs_diff(wide_back.params()) < 1e-6);
}

#[test]
fn trace_jsonl_round_trip_is_exact() {
    let records = vec![
        TraceRecord {
            iter: 0,
            mean_vqa_loss: 0.916290731874155,
            mean_answer_probability: 0.4,
            grad_norm: 1.25e-3,
            wall_ms: 0.028867999999999998,
        },
        TraceRecord {
            iter: 1,
            mean_vqa_loss: std::f64::consts::LN_2,
            mean_answer_probability: 0.9999999999999999,
            grad_norm: 7.213536980e-9,
            wall_ms: 1e-6,
        },
    ];
    let trace = DistillTrace {
        records,
        early_stopped: false,
    };
    let back = DistillTrace::from_jsonl(&trace.to_jsonl()).unwrap();
    assert_eq!(back, trace.records);
}
