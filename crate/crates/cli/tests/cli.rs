//! End-to-end runs of the command layer on a small synthetic task.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use knit::tokenize::load_annotations;
use knit::train::Method;
use knit_cli::{cmd_analyze, cmd_gen_synth, cmd_run, Analysis, AnalyzeKind, AnalyzeOptions, CliError, ExperimentPlan, Summary};
use tempfile::TempDir;

const SPEC: &str = "\
train = 160
dev = 40
test = 40
train_entities = 40
eval_entities = 20
seed = 3
";

const PLAN: &str = "\
methods = baseline, KT-Attn, KG-Emb
lr = 3e-3
lambda = 0.3
epochs = 2
batch_size = 16
d_model = 16
layers = 1
heads = 2
ff = 32
max_positions = 64
max_len = 64
dropout = 0
train = data/train.jsonl
dev = data/dev.jsonl
test = data/test.jsonl
dictionary = data/dictionary.tsv
embeddings = data/embeddings.txt
";

struct Fixture {
    dir: TempDir,
    summary: Summary,
}

fn write_plan(dir: &Path, name: &str, body: &str, out: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, format!("{body}out = {out}\n")).unwrap();
    p
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("spec.txt"), SPEC).unwrap();
        cmd_gen_synth(&dir.path().join("spec.txt"), &dir.path().join("data")).unwrap();
        let plan = ExperimentPlan::load(&write_plan(dir.path(), "plan.txt", PLAN, "out")).unwrap();
        let summary = cmd_run(&plan).unwrap();
        Fixture { dir, summary }
    })
}

fn analyze(ckpt: &Path, kind: AnalyzeKind, out: &str, edit: impl FnOnce(&mut AnalyzeOptions)) -> Result<(Analysis, PathBuf), CliError> {
    let dir = fixture().dir.path().join(out);
    let mut opts = AnalyzeOptions::new(kind, &dir);
    opts.probe.epochs = 2;
    opts.gates.epochs = 2;
    edit(&mut opts);
    cmd_analyze(ckpt, &opts).map(|a| (a, dir))
}

#[test]
fn run_writes_one_row_per_method() {
    let f = fixture();
    assert_eq!(f.summary.rows.len(), 3);
    for row in &f.summary.rows {
        assert_eq!(row.scores.len(), 5);
        let mut sorted = row.scores.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(row.median, sorted[2]);
        let ckpt = f.summary.model_path(row.method);
        assert!(ckpt.exists() && ckpt.with_extension("json").exists() && ckpt.with_extension("run.json").exists());
    }
    let csv = std::fs::read_to_string(f.summary.out.join("summary.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("method,accuracy,lr,lambda,scores"));
    assert_eq!(lines.count(), 3);
    let runs = std::fs::read_dir(f.summary.out.join("runs")).unwrap().count();
    assert_eq!(runs, 15);
}

#[test]
fn rerun_is_byte_identical() {
    let f = fixture();
    let plan = ExperimentPlan::load(&write_plan(f.dir.path(), "plan_again.txt", PLAN, "again")).unwrap();
    let again = cmd_run(&plan).unwrap();
    for name in ["summary.csv", "grid.csv"] {
        assert_eq!(
            std::fs::read(f.summary.out.join(name)).unwrap(),
            std::fs::read(again.out.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn missing_dictionary_fails_validation() {
    let f = fixture();
    let body = PLAN.replace("dictionary = data/dictionary.tsv\n", "");
    let err = ExperimentPlan::load(&write_plan(f.dir.path(), "plan_nodict.txt", &body, "nodict")).unwrap_err();
    assert!(matches!(err, CliError::Plan(_)), "{err}");
    assert!(err.to_string().contains("dictionary"), "{err}");
    assert!(!f.dir.path().join("nodict").join("runs").exists());
}

#[test]
fn unknown_plan_key_is_rejected() {
    let f = fixture();
    let body = format!("{PLAN}learning_rate = 1\n");
    let err = ExperimentPlan::load(&write_plan(f.dir.path(), "plan_typo.txt", &body, "typo")).unwrap_err();
    assert!(err.to_string().contains("learning_rate"), "{err}");
}

#[test]
fn synthetic_data_is_disjoint_and_deterministic() {
    let f = fixture();
    let data = f.dir.path().join("data");
    let ids = |split: &str| -> std::collections::BTreeSet<String> {
        load_annotations(&data.join(format!("{split}.jsonl")))
            .unwrap()
            .iter()
            .flat_map(|e| e.seq.spans.iter().map(|s| s.entity_id.clone()))
            .collect()
    };
    let (train, dev, test) = (ids("train"), ids("dev"), ids("test"));
    assert!(train.is_disjoint(&dev) && train.is_disjoint(&test) && dev.is_disjoint(&test));

    let again = f.dir.path().join("data_again");
    cmd_gen_synth(&f.dir.path().join("spec.txt"), &again).unwrap();
    for name in ["train.jsonl", "dev.jsonl", "test.jsonl", "dictionary.tsv", "embeddings.txt"] {
        assert_eq!(std::fs::read(data.join(name)).unwrap(), std::fs::read(again.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn mi_against_itself_is_zero() {
    let base = fixture().summary.model_path(Method::Baseline);
    let (a, dir) = analyze(&base, AnalyzeKind::Mi, "mi_self", |o| o.baseline = Some(base.clone())).unwrap();
    let Analysis::Mi { delta: Some(d), report } = a else {
        panic!("expected deltas");
    };
    assert_eq!(d.layers.len(), report.layers.len());
    assert!(d.layers.iter().all(|l| l.delta_x == 0.0 && l.delta_y == 0.0));
    assert!(dir.join("delta_mi.csv").exists() && dir.join("mi_baseline.csv").exists());
}

#[test]
fn diffmask_heatmaps_are_monotone() {
    let ckpt = fixture().summary.model_path(Method::KtAttn);
    let (a, dir) = analyze(&ckpt, AnalyzeKind::Diffmask, "diffmask", |o| o.heatmaps = 3).unwrap();
    let Analysis::Diffmask { heatmaps, .. } = a else {
        panic!("expected heatmaps");
    };
    assert!(!heatmaps.is_empty());
    for h in &heatmaps {
        for j in 0..h.tokens.len() {
            assert!(h.z.windows(2).all(|w| w[1][j] <= w[0][j]));
        }
    }
    for name in ["fidelity.csv", "gates.ckpt", "pos.csv", "pos.svg", "heatmap_0.csv", "heatmap_2.svg"] {
        assert!(dir.join(name).exists(), "{name}");
    }
    assert!(!dir.join("heatmap_3.csv").exists());
}

#[test]
fn mask_dump_writes_square_mask() {
    let ckpt = fixture().summary.model_path(Method::KtAttn);
    let (_, dir) = analyze(&ckpt, AnalyzeKind::MaskDump, "dump", |o| o.example = 1).unwrap();
    let pgm = std::fs::read(dir.join("mask_1.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5"));
    let csv = std::fs::read_to_string(dir.join("mask_1.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    let cols = rows[0].split(',').count();
    assert!(rows.iter().all(|r| r.split(',').count() == cols));
    assert!(std::fs::read_to_string(dir.join("mask_1.txt")).unwrap().contains("[SEP]"));
}

#[test]
fn mask_dump_rejects_embedding_models() {
    let ckpt = fixture().summary.model_path(Method::KgEmb);
    let err = analyze(&ckpt, AnalyzeKind::MaskDump, "dump_kg", |_| {}).unwrap_err();
    assert!(matches!(err, CliError::Mismatch(_)), "{err}");
}

#[test]
fn binary_reports_errors() {
    let out = Command::new(env!("CARGO_BIN_EXE_knit"))
        .args(["run", "/nonexistent/plan.txt"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let help = Command::new(env!("CARGO_BIN_EXE_knit")).arg("--help").output().unwrap();
    assert!(help.status.success());
    let text = String::from_utf8_lossy(&help.stdout);
    for cmd in ["run", "gen-synth", "analyze"] {
        assert!(text.contains(cmd), "{cmd}");
    }
}
