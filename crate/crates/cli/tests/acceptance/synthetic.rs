//! Criteria on the generated focus-entity task, driven through the same
//! entry points as the `knit` binary.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use knit::numcore::{checkpoint, Precision};
use knit::tokenize::{load_annotations, Label};
use knit::train::{Method, Model};
use knit_cli::{cmd_analyze, cmd_gen_synth, cmd_run, Analysis, AnalyzeKind, AnalyzeOptions, ExperimentPlan, Summary};
use tempfile::TempDir;

use crate::{ensure, Outcome};

const SPEC: &str = "\
train = 2000
dev = 500
test = 500
seed = 7
";

const PLAN: &str = "\
methods = baseline, KT, KT-Attn, KT-Emb, KG-Emb
lr = 3e-3
lambda = 0.3
epochs = 5
batch_size = 32
d_model = 32
layers = 2
heads = 2
ff = 64
max_positions = 64
max_len = 64
dropout = 0
train = data/train.jsonl
dev = data/dev.jsonl
test = data/test.jsonl
dictionary = data/dictionary.tsv
embeddings = data/embeddings.txt
out = out
";

struct Experiment {
    dir: TempDir,
    plan: ExperimentPlan,
    summary: Summary,
    secs: f64,
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn setup() -> Result<Experiment, String> {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(err)?;
    std::fs::write(dir.path().join("spec.txt"), SPEC).map_err(err)?;
    cmd_gen_synth(&dir.path().join("spec.txt"), &dir.path().join("data")).map_err(err)?;
    let plan_path = dir.path().join("plan.txt");
    std::fs::write(&plan_path, format!("{PLAN}workers = {}\n", workers())).map_err(err)?;
    let plan = ExperimentPlan::load(&plan_path).map_err(err)?;
    let summary = cmd_run(&plan).map_err(err)?;
    Ok(Experiment {
        dir,
        plan,
        summary,
        secs: start.elapsed().as_secs_f64(),
    })
}

fn experiment() -> Result<&'static Experiment, String> {
    static EXP: OnceLock<Result<Experiment, String>> = OnceLock::new();
    EXP.get_or_init(setup).as_ref().map_err(|e| format!("experiment setup failed: {e}"))
}

fn entity_ids(path: &Path) -> Result<BTreeSet<String>, String> {
    let mut ids = BTreeSet::new();
    for ex in load_annotations(path).map_err(err)? {
        for s in &ex.seq.spans {
            ids.insert(s.entity_id.clone());
            ids.insert(s.graph_id().to_string());
        }
    }
    Ok(ids)
}

/// Pool disjointness and labels, read back from the written files.
fn audit(data: &Path) -> Result<(), String> {
    let train = entity_ids(&data.join("train.jsonl"))?;
    for split in ["dev", "test"] {
        let ids = entity_ids(&data.join(format!("{split}.jsonl")))?;
        let shared = train.intersection(&ids).count();
        ensure!(shared == 0, "{shared} {split} entities also occur in train");
    }
    let dict = std::fs::read_to_string(data.join("dictionary.tsv")).map_err(err)?;
    let marker = |id: &str| {
        dict.lines()
            .find(|l| l.split('\t').next() == Some(id))
            .map(|l| l.split_whitespace().any(|w| w == "hot"))
    };
    for ex in load_annotations(&data.join("train.jsonl")).map_err(err)? {
        let focus = ex.seq.tokens.iter().position(|t| t == "this").ok_or("sentence without focus determiner")?;
        let span = ex.seq.spans.iter().find(|s| s.start > focus).ok_or("focus determiner without entity")?;
        let hot = marker(&span.entity_id).ok_or_else(|| format!("{} missing from dictionary", span.entity_id))?;
        ensure!(
            ex.label == Label::Number(f64::from(u8::from(hot))),
            "label {:?} disagrees with the dictionary entry of {}",
            ex.label,
            span.entity_id
        );
    }
    Ok(())
}

pub fn benefit() -> Outcome {
    let exp = experiment()?;
    audit(&exp.dir.path().join("data"))?;
    let median = |m: Method| exp.summary.row(m).map(|c| c.median).ok_or(format!("no row for {m}"));
    let base = median(Method::Baseline)?;
    ensure!(base <= 0.60, "baseline median accuracy {base:.3} > 0.60");
    let mut parts = vec![format!("baseline {base:.3}")];
    for m in [Method::Kt, Method::KtAttn, Method::KtEmb, Method::KgEmb] {
        let v = median(m)?;
        ensure!(v >= 0.90, "{m} median accuracy {v:.3} < 0.90");
        parts.push(format!("{m} {v:.3}"));
    }
    ensure!(exp.secs <= 900.0, "experiment took {:.0}s", exp.secs);
    Ok(format!("{} (5 seeds, {:.0}s incl. data generation)", parts.join(", "), exp.secs))
}

fn analyze(ckpt: &Path, kind: AnalyzeKind, out: &str, edit: impl FnOnce(&mut AnalyzeOptions)) -> Result<(Analysis, PathBuf), String> {
    let exp = experiment()?;
    let dir = exp.dir.path().join("analysis").join(out);
    let mut opts = AnalyzeOptions::new(kind, &dir);
    opts.workers = workers();
    edit(&mut opts);
    Ok((cmd_analyze(ckpt, &opts).map_err(err)?, dir))
}

pub fn mi_direction() -> Outcome {
    let exp = experiment()?;
    let base = exp.summary.model_path(Method::Baseline);
    let kt = exp.summary.model_path(Method::KtAttn);
    let (a, _) = analyze(&kt, AnalyzeKind::Mi, "mi", |o| o.baseline = Some(base.clone()))?;
    let Analysis::Mi { delta: Some(d), .. } = a else {
        return Err("mi analysis returned no delta".into());
    };
    let top = d.layers.last().ok_or("empty delta")?;
    ensure!(top.delta_y >= 0.05, "top-layer Δacc_y {:+.3} < +0.05", top.delta_y);

    let (s, _) = analyze(&base, AnalyzeKind::Mi, "mi_self", |o| o.baseline = Some(base.clone()))?;
    let Analysis::Mi { delta: Some(s), .. } = s else {
        return Err("self mi analysis returned no delta".into());
    };
    for l in &s.layers {
        ensure!(
            l.delta_x == 0.0 && l.delta_y == 0.0,
            "self delta at layer {} is ({}, {})",
            l.layer,
            l.delta_x,
            l.delta_y
        );
    }
    Ok(format!(
        "KT-Attn vs baseline top-layer Δacc_y {:+.3}; self deltas 0 at all {} layers",
        top.delta_y,
        s.layers.len()
    ))
}

fn model_checksum(ckpt: &Path) -> Result<String, String> {
    let bytes = std::fs::read(ckpt).map_err(err)?;
    Ok(match checkpoint::peek_precision(&bytes).map_err(err)? {
        Precision::F32 => Model::<f32>::load(ckpt).map_err(err)?.params.checksum(),
        Precision::F64 => Model::<f64>::load(ckpt).map_err(err)?.params.checksum(),
    })
}

pub fn gate_fidelity() -> Outcome {
    let exp = experiment()?;
    let ckpt = exp.summary.model_path(Method::KtAttn);
    let bytes = std::fs::read(&ckpt).map_err(err)?;
    let sum = model_checksum(&ckpt)?;
    let (_, dir) = analyze(&ckpt, AnalyzeKind::Diffmask, "diffmask", |o| o.heatmaps = usize::MAX)?;
    ensure!(std::fs::read(&ckpt).map_err(err)? == bytes, "checkpoint file changed");
    ensure!(model_checksum(&ckpt)? == sum, "model checksum changed");

    let fid = std::fs::read_to_string(dir.join("fidelity.csv")).map_err(err)?;
    let top: Vec<f64> = fid
        .lines()
        .last()
        .ok_or("empty fidelity.csv")?
        .split(',')
        .map(|v| v.parse().map_err(err))
        .collect::<Result<_, _>>()?;
    let (masked, divergence) = (top[1], top[2]);
    ensure!(divergence <= 0.05, "held-out mean divergence {divergence:.4} > 0.05");
    ensure!(masked >= 0.2, "top layer masks {:.1}% of tokens", masked * 100.0);

    let mut maps = 0;
    for entry in std::fs::read_dir(&dir).map_err(err)? {
        let path = entry.map_err(err)?.path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        if !(name.starts_with("heatmap_") && name.ends_with(".csv")) {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(err)?;
        let layers = text.lines().next().unwrap_or("").split(',').count() - 2;
        for line in text.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            let z: Vec<f64> = fields[fields.len() - layers..]
                .iter()
                .map(|v| v.parse().map_err(err))
                .collect::<Result<_, _>>()?;
            ensure!(z.windows(2).all(|w| w[1] <= w[0]), "{name}: gates increase with layer in row `{line}`");
        }
        maps += 1;
    }
    ensure!(maps > 0, "no heatmaps written");
    Ok(format!(
        "divergence {divergence:.4}, {:.1}% masked at top layer, {maps} heatmaps monotone, model unchanged",
        masked * 100.0
    ))
}

pub fn determinism() -> Outcome {
    let exp = experiment()?;
    let mut plan = exp.plan.clone();
    plan.paths.out = exp.dir.path().join("rerun");
    let again = cmd_run(&plan).map_err(err)?;
    let mut compared = 0;
    for name in ["summary.csv", "grid.csv"] {
        let a = std::fs::read(exp.summary.out.join(name)).map_err(err)?;
        let b = std::fs::read(again.out.join(name)).map_err(err)?;
        ensure!(a == b, "{name} differs between runs");
        compared += 1;
    }
    for entry in std::fs::read_dir(exp.summary.out.join("runs")).map_err(err)? {
        let path = entry.map_err(err)?.path();
        let other = again.out.join("runs").join(path.file_name().unwrap());
        ensure!(
            std::fs::read(&path).map_err(err)? == std::fs::read(&other).map_err(err)?,
            "{} differs between runs",
            path.display()
        );
        compared += 1;
    }
    Ok(format!("{compared} CSV files byte-identical across reruns"))
}
