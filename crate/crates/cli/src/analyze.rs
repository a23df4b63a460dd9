//! `analyze`: probes, gate training and mask dumps on a saved model.
//!
//! Probes and gates are fitted on the development split and evaluated on
//! the test split; without a test split the development set is halved.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use knit::assemble::{build_visibility_mask, describe, mask_csv, mask_pgm};
use knit::diffmask::{compute_heatmap, fidelity, pos_aggregate, train_gates, Fidelity, GateConfig, MaskHeatmap, PosAggregate};
use knit::numcore::{checkpoint, Precision, Scalar};
use knit::probes::{delta_mi, probe_model, DeltaMI, MIProbeReport, ProbeConfig, ProbeData};
use knit::tokenize::{Example, Upos, Vocabulary};
use knit::train::{prepare_all, Method, Model, PrepareOptions, Prepared};

use crate::data::{load_vocab, Corpus, RunInfo};
use crate::error::{mkdir, write, CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnalyzeKind {
    Mi,
    Diffmask,
    MaskDump,
}

impl FromStr for AnalyzeKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mi" => Ok(AnalyzeKind::Mi),
            "diffmask" => Ok(AnalyzeKind::Diffmask),
            "mask-dump" => Ok(AnalyzeKind::MaskDump),
            other => Err(format!("unknown analysis `{other}` (expected mi, diffmask or mask-dump)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AnalyzeOptions {
    pub kind: AnalyzeKind,
    pub out: PathBuf,
    /// Reference model for MI deltas.
    pub baseline: Option<PathBuf>,
    pub workers: usize,
    /// Held-out example for `mask-dump`.
    pub example: usize,
    /// Number of held-out heatmaps written by `diffmask`.
    pub heatmaps: usize,
    pub probe: ProbeConfig,
    pub gates: GateConfig,
}

impl AnalyzeOptions {
    pub fn new(kind: AnalyzeKind, out: &Path) -> Self {
        AnalyzeOptions {
            kind,
            out: out.to_path_buf(),
            baseline: None,
            workers: 1,
            example: 0,
            heatmaps: 4,
            probe: ProbeConfig::default(),
            gates: GateConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Analysis {
    Mi {
        report: MIProbeReport,
        delta: Option<DeltaMI>,
    },
    Diffmask {
        fidelity: Fidelity,
        heatmaps: Vec<MaskHeatmap>,
        pos: PosAggregate,
    },
    MaskDump {
        example: usize,
        layout: String,
    },
}

/// A loaded model with the data it was trained on.
struct Loaded<S: Scalar> {
    model: Model<S>,
    info: RunInfo,
    corpus: Corpus,
    vocab: Vocabulary,
}

impl<S: Scalar> Loaded<S> {
    fn open(ckpt: &Path) -> Result<Self> {
        let model = Model::<S>::load(ckpt)?;
        let info = RunInfo::read(ckpt)?;
        let vocab = load_vocab(&info.vocab)?;
        if vocab.len() != model.net.cfg().vocab_size {
            return Err(CliError::Mismatch(format!(
                "{}: vocabulary has {} entries, model expects {}",
                ckpt.display(),
                vocab.len(),
                model.net.cfg().vocab_size
            )));
        }
        let corpus = Corpus::load(&info.paths)?;
        Ok(Loaded { model, info, corpus, vocab })
    }

    fn prepare(&self, examples: &[Example]) -> Result<Vec<Prepared>> {
        let opts = PrepareOptions {
            method: self.model.method,
            policy: self.info.policy()?,
            max_len: self.info.max_len.min(self.model.net.cfg().max_positions),
        };
        Ok(prepare_all(examples, opts, &self.corpus.store, &self.vocab, &self.model.labels)?.0)
    }

    fn split(&self) -> Result<(Vec<Prepared>, Vec<Prepared>)> {
        let (a, b) = self.corpus.analysis_split();
        Ok((self.prepare(a)?, self.prepare(b)?))
    }
}

fn precision(ckpt: &Path) -> Result<Precision> {
    let bytes = std::fs::read(ckpt).map_err(|e| CliError::Io(ckpt.to_path_buf(), e))?;
    Ok(checkpoint::peek_precision(&bytes)?)
}

pub fn cmd_analyze(ckpt: &Path, opts: &AnalyzeOptions) -> Result<Analysis> {
    mkdir(&opts.out)?;
    match precision(ckpt)? {
        Precision::F32 => analyze::<f32>(ckpt, opts),
        Precision::F64 => analyze::<f64>(ckpt, opts),
    }
}

fn analyze<S: Scalar>(ckpt: &Path, opts: &AnalyzeOptions) -> Result<Analysis> {
    let l = Loaded::<S>::open(ckpt)?;
    match opts.kind {
        AnalyzeKind::Mi => mi(&l, ckpt, opts),
        AnalyzeKind::Diffmask => diffmask(&l, opts),
        AnalyzeKind::MaskDump => mask_dump(&l, opts),
    }
}

fn probe_cfg(opts: &AnalyzeOptions) -> ProbeConfig {
    ProbeConfig {
        workers: opts.workers,
        ..opts.probe.clone()
    }
}

fn probe<S: Scalar>(l: &Loaded<S>, opts: &AnalyzeOptions) -> Result<MIProbeReport> {
    let (train, test) = l.split()?;
    let data = ProbeData { train: &train, test: &test };
    Ok(probe_model(&l.model, &l.model.method.to_string(), data, &probe_cfg(opts))?)
}

fn probe_file(ckpt: &Path, opts: &AnalyzeOptions) -> Result<(MIProbeReport, knit::train::LabelSpace)> {
    fn go<S: Scalar>(ckpt: &Path, opts: &AnalyzeOptions) -> Result<(MIProbeReport, knit::train::LabelSpace)> {
        let l = Loaded::<S>::open(ckpt)?;
        Ok((probe(&l, opts)?, l.model.labels.clone()))
    }
    match precision(ckpt)? {
        Precision::F32 => go::<f32>(ckpt, opts),
        Precision::F64 => go::<f64>(ckpt, opts),
    }
}

fn mi<S: Scalar>(l: &Loaded<S>, ckpt: &Path, opts: &AnalyzeOptions) -> Result<Analysis> {
    let report = probe(l, opts)?;
    report.write_csv(&opts.out.join(format!("mi_{}.csv", l.model.method)))?;
    let delta = match &opts.baseline {
        None => None,
        Some(b) => {
            let (base, labels) = probe_file(b, opts)?;
            if labels != l.model.labels {
                return Err(CliError::Mismatch(format!(
                    "{} and {} were trained on different label sets",
                    ckpt.display(),
                    b.display()
                )));
            }
            if base.method != report.method {
                base.write_csv(&opts.out.join(format!("mi_{}.csv", base.method)))?;
            }
            let d = delta_mi(&report, &base)?;
            write(&opts.out.join("delta_mi.csv"), d.csv())?;
            write(&opts.out.join("delta_mi.svg"), d.svg())?;
            Some(d)
        }
    };
    Ok(Analysis::Mi { report, delta })
}

fn fidelity_csv(f: &Fidelity) -> String {
    let mut s = String::from("layer,masked_fraction,mean_divergence,examples\n");
    for (l, m) in f.masked_fraction.iter().enumerate() {
        s.push_str(&format!("{l},{m},{},{}\n", f.mean_divergence, f.examples));
    }
    s
}

fn diffmask<S: Scalar>(l: &Loaded<S>, opts: &AnalyzeOptions) -> Result<Analysis> {
    let (train, test) = l.split()?;
    let before = l.model.params.checksum();
    let stack = train_gates(&l.model, &train, &opts.gates)?;
    if l.model.params.checksum() != before {
        return Err(CliError::Invalid("gate training modified the model".into()));
    }
    checkpoint::save(&opts.out.join("gates.ckpt"), &stack.params)?;

    let fid = fidelity(&stack, &l.model, &test)?;
    write(&opts.out.join("fidelity.csv"), fidelity_csv(&fid))?;

    let (_, held_out) = l.corpus.analysis_split();
    let mut maps = Vec::new();
    let mut tags: Vec<Vec<Upos>> = Vec::new();
    for (p, ex) in test.iter().zip(held_out) {
        if p.inp.x_positions.is_empty() {
            continue;
        }
        maps.push(compute_heatmap(&stack, &l.model, p)?);
        tags.push(ex.seq.pos.clone());
    }
    let pos = pos_aggregate(&maps, &tags, opts.gates.tau)?;
    pos.write(&opts.out.join("pos.csv"), &opts.out.join("pos.svg"))?;

    maps.truncate(opts.heatmaps);
    for (i, h) in maps.iter().enumerate() {
        write(&opts.out.join(format!("heatmap_{i}.csv")), h.csv())?;
        write(&opts.out.join(format!("heatmap_{i}.svg")), h.svg(&format!("{} example {i}", l.model.method)))?;
    }
    Ok(Analysis::Diffmask {
        fidelity: fid,
        heatmaps: maps,
        pos,
    })
}

fn mask_dump<S: Scalar>(l: &Loaded<S>, opts: &AnalyzeOptions) -> Result<Analysis> {
    let m = l.model.method;
    if !matches!(m, Method::Kt | Method::KtAttn) {
        return Err(CliError::Mismatch(format!("mask-dump needs a KT or KT-Attn model, got {m}")));
    }
    let (_, held_out) = l.corpus.analysis_split();
    let ex = held_out.get(opts.example).ok_or_else(|| {
        CliError::Invalid(format!("example {} out of range ({} held-out examples)", opts.example, held_out.len()))
    })?;
    let p = l.prepare(std::slice::from_ref(ex))?.remove(0);
    let mask = build_visibility_mask(&p.inp)?;
    let i = opts.example;
    let layout = format!("{}\n{}", p.inp.text(), describe(&p.inp));
    write(&opts.out.join(format!("mask_{i}.pgm")), mask_pgm(&mask))?;
    write(&opts.out.join(format!("mask_{i}.csv")), mask_csv(&mask))?;
    write(&opts.out.join(format!("mask_{i}.txt")), &layout)?;
    Ok(Analysis::MaskDump { example: i, layout })
}
