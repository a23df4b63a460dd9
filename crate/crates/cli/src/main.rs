use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use knit_cli::kv::KvFile;
use knit_cli::{cmd_analyze, cmd_gen_synth, cmd_run, Analysis, AnalyzeKind, AnalyzeOptions, ExperimentPlan};

#[derive(Parser)]
#[command(name = "knit", version, about = "Knowledge injection experiments for small transformer encoders")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every learning rate, λ and seed of a plan file.
    Run {
        plan: PathBuf,
        /// Overrides the plan's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Concurrent runs; overrides the plan.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Write the synthetic focus-entity task.
    GenSynth {
        spec: PathBuf,
        #[arg(long, default_value = "synth")]
        out: PathBuf,
    },
    /// Probe, gate or dump the attention mask of a saved model.
    Analyze {
        ckpt: PathBuf,
        #[arg(long)]
        kind: AnalyzeKind,
        #[arg(long, default_value = "analysis")]
        out: PathBuf,
        /// Reference model for MI deltas.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Held-out example shown by mask-dump.
        #[arg(long, default_value_t = 0)]
        example: usize,
        /// Number of heatmaps written by diffmask.
        #[arg(long, default_value_t = 4)]
        heatmaps: usize,
        /// Divergence budget for gate training.
        #[arg(long)]
        margin: Option<f64>,
        #[arg(long)]
        gate_epochs: Option<usize>,
        #[arg(long)]
        probe_epochs: Option<usize>,
    },
}

fn main() -> ExitCode {
    match real_main(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn real_main(cli: Cli) -> knit_cli::Result<()> {
    match cli.cmd {
        Cmd::Run { plan, out, workers } => {
            let mut p = ExperimentPlan::parse(&KvFile::read(&plan)?)?;
            if let Some(o) = out {
                p.paths.out = o;
            }
            if let Some(w) = workers {
                p.workers = w;
            }
            let s = cmd_run(&p)?;
            print!("{}", knit_cli::run::render(&s));
            println!("wrote {}", p.paths.out.join("summary.csv").display());
        }
        Cmd::GenSynth { spec, out } => {
            let f = cmd_gen_synth(&spec, &out)?;
            for p in [f.train, f.dev, f.test, f.dictionary, f.embeddings] {
                println!("wrote {}", p.display());
            }
        }
        Cmd::Analyze {
            ckpt,
            kind,
            out,
            baseline,
            workers,
            example,
            heatmaps,
            margin,
            gate_epochs,
            probe_epochs,
        } => {
            let mut o = AnalyzeOptions::new(kind, &out);
            o.baseline = baseline;
            o.workers = workers;
            o.example = example;
            o.heatmaps = heatmaps;
            if let Some(m) = margin {
                o.gates.margin = m;
            }
            if let Some(e) = gate_epochs {
                o.gates.epochs = e;
            }
            if let Some(e) = probe_epochs {
                o.probe.epochs = e;
            }
            match cmd_analyze(&ckpt, &o)? {
                Analysis::Mi { report, delta } => {
                    print!("{}", report.csv());
                    if let Some(d) = delta {
                        print!("{}", d.csv());
                    }
                }
                Analysis::Diffmask { fidelity, .. } => {
                    println!(
                        "held-out divergence {:.4} over {} examples, masked at top {:.3}",
                        fidelity.mean_divergence,
                        fidelity.examples,
                        fidelity.masked_fraction.last().copied().unwrap_or(0.0)
                    );
                }
                Analysis::MaskDump { layout, .. } => print!("{layout}"),
            }
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}
