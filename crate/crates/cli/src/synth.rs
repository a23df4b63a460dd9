//! `gen-synth`: writes the focus-entity task from a key=value spec.
//!
//! ```text
//! train = 2000
//! dev = 500
//! test = 500
//! train_entities = 400
//! eval_entities = 200
//! embed_dim = 8
//! attr_dims = 2
//! seed = 7
//! ```
//!
//! Every key is optional.

use std::path::Path;

use knit::train::synth::{generate, SynthFiles, SynthSpec};

use crate::error::{CliError, Result};
use crate::kv::KvFile;

pub fn parse_spec(kv: &KvFile) -> Result<SynthSpec> {
    let d = SynthSpec::default();
    let spec = SynthSpec {
        train: kv.get_or("train", d.train)?,
        dev: kv.get_or("dev", d.dev)?,
        test: kv.get_or("test", d.test)?,
        train_entities: kv.get_or("train_entities", d.train_entities)?,
        eval_entities: kv.get_or("eval_entities", d.eval_entities)?,
        embed_dim: kv.get_or("embed_dim", d.embed_dim)?,
        attr_dims: kv.get_or("attr_dims", d.attr_dims)?,
        seed: kv.get_or("seed", d.seed)?,
    };
    kv.finish()?;
    if spec.train == 0 || spec.dev == 0 || spec.test == 0 {
        return Err(CliError::Invalid(format!("{}: split sizes must be at least 1", kv.path.display())));
    }
    Ok(spec)
}

pub fn cmd_gen_synth(spec: &Path, out: &Path) -> Result<SynthFiles> {
    let spec = parse_spec(&KvFile::read(spec)?)?;
    Ok(generate(&spec)?.write(out)?)
}
