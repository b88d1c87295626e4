//! Binary checkpoint archive.
//!
//! One bincode-encoded record holding a format tag, the effective run
//! configuration as TOML, and every parameter tensor by name with its
//! shape, trainable and frozen flags and raw `f64` values. Values are
//! stored bit for bit, so save → load → forward reproduces outputs exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use bincode::Options;
use dasg_core::model::ModelParams;
use dasg_core::Parameters;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

const FORMAT: &str = "dasg-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub frozen: bool,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Archive {
    pub format: String,
    pub version: u32,
    pub config: String,
    pub tensors: Vec<TensorRecord>,
}

impl Archive {
    pub fn capture(cfg: &RunConfig, params: &ModelParams) -> Self {
        let mut tensors = Vec::new();
        params.visit(&mut |name, t| {
            tensors.push(TensorRecord {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                trainable: t.requires_grad(),
                frozen: t.is_frozen(),
                data: t.data().to_vec(),
            })
        });
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            config: cfg.to_toml(),
            tensors,
        }
    }

    /// Rebuilds the configuration and parameters. Names, order and shapes
    /// must match the architecture the configuration describes.
    pub fn restore(&self) -> Result<(RunConfig, ModelParams)> {
        if self.format != FORMAT || self.version != VERSION {
            bail!("not a {FORMAT} v{VERSION} archive (found {} v{})", self.format, self.version);
        }
        let cfg: RunConfig = toml::from_str(&self.config).context("checkpoint config")?;
        cfg.validate()?;
        let mut params = ModelParams::init(&cfg.model)?;
        let mut i = 0;
        let mut problem: Option<String> = None;
        params.visit_mut(&mut |name, t| {
            if problem.is_some() {
                return;
            }
            let Some(r) = self.tensors.get(i) else {
                problem = Some(format!("missing tensor {name}"));
                return;
            };
            i += 1;
            if r.name != name || r.shape != t.shape() {
                problem = Some(format!("tensor {} {:?} does not match {name} {:?}", r.name, r.shape, t.shape()));
                return;
            }
            t.data_mut().copy_from_slice(&r.data);
            t.set_requires_grad(r.trainable);
            t.set_frozen(r.frozen);
            t.zero_grad();
        });
        if let Some(p) = problem {
            bail!(p);
        }
        if i != self.tensors.len() {
            bail!("archive has {} tensors, architecture has {i}", self.tensors.len());
        }
        Ok((cfg, params))
    }
}

pub fn save(path: &Path, cfg: &RunConfig, params: &ModelParams) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    bincode::serialize_into(&mut w, &Archive::capture(cfg, params))?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(RunConfig, ModelParams)> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    // A corrupt length prefix must not turn into a huge allocation.
    let limit = file.metadata()?.len();
    let archive: Archive = bincode::DefaultOptions::new()
        .with_fixint_encoding()
        .allow_trailing_bytes()
        .with_limit(limit)
        .deserialize_from(BufReader::new(file))
        .with_context(|| format!("decoding {}", path.display()))?;
    archive.restore()
}
