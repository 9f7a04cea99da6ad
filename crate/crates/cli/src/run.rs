//! Output directory bookkeeping and the run manifest.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use ntkw_core::checkpoint::sha256_hex;
use ntkw_core::seed::{sub_seed, Stream};
use serde::{Deserialize, Serialize};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Artifact {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubSeeds {
    pub data: u64,
    pub init: u64,
    pub sgd: u64,
    pub flips: u64,
    pub verify: u64,
}

impl SubSeeds {
    pub fn of(global: u64) -> Self {
        SubSeeds {
            data: sub_seed(global, Stream::Data),
            init: sub_seed(global, Stream::Init),
            sgd: sub_seed(global, Stream::Sgd),
            flips: sub_seed(global, Stream::Flips),
            verify: sub_seed(global, Stream::Verify),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Fully resolved arguments, config entries and seed included.
    pub argv: Vec<String>,
    pub seed: u64,
    pub seeds: SubSeeds,
    pub threads: usize,
    pub exit_code: i32,
    pub artifacts: Vec<Artifact>,
    pub elapsed_s: f64,
}

pub struct Run {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub command: String,
    argv: Vec<String>,
    artifacts: Vec<Artifact>,
    started: std::time::Instant,
}

impl Run {
    pub fn new(out_dir: PathBuf, seed: u64, command: &str, argv: &[OsString]) -> anyhow::Result<Self> {
        fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        Ok(Run {
            out_dir,
            seed,
            command: command.to_string(),
            argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
            artifacts: Vec::new(),
            started: std::time::Instant::now(),
        })
    }

    pub fn path(&self, name: impl AsRef<Path>) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Write `bytes` under the output directory and record its checksum.
    pub fn write(&mut self, name: impl AsRef<Path>, bytes: &[u8]) -> anyhow::Result<PathBuf> {
        let path = self.path(&name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        let rel = name.as_ref().to_string_lossy().replace('\\', "/");
        self.artifacts.retain(|a| a.path != rel);
        self.artifacts.push(Artifact {
            path: rel,
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    pub fn write_with(
        &mut self,
        name: impl AsRef<Path>,
        f: impl FnOnce(&mut Vec<u8>) -> ntkw_core::Result<()>,
    ) -> anyhow::Result<PathBuf> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }

    pub fn write_json<T: Serialize>(&mut self, name: impl AsRef<Path>, value: &T) -> anyhow::Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    pub fn finish(self, exit_code: i32) -> anyhow::Result<Manifest> {
        let manifest = Manifest {
            tool: "ntkw".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command,
            argv: self.argv,
            seed: self.seed,
            seeds: SubSeeds::of(self.seed),
            threads: rayon::current_num_threads(),
            exit_code,
            artifacts: self.artifacts,
            elapsed_s: self.started.elapsed().as_secs_f64(),
        };
        let path = self.out_dir.join(MANIFEST_NAME);
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(manifest)
    }
}

pub fn read_manifest(path: &Path) -> anyhow::Result<Manifest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
