//! Dataset flags to `LabeledDataset`s.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::Context;
use ntkw_core::dataset::{self, LabeledDataset, RawDataset};
use ntkw_core::seed::{sub_seed, Stream};

use crate::{DataArgs, DataName, Exit, Split};

pub const DATA_DIR_ENV: &str = "NTKW_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSpec {
    pub n: usize,
    pub d: usize,
    pub test: usize,
}

impl FromStr for SynthSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut spec = SynthSpec { n: 0, d: 10, test: 0 };
        let mut have_n = false;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| format!("expected key=value in {part:?}"))?;
            let v: usize = v.trim().parse().map_err(|_| format!("bad count {v:?}"))?;
            match k.trim() {
                "n" => {
                    spec.n = v;
                    have_n = true;
                }
                "d" => spec.d = v,
                "test" => spec.test = v,
                other => return Err(format!("unknown key {other:?} (expected n, d, test)")),
            }
        }
        if !have_n {
            return Err("missing n=".into());
        }
        Ok(spec)
    }
}

pub struct Loaded {
    pub train: LabeledDataset,
    pub test: Option<LabeledDataset>,
}

/// Repository copy of the MNIST subset.
pub fn bundled_mnist_dir() -> PathBuf {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    p.canonicalize().unwrap_or(p)
}

/// `$NTKW_DATA_DIR/mnist` when set, otherwise the bundled copy.
pub fn mnist_dir() -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join("mnist"),
        _ => bundled_mnist_dir(),
    }
}

fn find_idx(dir: &Path, stem: &str) -> anyhow::Result<PathBuf> {
    for name in [format!("{stem}.gz"), stem.to_string()] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Exit::data(format!(
        "{stem}[.gz] not found in {} (run `ntkw data fetch` or set {DATA_DIR_ENV})",
        dir.display()
    )))
}

pub fn load_mnist_raw(split: Split) -> anyhow::Result<RawDataset> {
    let dir = mnist_dir();
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = find_idx(&dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let labels = find_idx(&dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    Ok(dataset::load_mnist_idx(&images, &labels)?)
}

pub fn read_cache(path: &Path) -> anyhow::Result<LabeledDataset> {
    let bytes = dataset::read_maybe_gz(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(LabeledDataset::from_cache_bytes(&bytes, &path.display().to_string())?)
}

/// Load the dataset selected by `args`; MNIST 3-vs-8 when no source is given.
pub fn load(args: &DataArgs, depth: usize, global_seed: u64) -> anyhow::Result<Loaded> {
    let data_seed = sub_seed(global_seed, Stream::Data);
    if let Some(spec) = args.synth {
        let (train, test) = dataset::synth_ntk_realizable_split(spec.n, spec.test, spec.d, depth, data_seed)?;
        return Ok(Loaded { train, test });
    }
    if let Some(path) = &args.dataset {
        return Ok(Loaded {
            train: read_cache(path)?,
            test: None,
        });
    }
    match args.data.unwrap_or(DataName::Mnist) {
        DataName::Mnist => {
            let [pos, neg] = args.classes[..] else {
                return Err(Exit::usage(format!("--classes needs two digits, got {:?}", args.classes)));
            };
            if pos > 9 || neg > 9 {
                return Err(Exit::usage("--classes digits must be 0-9"));
            }
            if args.n < 2 {
                return Err(Exit::usage("--n must be at least 2"));
            }
            let raw = load_mnist_raw(args.split)?;
            let all = dataset::binarize_and_normalize(&raw, pos, neg, args.n + args.test_n, data_seed)?;
            if all.len() < args.n + args.test_n {
                log::warn!(
                    "only {} examples of digits {pos} and {neg}; asked for {}",
                    all.len(),
                    args.n + args.test_n
                );
            }
            if args.test_n == 0 {
                return Ok(Loaded { train: all, test: None });
            }
            let n = args.n.min(all.len().saturating_sub(1));
            let train_idx: Vec<usize> = (0..n).collect();
            let test_idx: Vec<usize> = (n..all.len()).collect();
            Ok(Loaded {
                train: all.select(&train_idx)?,
                test: Some(all.select(&test_idx)?),
            })
        }
    }
}
