//! Run description files and the datasets they point at.

use std::path::{Path, PathBuf};

use mvfs_core::data::{split, Dataset, GroundTruth, GroundTruthMode, SyntheticSpec, Vocabulary, SPLIT_RATIOS};
use mvfs_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::checkpoint::read_json;
use crate::error::{Error, Result};
use crate::tsv::read_tsv;

/// Minimum token count for real data.
pub const TSV_MIN_FREQ: usize = 10;

fn tsv_min_freq() -> usize {
    TSV_MIN_FREQ
}

fn one() -> usize {
    1
}

/// A synthetic generator plus the number of instances to draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub spec: SyntheticSpec,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// One file, split 8:1:1 under `split_seed`.
    Tsv {
        path: PathBuf,
        #[serde(default = "tsv_min_freq")]
        min_freq: usize,
        #[serde(default)]
        split_seed: u64,
    },
    /// `train.tsv`, `valid.tsv`, `test.tsv`; vocabulary from `train.tsv`.
    TsvDir {
        dir: PathBuf,
        #[serde(default = "one")]
        min_freq: usize,
        #[serde(default)]
        truth: Option<PathBuf>,
    },
    /// Generated in memory, split under the generator seed.
    Synthetic(SyntheticSource),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpecFile {
    pub data: DataSource,
    #[serde(default)]
    pub model: TrainConfig,
    #[serde(default)]
    pub outputs: Outputs,
}

impl RunSpecFile {
    /// Parses `path`; relative data paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut spec: RunSpecFile = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        match &mut spec.data {
            DataSource::Tsv { path, .. } => *path = base.join(&*path),
            DataSource::TsvDir { dir, truth, .. } => {
                *dir = base.join(&*dir);
                if let Some(t) = truth {
                    *t = base.join(&*t);
                }
            }
            DataSource::Synthetic(_) => {}
        }
        if let Some(d) = &mut spec.outputs.dir {
            *d = base.join(&*d);
        }
        spec.model.validate()?;
        Ok(spec)
    }
}

pub struct LoadedData {
    pub vocab: Vocabulary,
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    pub truth: Option<GroundTruth>,
}

/// Rewrites selector values (generator value indices) into the indices of
/// `vocab`, whose tokens are the decimal values.
pub fn remap_truth(truth: &GroundTruth, vocab: &Vocabulary) -> GroundTruth {
    GroundTruth {
        mode_field: truth.mode_field,
        modes: truth
            .modes
            .iter()
            .map(|m| GroundTruthMode {
                selector_values: m
                    .selector_values
                    .iter()
                    .map(|v| vocab.encode(truth.mode_field, &v.to_string()))
                    .collect(),
                informative_fields: m.informative_fields.clone(),
            })
            .collect(),
    }
}

pub fn load_data(source: &DataSource) -> Result<LoadedData> {
    match source {
        DataSource::Tsv {
            path,
            min_freq,
            split_seed,
        } => {
            let (ds, vocab) = read_tsv(path, None, *min_freq)?;
            let (train, valid, test) = split(&ds, SPLIT_RATIOS, *split_seed)?;
            Ok(LoadedData {
                vocab,
                train,
                valid,
                test,
                truth: None,
            })
        }
        DataSource::TsvDir { dir, min_freq, truth } => {
            let (train, vocab) = read_tsv(&dir.join("train.tsv"), None, *min_freq)?;
            let (valid, _) = read_tsv(&dir.join("valid.tsv"), Some(&vocab), *min_freq)?;
            let (test, _) = read_tsv(&dir.join("test.tsv"), Some(&vocab), *min_freq)?;
            let truth = match truth {
                Some(p) => Some(remap_truth(&read_json::<GroundTruth>(p)?, &vocab)),
                None => None,
            };
            Ok(LoadedData {
                vocab,
                train,
                valid,
                test,
                truth,
            })
        }
        DataSource::Synthetic(src) => {
            let (ds, truth) = src.spec.generate(src.instances)?;
            let (train, valid, test) = split(&ds, SPLIT_RATIOS, src.spec.seed)?;
            Ok(LoadedData {
                vocab: src.spec.vocabulary(),
                train,
                valid,
                test,
                truth: Some(truth),
            })
        }
    }
}

/// Where a command writes: `--out` wins over the run file's `outputs.dir`.
pub fn output_dir(flag: Option<&Path>, spec: Option<&RunSpecFile>) -> Result<PathBuf> {
    let dir = flag
        .map(Path::to_path_buf)
        .or_else(|| spec.and_then(|s| s.outputs.dir.clone()))
        .ok_or_else(|| Error::Config("no output directory: pass --out or set outputs.dir".into()))?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::write(&dir, e))?;
    Ok(dir)
}
