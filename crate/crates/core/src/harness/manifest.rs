//! Run manifests and on-disk run outputs.
//!
//! A manifest is a TOML document:
//!
//! ```toml
//! output_dir = "out"          # relative paths resolve against the manifest's directory
//! strategy = "self"           # or "pooled"
//! in_sample = true            # also reconstruct training tiles
//!
//! [grid]
//! rows = 3
//! cols = 4
//! # test_ids = [3, 7, 11]     # default: last column
//!
//! [registration]              # global search space
//! [matching]                  # n, variance_threshold, radius, stride
//! [library]                   # size (L), categories (k), oversample (K), seed, max_iter, tol
//! [nlm]                       # sigma_n, accelerate, n
//! [eval]                      # canny, border
//!
//! [[pairs]]
//! id = "pair01"
//! hr = "pair01_hr.png"
//! lr = "pair01_lr.png"
//! # registration = "pair01.transform.toml"   # reuse a stored transform
//! ```
//!
//! Every section is optional and defaults to the published parameters.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{aggregate_reports, align_with, reports_csv, ExperimentConfig, ImagePair, PartitionPlan, RunOutput, Strategy, Summary};
use crate::error::{Error, Result};
use crate::io::{load_image, save_image};
use crate::lbnlm::NlmConfig;
use crate::library::LibraryConfig;
use crate::metrics::EvalConfig;
use crate::registration::{displacement_csv, GlobalTransform, MatchConfig, SearchSpace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub id: String,
    pub hr: PathBuf,
    pub lr: PathBuf,
    /// Stored global transform; the pair is registered when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registration: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    /// Held-out tiles, row-major; the last column when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_ids: Option<Vec<usize>>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            rows: 3,
            cols: 4,
            test_ids: None,
        }
    }
}

impl GridSpec {
    pub fn plan(&self) -> Result<PartitionPlan> {
        match &self.test_ids {
            Some(ids) => PartitionPlan::new(self.rows, self.cols, ids.clone()),
            None => PartitionPlan::last_columns(self.rows, self.cols, 1),
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default = "yes")]
    pub in_sample: bool,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub registration: SearchSpace,
    #[serde(default)]
    pub matching: MatchConfig,
    #[serde(default)]
    pub library: LibraryConfig,
    #[serde(default)]
    pub nlm: NlmConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub pairs: Vec<PairEntry>,
}

impl Manifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Record(format!("manifest: {}", e.message())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    /// Reads a manifest and resolves its relative paths against the manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut m.output_dir);
        for pair in &mut m.pairs {
            resolve(&mut pair.hr);
            resolve(&mut pair.lr);
            if let Some(r) = pair.registration.as_mut() {
                resolve(r);
            }
        }
        Ok(m)
    }

    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let cfg = ExperimentConfig {
            plan: self.grid.plan()?,
            search: self.registration.clone(),
            matching: self.matching,
            library: self.library,
            nlm: self.nlm,
            eval: self.eval,
            in_sample: self.in_sample,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks that every referenced input file exists.
    pub fn check_inputs(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::param("manifest lists no pairs"));
        }
        for pair in &self.pairs {
            let files = [Some(&pair.hr), Some(&pair.lr), pair.registration.as_ref()];
            for file in files.into_iter().flatten() {
                if !file.is_file() {
                    return Err(Error::FileNotFound(file.clone()));
                }
            }
        }
        Ok(())
    }

    /// Loads every pair; pairs with a stored transform come back aligned.
    pub fn load_pairs(&self) -> Result<Vec<ImagePair>> {
        self.pairs
            .iter()
            .map(|entry| {
                let raw = ImagePair::new(entry.id.clone(), load_image(&entry.hr)?, load_image(&entry.lr)?);
                match &entry.registration {
                    Some(path) => align_with(&raw, &GlobalTransform::load(path)?),
                    None => Ok(raw),
                }
            })
            .collect()
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes a run's records under `dir` and returns its summary.
///
/// Layout: `reports.csv`, `summary.csv`, `summary.txt`, `skipped.txt` (when
/// pairs were skipped) and per pair `<id>/registration.toml`,
/// `<id>/displacements.csv` and `<id>/sr_<tile>.png`.
pub fn write_run(out: &RunOutput, dir: impl AsRef<Path>) -> Result<Summary> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let summary = aggregate_reports(&out.reports)?;
    write(&dir.join("reports.csv"), reports_csv(&out.reports))?;
    write(&dir.join("summary.csv"), summary.to_csv())?;
    write(
        &dir.join("summary.txt"),
        format!("strategy: {}\n{summary}", out.strategy),
    )?;
    if !out.skipped.is_empty() {
        let lines: String = out
            .skipped
            .iter()
            .map(|s| format!("{}: {}\n", s.pair_id, s.reason))
            .collect();
        write(&dir.join("skipped.txt"), lines)?;
    }
    for pair in &out.pairs {
        let pdir = dir.join(&pair.pair_id);
        fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
        pair.registration.save(pdir.join("registration.toml"))?;
        write(&pdir.join("displacements.csv"), displacement_csv(&pair.matches))?;
    }
    for rec in &out.reconstructions {
        let pdir = dir.join(&rec.pair_id);
        fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
        save_image(&rec.image, pdir.join(format!("sr_{:02}.png", rec.subimage)))?;
    }
    Ok(summary)
}
