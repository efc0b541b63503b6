//! Experiment configuration (JSON).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mvpad_core::bsif::{enumerate_views, BorderMode};
use mvpad_core::cnn::TrainConfig;
use mvpad_core::fusion::ForestConfig;
use mvpad_core::imaging::{load_manifest, split_validation};
use mvpad_core::selection::{MetaConfig, SelectionConfig};
use mvpad_core::{Dataset, ViewId};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mv,
    Bwwva,
    Bwwvi,
    Rf,
    Meta,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Mv, Method::Bwwva, Method::Bwwvi, Method::Rf, Method::Meta];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mv => "mv",
            Method::Bwwva => "bwwva",
            Method::Bwwvi => "bwwvi",
            Method::Rf => "rf",
            Method::Meta => "meta",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).with_context(|| format!("unknown fusion method {s:?}"))
    }
}

/// How BSIF code maps are fed to the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// One channel, `code / (2^n - 1)`.
    #[default]
    Normalized,
    /// One binary channel per bit.
    BitPlanes,
}

/// Which forest importance weights the importance-based vote.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceSource {
    #[default]
    Mdi,
    Permutation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Name used in report rows; defaults to the manifest stem, or
    /// "combined" for several manifests.
    pub name: Option<String>,
    pub datasets: Vec<PathBuf>,
    pub filters: PathBuf,
    /// Subset of views; all 61 when absent.
    pub views: Option<Vec<ViewId>>,
    pub crop_size: usize,
    pub border: BorderMode,
    pub encoding: Encoding,
    pub validation_fraction: f64,
    /// `input_size` and `seed` are taken from `crop_size` and the master
    /// seed.
    pub train: TrainConfig,
    pub methods: Vec<Method>,
    pub selection: SelectionConfig,
    /// When set, `k` is chosen from these values by cross-validation on the
    /// validation split.
    pub k_search: Option<Vec<usize>>,
    pub meta: MetaConfig,
    pub forest: ForestConfig,
    pub bwwvi_importance: ImportanceSource,
    pub out: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: None,
            datasets: Vec::new(),
            filters: PathBuf::from("filters"),
            views: None,
            crop_size: 260,
            border: BorderMode::Wrap,
            encoding: Encoding::Normalized,
            validation_fraction: 0.2,
            train: TrainConfig::default(),
            methods: Method::ALL.to_vec(),
            selection: SelectionConfig::default(),
            k_search: None,
            meta: MetaConfig::default(),
            forest: ForestConfig::default(),
            bwwvi_importance: ImportanceSource::Mdi,
            out: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Read a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.datasets.iter_mut().for_each(fix);
        fix(&mut cfg.filters);
        fix(&mut cfg.out);
        Ok(cfg)
    }

    pub fn views(&self) -> Vec<ViewId> {
        let mut v = self.views.clone().unwrap_or_else(enumerate_views);
        v.sort();
        v.dedup();
        v
    }

    pub fn bsif_views(&self) -> Vec<ViewId> {
        self.views().into_iter().filter(|v| *v != ViewId::Raw).collect()
    }

    /// Training settings for one view: the seed is the master seed plus the
    /// view's stable index.
    pub fn train_config(&self, view: ViewId) -> TrainConfig {
        TrainConfig {
            input_size: self.crop_size,
            seed: self.seed.wrapping_add(view.index() as u64),
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            bail!("no dataset manifests configured");
        }
        for d in &self.datasets {
            if !d.is_file() {
                bail!("manifest {} does not exist", d.display());
            }
        }
        if !self.bsif_views().is_empty() && !self.filters.is_dir() {
            bail!("filter directory {} does not exist", self.filters.display());
        }
        if self.views().is_empty() {
            bail!("view list is empty");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            bail!("validation_fraction must lie in (0, 1)");
        }
        self.train_config(ViewId::Raw).validate()?;
        if self.methods.is_empty() {
            bail!("no fusion methods configured");
        }
        // selection bounds only matter when something selects
        if self.methods.contains(&Method::Meta) {
            self.validate_selection()?;
        }
        Ok(())
    }

    pub fn validate_selection(&self) -> Result<()> {
        let d = self.views().len();
        let ks = self.k_search.clone().unwrap_or_else(|| vec![self.selection.k]);
        if ks.is_empty() {
            bail!("k_search is empty");
        }
        for k in ks {
            if k == 0 || k > d {
                bail!("k = {k} outside 1..={d}");
            }
        }
        if self.selection.l == 0 || self.selection.l >= d {
            bail!("l = {} outside 1..{d}", self.selection.l);
        }
        Ok(())
    }

    /// The configured dataset with the validation split carved out of train.
    pub fn dataset(&self) -> Result<Dataset> {
        let parts = self
            .datasets
            .iter()
            .map(|p| load_manifest(p).with_context(|| format!("loading manifest {}", p.display())))
            .collect::<Result<Vec<_>>>()?;
        let mut ds = if parts.len() == 1 {
            parts.into_iter().next().expect("one part")
        } else {
            Dataset::combine("combined", &parts)?
        };
        if let Some(name) = &self.name {
            ds.name = name.clone();
        }
        Ok(split_validation(&ds, self.validation_fraction, self.seed)?)
    }
}
