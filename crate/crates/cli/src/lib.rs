//! Experiment runner: transform, train, predict, select, fuse, evaluate and
//! report, each readable and resumable from files under one output
//! directory.

pub mod config;
pub mod evaluate;
pub mod filters;
pub mod fuse;
pub mod store;
pub mod train;
pub mod transform;

use anyhow::{bail, Result};
use mvpad_core::imaging::AccessAudit;
use mvpad_core::Dataset;

pub use config::{Encoding, ExperimentConfig, ImportanceSource, Method};
pub use store::Layout;

/// Stage names recorded in the label-access audit.
pub const TRAIN_STAGE: &str = "train";
pub const PREDICT_STAGE: &str = "predict";
pub const EVALUATE_STAGE: &str = "evaluate";

/// Environment variable that sizes the worker pool.
pub const WORKERS_ENV: &str = "MVPAD_WORKERS";

/// Size the global rayon pool from [`WORKERS_ENV`] when set.
pub fn init_worker_pool() -> Result<()> {
    let Ok(v) = std::env::var(WORKERS_ENV) else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| anyhow::anyhow!("{WORKERS_ENV}={v:?} is not a positive integer"))?;
    if n == 0 {
        bail!("{WORKERS_ENV} must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| anyhow::anyhow!("worker pool: {e}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Transform,
    Train,
    Predict,
    Select,
    Fuse,
    Evaluate,
}

/// A loaded experiment: config, split dataset and output layout.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub dataset: Dataset,
    pub layout: Layout,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let dataset = config.dataset()?;
        let layout = Layout::new(&config.out);
        std::fs::create_dir_all(&layout.root)?;
        store::write_json(&layout.root.join("config.json"), &config)?;
        Ok(Self { config, dataset, layout })
    }

    /// Run one stage, then persist its label reads and refresh the
    /// artifact manifest.
    pub fn run(&self, stage: Stage) -> Result<()> {
        let audit = AccessAudit::new();
        let res = self.dispatch(stage, &audit);
        store::persist_audit(&self.layout, &audit)?;
        store::refresh_artifacts(&self.layout)?;
        res
    }

    fn dispatch(&self, stage: Stage, audit: &AccessAudit) -> Result<()> {
        let (cfg, ds, layout) = (&self.config, &self.dataset, &self.layout);
        match stage {
            Stage::Transform => {
                let stats = transform::run_transform(cfg, ds, layout)?;
                if !stats.errors.is_empty() {
                    let list: Vec<String> = stats.errors.iter().map(|e| format!("{} ({}): {}", e.sample_id, e.path, e.error)).collect();
                    bail!("{} sample(s) failed:\n{}", list.len(), list.join("\n"));
                }
            }
            Stage::Train => {
                let s = train::run_train(cfg, ds, layout, audit)?;
                log::info!("train: {} trained, {} already done", s.trained.len(), s.skipped.len());
            }
            Stage::Predict => train::run_predict(cfg, ds, layout, audit)?,
            Stage::Select => {
                fuse::run_select(cfg, layout)?;
            }
            Stage::Fuse => fuse::run_fuse(cfg, layout, &cfg.methods)?,
            Stage::Evaluate => {
                evaluate::run_evaluate(cfg, ds, layout, audit)?;
            }
        }
        Ok(())
    }

    /// Every stage in order, then the report.
    pub fn run_all(&self) -> Result<String> {
        for stage in [Stage::Transform, Stage::Train, Stage::Predict, Stage::Select, Stage::Fuse, Stage::Evaluate] {
            self.run(stage)?;
        }
        evaluate::run_report(std::slice::from_ref(&self.layout.root), &self.layout.root, "mv", "meta")
    }
}
