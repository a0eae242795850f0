//! Effective training configuration; echoed verbatim into checkpoints,
//! metrics artifacts, and ablation report rows.

use crate::captioner::{MemoryMode, ModelConfig};
use crate::error::Result;
use crate::prototypes::PrototypeSpec;
use crate::trainkit::data::DatasetConfig;
use crate::trainkit::schedule::ScheduleConfig;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub mode: MemoryMode,
    pub model: ModelConfig,
    /// Bank capacity in batches (T).
    pub t_bank: usize,
    /// Refresh stride in batches (s).
    pub stride: usize,
    /// Neighbours per value prototype (k).
    pub topk: usize,
    pub normalize_weights: bool,
    pub kmeans_iters: usize,
    pub kmeans_tol: f64,
    pub schedule: ScheduleConfig,
    pub dataset: DatasetConfig,
    /// Beam width for generation during evaluation; 1 is greedy.
    pub beam: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let dataset = DatasetConfig::default();
        let mut model = ModelConfig::default();
        dataset.apply_to_model(&mut model);
        TrainConfig {
            seed: 0,
            steps: 2000,
            batch_size: 32,
            mode: MemoryMode::Pma,
            model,
            t_bank: 100,
            stride: 25,
            topk: 16,
            normalize_weights: false,
            // A handful of Lloyd iterations keeps refreshes cheap at desk
            // scale; the clustering module's own default stays at twenty.
            kmeans_iters: 6,
            kmeans_tol: 1e-4,
            schedule: ScheduleConfig::default(),
            dataset,
            beam: 1,
        }
    }
}

impl TrainConfig {
    /// Re-derive dependent fields and check cross-field invariants.
    pub fn finalize(&mut self) -> Result<()> {
        self.dataset.apply_to_model(&mut self.model);
        if self.mode == crate::captioner::MemoryMode::Baseline {
            self.model.memory_slots = 0;
        }
        self.model.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(crate::error::Error::config("batch_size must be positive"));
        }
        if self.beam == 0 {
            return Err(crate::error::Error::config("beam width must be positive"));
        }
        if self.uses_banks() {
            if self.t_bank == 0 {
                return Err(crate::error::Error::config("t_bank must be positive"));
            }
            if self.stride == 0 || self.stride > self.t_bank {
                return Err(crate::error::Error::config(format!(
                    "stride must be in [1, t_bank={}], got {}",
                    self.t_bank, self.stride
                )));
            }
            if self.topk == 0 {
                return Err(crate::error::Error::config("topk must be positive"));
            }
        }
        Ok(())
    }

    /// Memory banks exist only for prototype-memory training with m > 0.
    pub fn uses_banks(&self) -> bool {
        self.mode == MemoryMode::Pma && self.model.memory_slots > 0
    }

    pub fn prototype_spec(&self) -> PrototypeSpec {
        PrototypeSpec {
            m: self.model.memory_slots,
            k: self.topk,
            normalize: self.normalize_weights,
            max_iters: self.kmeans_iters,
            tol: self.kmeans_tol,
        }
    }
}
