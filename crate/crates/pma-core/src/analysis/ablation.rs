//! Ablation grid: train and evaluate config variants over shared seeds and
//! emit a comparison table as CSV and JSON.

use rayon::prelude::*;

use crate::captioner::MemoryMode;
use crate::error::{Error, Result};
use crate::pool::worker_pool;
use crate::trainkit::config::TrainConfig;
use crate::trainkit::data::{make_toy_dataset, Split};
use crate::trainkit::evaluate::{evaluate, EvalMetrics};
use crate::trainkit::train::{train, TrainState};

/// One Table-style comparison axis. Each axis contributes cells that differ
/// from the base config in exactly one knob.
#[derive(Debug, Clone)]
pub enum AblationAxis {
    /// pma vs learnable-mem vs plain baseline.
    Mode,
    /// Memory slot counts (m).
    MemorySlots(Vec<usize>),
    /// Bank capacities (T).
    BankCapacity(Vec<usize>),
    /// Segment embeddings on/off.
    SegmentEmbeddings,
    /// Memory in the first decoder layer on/off.
    FirstLayerMemory,
}

#[derive(Debug, Clone)]
pub struct AblationCell {
    pub label: String,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub seed: u64,
    pub final_train_loss: f64,
    pub final_train_token_acc: f64,
    pub refreshes: u64,
    pub val: EvalMetrics,
    pub compositional: EvalMetrics,
    /// Full config echo for reproducibility.
    pub config: TrainConfig,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn cells(&self) -> Vec<String> {
        let mut cells: Vec<String> = self.rows.iter().map(|r| r.cell.clone()).collect();
        cells.dedup();
        cells
    }

    pub fn mean_compositional_exact_match(&self, cell: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.cell == cell)
            .map(|r| r.compositional.exact_match)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn mean_val_exact_match(&self, cell: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.cell == cell)
            .map(|r| r.val.exact_match)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "cell,seed,final_train_loss,final_train_token_acc,refreshes,\
             val_exact_match,val_token_acc,comp_exact_match,comp_token_acc,\
             comp_color_acc,comp_object_acc,comp_scene_acc,mem_attn_score,config\n",
        );
        for r in &self.rows {
            let config = serde_json::to_string(&r.config).expect("config serializes");
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},\"{}\"\n",
                r.cell,
                r.seed,
                r.final_train_loss,
                r.final_train_token_acc,
                r.refreshes,
                r.val.exact_match,
                r.val.token_accuracy,
                r.compositional.exact_match,
                r.compositional.token_accuracy,
                r.compositional.color_accuracy,
                r.compositional.object_accuracy,
                r.compositional.scene_accuracy,
                r.val
                    .mean_mem_attn_score
                    .map(|v| v.to_string())
                    .unwrap_or_default(),
                config.replace('"', "\"\""),
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Expand axes into labelled cells around a base config.
pub fn expand_axes(base: &TrainConfig, axes: &[AblationAxis]) -> Result<Vec<AblationCell>> {
    if axes.is_empty() {
        return Ok(vec![AblationCell {
            label: format!("mode={}", base.mode),
            config: base.clone(),
        }]);
    }
    let mut cells = Vec::new();
    for axis in axes {
        match axis {
            AblationAxis::Mode => {
                for mode in [MemoryMode::Pma, MemoryMode::LearnableMem, MemoryMode::Baseline] {
                    let mut config = base.clone();
                    config.mode = mode;
                    cells.push(AblationCell {
                        label: format!("mode={mode}"),
                        config,
                    });
                }
            }
            AblationAxis::MemorySlots(values) => {
                for &m in values {
                    let mut config = base.clone();
                    config.model.memory_slots = m;
                    if m == 0 {
                        config.mode = MemoryMode::Baseline;
                    }
                    cells.push(AblationCell {
                        label: format!("m={m}"),
                        config,
                    });
                }
            }
            AblationAxis::BankCapacity(values) => {
                for &t in values {
                    let mut config = base.clone();
                    config.t_bank = t;
                    config.stride = (t / 4).max(1);
                    cells.push(AblationCell {
                        label: format!("t_bank={t}"),
                        config,
                    });
                }
            }
            AblationAxis::SegmentEmbeddings => {
                for on in [true, false] {
                    let mut config = base.clone();
                    config.model.use_segment_embeddings = on;
                    cells.push(AblationCell {
                        label: format!("segment_emb={on}"),
                        config,
                    });
                }
            }
            AblationAxis::FirstLayerMemory => {
                for on in [true, false] {
                    let mut config = base.clone();
                    config.model.memory_in_first_layer = on;
                    cells.push(AblationCell {
                        label: format!("first_layer_mem={on}"),
                        config,
                    });
                }
            }
        }
    }
    Ok(cells)
}

/// Train and evaluate one cell with one seed.
pub fn run_cell(cell: &AblationCell, seed: u64) -> Result<AblationRow> {
    let mut config = cell.config.clone();
    config.seed = seed;
    config.finalize()?;
    let dataset = make_toy_dataset(&config.dataset)?;
    let mut state = TrainState::new(config.clone())?;
    let mut last_loss = f64::NAN;
    let mut last_acc = 0.0;
    let mut refreshes = 0u64;
    let steps = config.steps;
    train(&mut state, &dataset, steps, &mut |m| {
        last_loss = m.loss;
        last_acc = m.token_acc;
        if m.refresh {
            refreshes += 1;
        }
    })?;
    let val = evaluate(&state.model, dataset.split(Split::Val), config.beam)?;
    let compositional = evaluate(
        &state.model,
        dataset.split(Split::TestCompositional),
        config.beam,
    )?;
    Ok(AblationRow {
        cell: cell.label.clone(),
        seed,
        final_train_loss: last_loss,
        final_train_token_acc: last_acc,
        refreshes,
        val,
        compositional,
        config: state.config,
    })
}

/// Train every (cell, seed) pair and assemble the report. Cells run on the
/// shared worker pool; per-run seeding keeps results independent of the
/// thread count, and rows come back sorted by (cell order, seed).
pub fn run_ablation_grid(
    base: &TrainConfig,
    axes: &[AblationAxis],
    seeds: &[u64],
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    let cells = expand_axes(base, axes)?;
    let jobs: Vec<(usize, &AblationCell, u64)> = cells
        .iter()
        .enumerate()
        .flat_map(|(i, c)| seeds.iter().map(move |&s| (i, c, s)))
        .collect();
    let mut rows: Vec<(usize, u64, AblationRow)> = worker_pool().install(|| {
        jobs.par_iter()
            .map(|&(i, cell, seed)| run_cell(cell, seed).map(|r| (i, seed, r)))
            .collect::<Result<Vec<_>>>()
    })?;
    rows.sort_by_key(|&(i, seed, _)| (i, seed));
    Ok(AblationReport {
        rows: rows.into_iter().map(|(_, _, r)| r).collect(),
    })
}
