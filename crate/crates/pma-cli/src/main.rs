//! `pma` - train, evaluate, verify, ablate, bench, and inspect prototypical
//! memory attention models.
//!
//! Exit codes: 0 success, 1 verification or integrity failure, 2 config
//! error, 3 numeric abort (non-finite loss).

mod config_file;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use pma_core::analysis;
use pma_core::captioner::param_count_formula;
use pma_core::error::{Error, Result};
use pma_core::trainkit::{
    self, load_checkpoint, make_toy_dataset, save_checkpoint, Split, TrainConfig, TrainState,
};

use config_file::{apply_override, parse_config_file, render_config};

#[derive(Parser)]
#[command(
    name = "pma",
    about = "Prototypical memory attention at desk scale",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// Flat key = value config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Memory slots per decoder layer (m).
    #[arg(long)]
    m: Option<usize>,
    /// Bank capacity in batches (T).
    #[arg(long = "t-bank")]
    t_bank: Option<usize>,
    /// Bank refresh stride in batches (s).
    #[arg(long)]
    stride: Option<usize>,
    /// Neighbours per value prototype (k).
    #[arg(long)]
    topk: Option<usize>,
    /// Normalize value-prototype weights by their sum.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    normalize_weights: Option<bool>,
    /// Disable segment embeddings.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    no_segment_emb: Option<bool>,
    /// Keep memory out of the first decoder layer.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    no_first_layer_mem: Option<bool>,
    /// pma, learnable-mem, or baseline.
    #[arg(long)]
    mode: Option<String>,
    /// Beam width used when evaluation decodes captions.
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long = "d-model")]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long = "ffn-dim")]
    ffn_dim: Option<usize>,
    #[arg(long = "max-len")]
    max_len: Option<usize>,
    #[arg(long = "kmeans-iters")]
    kmeans_iters: Option<usize>,
    #[arg(long = "kmeans-tol")]
    kmeans_tol: Option<f64>,
    #[arg(long = "warmup-steps")]
    warmup_steps: Option<u64>,
    #[arg(long = "peak-lr")]
    peak_lr: Option<f64>,
    #[arg(long = "constant-until")]
    constant_until: Option<u64>,
    #[arg(long = "decay-until")]
    decay_until: Option<u64>,
    #[arg(long = "floor-lr")]
    floor_lr: Option<f64>,
    #[arg(long = "linear-decay", num_args = 0..=1, default_missing_value = "true")]
    linear_decay: Option<bool>,
    #[arg(long = "data-seed")]
    data_seed: Option<u64>,
    #[arg(long)]
    colors: Option<usize>,
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long = "d-feat")]
    d_feat: Option<usize>,
    #[arg(long = "sigma-feat")]
    sigma_feat: Option<f64>,
    #[arg(long = "train-samples")]
    train_samples: Option<usize>,
    #[arg(long = "val-samples")]
    val_samples: Option<usize>,
    #[arg(long = "test-samples")]
    test_samples: Option<usize>,
    /// Held-out color:object pairs, e.g. "0:0,1:1".
    #[arg(long = "holdout-pairs")]
    holdout_pairs: Option<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<TrainConfig> {
        let mut config = TrainConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::config(format!("cannot read config {}: {e}", path.display()))
            })?;
            for (k, v) in parse_config_file(&text)? {
                apply_override(&mut config, &k, &v)?;
            }
        }
        let mut set = |key: &str, value: Option<String>| -> Result<()> {
            if let Some(v) = value {
                apply_override(&mut config, key, &v)?;
            }
            Ok(())
        };
        set("seed", self.seed.map(|v| v.to_string()))?;
        set("steps", self.steps.map(|v| v.to_string()))?;
        set("m", self.m.map(|v| v.to_string()))?;
        set("t-bank", self.t_bank.map(|v| v.to_string()))?;
        set("stride", self.stride.map(|v| v.to_string()))?;
        set("topk", self.topk.map(|v| v.to_string()))?;
        set(
            "normalize-weights",
            self.normalize_weights.map(|v| v.to_string()),
        )?;
        set("no-segment-emb", self.no_segment_emb.map(|v| v.to_string()))?;
        set(
            "no-first-layer-mem",
            self.no_first_layer_mem.map(|v| v.to_string()),
        )?;
        set("mode", self.mode.clone())?;
        set("beam", self.beam.map(|v| v.to_string()))?;
        set("batch", self.batch.map(|v| v.to_string()))?;
        set("layers", self.layers.map(|v| v.to_string()))?;
        set("d-model", self.d_model.map(|v| v.to_string()))?;
        set("heads", self.heads.map(|v| v.to_string()))?;
        set("ffn-dim", self.ffn_dim.map(|v| v.to_string()))?;
        set("max-len", self.max_len.map(|v| v.to_string()))?;
        set("kmeans-iters", self.kmeans_iters.map(|v| v.to_string()))?;
        set("kmeans-tol", self.kmeans_tol.map(|v| v.to_string()))?;
        set("warmup-steps", self.warmup_steps.map(|v| v.to_string()))?;
        set("peak-lr", self.peak_lr.map(|v| v.to_string()))?;
        set(
            "constant-until",
            self.constant_until.map(|v| v.to_string()),
        )?;
        set("decay-until", self.decay_until.map(|v| v.to_string()))?;
        set("floor-lr", self.floor_lr.map(|v| v.to_string()))?;
        set("linear-decay", self.linear_decay.map(|v| v.to_string()))?;
        set("data-seed", self.data_seed.map(|v| v.to_string()))?;
        set("colors", self.colors.map(|v| v.to_string()))?;
        set("objects", self.objects.map(|v| v.to_string()))?;
        set("scenes", self.scenes.map(|v| v.to_string()))?;
        set("d-feat", self.d_feat.map(|v| v.to_string()))?;
        set("sigma-feat", self.sigma_feat.map(|v| v.to_string()))?;
        set(
            "train-samples",
            self.train_samples.map(|v| v.to_string()),
        )?;
        set("val-samples", self.val_samples.map(|v| v.to_string()))?;
        set("test-samples", self.test_samples.map(|v| v.to_string()))?;
        set("holdout-pairs", self.holdout_pairs.clone())?;
        config.finalize()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes the config echo, a metrics log, and a
    /// checkpoint into --out.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val, or comp.
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the perturbation-bound verifier and the oracle-equivalence
    /// suite; non-zero exit on any violation.
    Verify {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Test hook: perturb the value-prototype comparison to prove the
        /// harness catches violations.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Train and evaluate a grid of config variants.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Comma list from: mode, m=V1|V2, t-bank=V1|V2, segment,
        /// first-layer.
        #[arg(long, default_value = "mode")]
        axes: String,
        /// Comma list of seeds.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
    },
    /// Time plain vs memory-augmented attention forwards.
    Bench {
        #[arg(long = "t-k", default_value = "8,16,32,64")]
        t_k: String,
        #[arg(long, default_value = "0,16,64")]
        m: String,
        #[arg(long = "d-model", default_value_t = 64)]
        d_model: usize,
        #[arg(long, default_value_t = 9)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print checkpoint contents and integrity status.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| Error::config(format!("invalid {what} entry `{s}`")))
        })
        .collect()
}

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn cmd_train(config_args: &ConfigArgs, out: &Path) -> Result<()> {
    let config = config_args.build()?;
    ensure_out(out)?;
    std::fs::write(out.join("effective_config.txt"), render_config(&config))?;

    let dataset = make_toy_dataset(&config.dataset)?;
    let mut state = TrainState::new(config.clone())?;
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    let steps = config.steps;
    let mut write_error: Option<std::io::Error> = None;
    let result = trainkit::train(&mut state, &dataset, steps, &mut |m| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        if let Err(e) = writeln!(metrics, "{line}") {
            write_error.get_or_insert(e);
        }
        if m.step == 1 || m.step.is_multiple_of(100) || m.step == steps || m.refresh {
            println!("{line}");
        }
    });
    metrics.flush()?;
    if let Some(e) = write_error {
        return Err(e.into());
    }
    match result {
        Ok(()) => {
            save_checkpoint(&state, &out.join("checkpoint.pmac"))?;
            println!("trained {steps} steps; checkpoint and metrics written to {}", out.display());
            Ok(())
        }
        Err(Error::NonFiniteLoss { step }) => {
            // Diagnostic snapshot: parameters and state at the failed step.
            let diag = serde_json::json!({
                "error": "non-finite loss",
                "step": step,
                "checkpoint": "diagnostic.pmac",
            });
            std::fs::write(
                out.join("diagnostic.json"),
                serde_json::to_string_pretty(&diag).expect("diag serialize"),
            )?;
            save_checkpoint(&state, &out.join("diagnostic.pmac"))?;
            Err(Error::NonFiniteLoss { step })
        }
        Err(e) => Err(e),
    }
}

fn cmd_eval(checkpoint: &Path, split: &str, beam: Option<usize>, out: Option<&Path>) -> Result<()> {
    let state = load_checkpoint(checkpoint)?;
    let split: Split = split.parse()?;
    let dataset = make_toy_dataset(&state.config.dataset)?;
    let beam = beam.unwrap_or(state.config.beam);
    let metrics = trainkit::evaluate(&state.model, dataset.split(split), beam)?;
    let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    println!("{json}");
    if let Some(dir) = out {
        ensure_out(dir)?;
        std::fs::write(dir.join("eval.json"), json)?;
    }
    Ok(())
}

fn cmd_verify(trials: usize, seed: u64, out: Option<&Path>, inject_fault: bool) -> Result<()> {
    let bound = analysis::verify_lipschitz_sweep(trials, (2, 16), (2, 32), 2.0, seed)?;
    println!(
        "bound verifier: {} trials, max unscaled ratio {:.6} (bound 1), \
         max scaled ratio {:.6} (bound 1) -- {}",
        bound.trials,
        bound.max_ratio,
        bound.max_scaled_ratio,
        if bound.holds() { "OK" } else { "VIOLATED" }
    );
    if let Some(v) = &bound.violating_trial {
        let record = serde_json::to_string_pretty(v).expect("violation serialize");
        println!("{record}");
        if let Some(dir) = out {
            ensure_out(dir)?;
            std::fs::write(dir.join("bound_violation.json"), record)?;
        }
        return Err(Error::Verification(
            "softmax perturbation bound violated".into(),
        ));
    }

    let suite = [
        analysis::eq4_oracle_equivalence(200, 512, seed, inject_fault),
        analysis::bank_replay_equivalence(1000, seed),
        analysis::baseline_identity(20, seed),
    ];
    let mut outcomes = Vec::new();
    for result in suite {
        match result {
            Ok(outcome) => {
                println!(
                    "{}: {} trials, max error {:.3e} -- OK ({})",
                    outcome.name, outcome.trials, outcome.max_error, outcome.detail
                );
                outcomes.push(outcome);
            }
            Err(e) => {
                println!("oracle suite failure: {e}");
                return Err(e);
            }
        }
    }
    if let Some(dir) = out {
        ensure_out(dir)?;
        let report = serde_json::json!({
            "bound": bound,
            "oracles": outcomes,
        });
        std::fs::write(
            dir.join("verify_report.json"),
            serde_json::to_string_pretty(&report).expect("report serialize"),
        )?;
    }
    println!("verify: all checks passed (max_ratio <= 1)");
    Ok(())
}

fn parse_axes(text: &str) -> Result<Vec<analysis::AblationAxis>> {
    text.split(',')
        .map(|raw| {
            let spec = raw.trim();
            let (name, values) = match spec.split_once('=') {
                Some((n, v)) => (n.trim(), Some(v)),
                None => (spec, None),
            };
            match (name, values) {
                ("mode", None) => Ok(analysis::AblationAxis::Mode),
                ("segment", None) => Ok(analysis::AblationAxis::SegmentEmbeddings),
                ("first-layer", None) => Ok(analysis::AblationAxis::FirstLayerMemory),
                ("m", Some(v)) => {
                    let values: Vec<usize> = v
                        .split('|')
                        .map(|s| {
                            s.trim()
                                .parse()
                                .map_err(|_| Error::config(format!("bad m value `{s}`")))
                        })
                        .collect::<Result<_>>()?;
                    Ok(analysis::AblationAxis::MemorySlots(values))
                }
                ("t-bank", Some(v)) => {
                    let values: Vec<usize> = v
                        .split('|')
                        .map(|s| {
                            s.trim()
                                .parse()
                                .map_err(|_| Error::config(format!("bad t-bank value `{s}`")))
                        })
                        .collect::<Result<_>>()?;
                    Ok(analysis::AblationAxis::BankCapacity(values))
                }
                _ => Err(Error::config(format!("unknown ablation axis `{spec}`"))),
            }
        })
        .collect()
}

fn cmd_ablate(config_args: &ConfigArgs, out: &Path, axes: &str, seeds: &str) -> Result<()> {
    let base = config_args.build()?;
    let axes = parse_axes(axes)?;
    let seeds: Vec<u64> = parse_list(seeds, "seed")?;
    ensure_out(out)?;
    std::fs::write(out.join("effective_config.txt"), render_config(&base))?;
    let report = analysis::run_ablation_grid(&base, &axes, &seeds)?;
    std::fs::write(out.join("ablation.csv"), report.to_csv())?;
    std::fs::write(out.join("ablation.json"), report.to_json())?;
    for cell in report.cells() {
        println!(
            "{cell}: mean val exact-match {:.4}, mean compositional exact-match {:.4}",
            report.mean_val_exact_match(&cell).unwrap_or(f64::NAN),
            report.mean_compositional_exact_match(&cell).unwrap_or(f64::NAN),
        );
    }
    println!("ablation report written to {}", out.display());
    Ok(())
}

fn cmd_bench(
    t_k: &str,
    m: &str,
    d_model: usize,
    repeats: usize,
    out: Option<&Path>,
) -> Result<()> {
    let t_k: Vec<usize> = parse_list(t_k, "t-k")?;
    let m: Vec<usize> = parse_list(m, "m")?;
    let rows = analysis::bench_attention(&t_k, &m, d_model, repeats)?;
    let csv = analysis::bench_to_csv(&rows);
    print!("{csv}");
    if let Some(dir) = out {
        ensure_out(dir)?;
        std::fs::write(dir.join("attention_bench.csv"), csv)?;
    }
    Ok(())
}

fn cmd_inspect(checkpoint: &Path) -> Result<()> {
    let state = load_checkpoint(checkpoint)?;
    println!("checkpoint: {}", checkpoint.display());
    println!("digest: OK");
    println!("step: {}", state.step);
    println!("refreshes: {}", state.refresh_count);
    println!("config:");
    for line in render_config(&state.config).lines() {
        println!("  {line}");
    }
    let actual = state.model.param_count();
    let expected = param_count_formula(&state.config.model, state.config.mode);
    println!(
        "parameters: {} tensors, {} values (closed form {})",
        state.model.params().len(),
        actual,
        expected
    );
    if actual != expected {
        return Err(Error::Verification(format!(
            "parameter count {actual} disagrees with closed form {expected}"
        )));
    }
    println!("prototypes:");
    for (l, slot) in state.model.memories().iter().enumerate() {
        match slot {
            None => println!("  layer {l}: absent"),
            Some(heads) => {
                let mut norms: Vec<f64> = Vec::new();
                for p in heads {
                    for r in 0..p.keys.rows() {
                        let n = p.keys.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        norms.push(n);
                    }
                }
                norms.sort_by(|a, b| a.partial_cmp(b).expect("finite norms"));
                let min = norms.first().copied().unwrap_or(0.0);
                let max = norms.last().copied().unwrap_or(0.0);
                let median = norms[norms.len() / 2];
                println!(
                    "  layer {l}: m={}, built_at_step={}, k_used={}, heads={}, \
                     key-norm min/median/max {:.4}/{:.4}/{:.4}",
                    heads[0].slots(),
                    heads[0].built_at_step,
                    heads[0].k_used,
                    heads.len(),
                    min,
                    median,
                    max
                );
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train { config, out } => cmd_train(config, out),
        Command::Eval {
            checkpoint,
            split,
            beam,
            out,
        } => cmd_eval(checkpoint, split, *beam, out.as_deref()),
        Command::Verify {
            trials,
            seed,
            out,
            inject_fault,
        } => cmd_verify(*trials, *seed, out.as_deref(), *inject_fault),
        Command::Ablate {
            config,
            out,
            axes,
            seeds,
        } => cmd_ablate(config, out, axes, seeds),
        Command::Bench {
            t_k,
            m,
            d_model,
            repeats,
            out,
        } => cmd_bench(t_k, m, *d_model, *repeats, out.as_deref()),
        Command::Inspect { checkpoint } => cmd_inspect(checkpoint),
    }
}

fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Config(_) => 2,
        Error::NonFiniteLoss { .. } => 3,
        _ => 1,
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
