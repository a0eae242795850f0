//! Flat `key = value` config files and the override machinery shared with
//! CLI flags. File keys use the exact flag spellings; flags strictly
//! override file values.

use pma_core::error::{Error, Result};
use pma_core::trainkit::TrainConfig;

pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::config(format!(
                "config line {} is not `key = value`: {raw}",
                lineno + 1
            )));
        };
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::config(format!("invalid value `{value}` for key `{key}`")))
}

fn parse_holdout(value: &str) -> Result<Vec<(usize, usize)>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|pair| {
            let Some((c, o)) = pair.trim().split_once(':') else {
                return Err(Error::config(format!(
                    "holdout pair `{pair}` is not `color:object`"
                )));
            };
            Ok((parse::<usize>("holdout-pairs", c.trim())?, parse::<usize>("holdout-pairs", o.trim())?))
        })
        .collect()
}

/// Apply one `key = value` override onto a config.
pub fn apply_override(config: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    let key = key.replace('_', "-");
    match key.as_str() {
        "seed" => config.seed = parse(&key, value)?,
        "steps" => config.steps = parse(&key, value)?,
        "batch" => config.batch_size = parse(&key, value)?,
        "mode" => config.mode = value.parse()?,
        "m" => config.model.memory_slots = parse(&key, value)?,
        "t-bank" => config.t_bank = parse(&key, value)?,
        "stride" => config.stride = parse(&key, value)?,
        "topk" => config.topk = parse(&key, value)?,
        "normalize-weights" => config.normalize_weights = parse(&key, value)?,
        "no-segment-emb" => config.model.use_segment_embeddings = !parse::<bool>(&key, value)?,
        "no-first-layer-mem" => {
            config.model.memory_in_first_layer = !parse::<bool>(&key, value)?
        }
        "beam" => config.beam = parse(&key, value)?,
        "layers" => config.model.layers = parse(&key, value)?,
        "d-model" => config.model.d_model = parse(&key, value)?,
        "heads" => config.model.heads = parse(&key, value)?,
        "ffn-dim" => config.model.ffn_dim = parse(&key, value)?,
        "max-len" => config.model.max_len = parse(&key, value)?,
        "kmeans-iters" => config.kmeans_iters = parse(&key, value)?,
        "kmeans-tol" => config.kmeans_tol = parse(&key, value)?,
        "warmup-steps" => config.schedule.warmup_steps = parse(&key, value)?,
        "peak-lr" => config.schedule.peak_lr = parse(&key, value)?,
        "constant-until" => config.schedule.constant_until = parse(&key, value)?,
        "decay-until" => config.schedule.decay_until = parse(&key, value)?,
        "floor-lr" => config.schedule.floor_lr = parse(&key, value)?,
        "linear-decay" => config.schedule.linear_decay = parse(&key, value)?,
        "data-seed" => config.dataset.seed = parse(&key, value)?,
        "colors" => config.dataset.n_colors = parse(&key, value)?,
        "objects" => config.dataset.n_objects = parse(&key, value)?,
        "scenes" => config.dataset.n_scenes = parse(&key, value)?,
        "d-feat" => config.dataset.d_feat = parse(&key, value)?,
        "sigma-feat" => config.dataset.sigma_feat = parse(&key, value)?,
        "train-samples" => config.dataset.train_samples = parse(&key, value)?,
        "val-samples" => config.dataset.val_samples = parse(&key, value)?,
        "test-samples" => config.dataset.test_samples = parse(&key, value)?,
        "holdout-pairs" => config.dataset.holdout_pairs = parse_holdout(value)?,
        other => {
            return Err(Error::config(format!("unknown config key `{other}`")));
        }
    }
    Ok(())
}

/// Render the effective config as a flat key = value document whose keys
/// are the flag names, so the echo can be fed back via --config.
pub fn render_config(config: &TrainConfig) -> String {
    let holdout = config
        .dataset
        .holdout_pairs
        .iter()
        .map(|(c, o)| format!("{c}:{o}"))
        .collect::<Vec<_>>()
        .join(",");
    let mut out = String::new();
    let mut line = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
    line("seed", config.seed.to_string());
    line("steps", config.steps.to_string());
    line("batch", config.batch_size.to_string());
    line("mode", config.mode.to_string());
    line("m", config.model.memory_slots.to_string());
    line("t-bank", config.t_bank.to_string());
    line("stride", config.stride.to_string());
    line("topk", config.topk.to_string());
    line("normalize-weights", config.normalize_weights.to_string());
    line(
        "no-segment-emb",
        (!config.model.use_segment_embeddings).to_string(),
    );
    line(
        "no-first-layer-mem",
        (!config.model.memory_in_first_layer).to_string(),
    );
    line("beam", config.beam.to_string());
    line("layers", config.model.layers.to_string());
    line("d-model", config.model.d_model.to_string());
    line("heads", config.model.heads.to_string());
    line("ffn-dim", config.model.ffn_dim.to_string());
    line("max-len", config.model.max_len.to_string());
    line("kmeans-iters", config.kmeans_iters.to_string());
    line("kmeans-tol", config.kmeans_tol.to_string());
    line("warmup-steps", config.schedule.warmup_steps.to_string());
    line("peak-lr", config.schedule.peak_lr.to_string());
    line("constant-until", config.schedule.constant_until.to_string());
    line("decay-until", config.schedule.decay_until.to_string());
    line("floor-lr", config.schedule.floor_lr.to_string());
    line("linear-decay", config.schedule.linear_decay.to_string());
    line("data-seed", config.dataset.seed.to_string());
    line("colors", config.dataset.n_colors.to_string());
    line("objects", config.dataset.n_objects.to_string());
    line("scenes", config.dataset.n_scenes.to_string());
    line("d-feat", config.dataset.d_feat.to_string());
    line("sigma-feat", config.dataset.sigma_feat.to_string());
    line("train-samples", config.dataset.train_samples.to_string());
    line("val-samples", config.dataset.val_samples.to_string());
    line("test-samples", config.dataset.test_samples.to_string());
    line("holdout-pairs", holdout);
    out
}
