//! Evaluation: teacher-forced metrics plus greedy/beam decoding quality.

use crate::captioner::{Captioner, GenMode};
use crate::error::Result;
use crate::trainkit::data::{ToySample, BOS, CAPTION_LEN, EOS};
use crate::trainkit::train::forward_eval;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalMetrics {
    pub samples: usize,
    pub teacher_forced_loss: f64,
    pub token_accuracy: f64,
    /// Fraction of samples whose generated caption equals the reference
    /// exactly, end token included.
    pub exact_match: f64,
    pub color_accuracy: f64,
    pub object_accuracy: f64,
    pub scene_accuracy: f64,
    pub mean_mem_attn_score: Option<f64>,
}

/// Deterministic evaluation of a model over one split.
pub fn evaluate(model: &Captioner, samples: &[ToySample], beam: usize) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Ok(EvalMetrics {
            samples: 0,
            teacher_forced_loss: f64::NAN,
            token_accuracy: 0.0,
            exact_match: 0.0,
            color_accuracy: 0.0,
            object_accuracy: 0.0,
            scene_accuracy: 0.0,
            mean_mem_attn_score: None,
        });
    }
    // Teacher-forced pass in chunks to bound tape size.
    let mut loss_sum = 0.0;
    let mut acc_sum = 0.0;
    let mut score_sum = 0.0;
    let mut score_chunks = 0usize;
    let mut chunks = 0usize;
    for chunk in samples.chunks(32) {
        let refs: Vec<&ToySample> = chunk.iter().collect();
        let (loss, acc, score) = forward_eval(model, &refs)?;
        let w = chunk.len() as f64;
        loss_sum += loss * w;
        acc_sum += acc * w;
        if let Some(s) = score {
            score_sum += s * w;
            score_chunks += chunk.len();
        }
        chunks += chunk.len();
    }
    let n = chunks as f64;

    let gen_mode = if beam <= 1 {
        GenMode::Greedy
    } else {
        GenMode::Beam(beam)
    };
    let mut exact = 0usize;
    let mut color_ok = 0usize;
    let mut object_ok = 0usize;
    let mut scene_ok = 0usize;
    for s in samples {
        let generated = model.generate(
            &s.features,
            model.cfg().max_len,
            gen_mode,
            BOS,
            EOS,
        )?;
        if generated == s.caption {
            exact += 1;
        }
        // Template slots: bos color object in scene eos.
        if generated.len() >= CAPTION_LEN {
            if generated[1] == s.caption[1] {
                color_ok += 1;
            }
            if generated[2] == s.caption[2] {
                object_ok += 1;
            }
            if generated[4] == s.caption[4] {
                scene_ok += 1;
            }
        }
    }

    Ok(EvalMetrics {
        samples: samples.len(),
        teacher_forced_loss: loss_sum / n,
        token_accuracy: acc_sum / n,
        exact_match: exact as f64 / n,
        color_accuracy: color_ok as f64 / n,
        object_accuracy: object_ok as f64 / n,
        scene_accuracy: scene_ok as f64 / n,
        mean_mem_attn_score: (score_chunks > 0).then(|| score_sum / score_chunks as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captioner::MemoryMode;
    use crate::trainkit::config::TrainConfig;
    use crate::trainkit::data::{make_toy_dataset, DatasetConfig};
    use crate::trainkit::train::TrainState;

    #[test]
    fn untrained_model_near_chance_token_accuracy() {
        let mut config = TrainConfig::default();
        config.mode = MemoryMode::Baseline;
        config.dataset = DatasetConfig {
            seed: 3,
            d_feat: 8,
            train_samples: 400,
            val_samples: 0,
            test_samples: 0,
            ..DatasetConfig::default()
        };
        config.model.layers = 1;
        config.model.d_model = 16;
        config.model.heads = 2;
        config.model.ffn_dim = 24;
        let dataset = make_toy_dataset(&config.dataset).unwrap();
        let state = TrainState::new(config).unwrap();
        let metrics = evaluate(&state.model, &dataset.train, 1).unwrap();
        let vocab = state.config.dataset.vocab_size() as f64;
        // Chance level is 1/V give or take sampling error; an untrained
        // model is biased by its random init, so allow a generous band.
        assert!(
            metrics.token_accuracy < 5.0 / vocab + 0.15,
            "token accuracy {} unreasonably high for an untrained model",
            metrics.token_accuracy
        );
        assert!(metrics.teacher_forced_loss > 1.0);
        assert!(metrics.mean_mem_attn_score.is_none());
    }

    #[test]
    fn metrics_record_serializes_fully_populated() {
        let m = EvalMetrics {
            samples: 4,
            teacher_forced_loss: 1.5,
            token_accuracy: 0.25,
            exact_match: 0.0,
            color_accuracy: 0.5,
            object_accuracy: 0.25,
            scene_accuracy: 0.75,
            mean_mem_attn_score: Some(0.4),
        };
        let json = serde_json::to_string(&m).unwrap();
        for key in [
            "samples",
            "teacher_forced_loss",
            "token_accuracy",
            "exact_match",
            "color_accuracy",
            "object_accuracy",
            "scene_accuracy",
            "mean_mem_attn_score",
        ] {
            assert!(json.contains(key), "missing {key} in {json}");
        }
        let back: EvalMetrics = serde_json::from_str(&json).unwrap();
        assert_eq!(back.samples, 4);
    }
}
