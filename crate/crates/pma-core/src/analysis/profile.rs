//! Per-position memory attention profile: how much attention mass lands on
//! prototype memories at each step of greedy generation.

use crate::attention::memory_attention_score;
use crate::captioner::Captioner;
use crate::error::{Error, Result};
use crate::numerics::Tape;
use crate::trainkit::data::{ToySample, BOS, EOS};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ProfilePoint {
    pub position: usize,
    pub mean: f64,
    pub std: f64,
    pub samples: usize,
}

/// Aggregate per-sample score sequences into a per-position curve. The curve
/// length is the longest sequence observed.
pub fn profile_from_scores(scores_per_sample: &[Vec<f64>]) -> Vec<ProfilePoint> {
    let max_len = scores_per_sample.iter().map(Vec::len).max().unwrap_or(0);
    (0..max_len)
        .map(|position| {
            let at: Vec<f64> = scores_per_sample
                .iter()
                .filter_map(|s| s.get(position).copied())
                .collect();
            let n = at.len() as f64;
            let mean = at.iter().sum::<f64>() / n;
            let var = at.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            ProfilePoint {
                position,
                mean,
                std: var.sqrt(),
                samples: at.len(),
            }
        })
        .collect()
}

/// Greedy-decode each sample and record the layer-averaged memory attention
/// score at every generated position.
pub fn memory_usage_profile(
    model: &Captioner,
    samples: &[ToySample],
) -> Result<Vec<ProfilePoint>> {
    if model.memories().iter().all(Option::is_none)
        && model.mode() != crate::captioner::MemoryMode::LearnableMem
    {
        return Err(Error::contract(
            "memory usage profile needs installed memories (m = 0 path has none)",
        ));
    }
    let mut scores_per_sample = Vec::with_capacity(samples.len());
    for sample in samples {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let enc = bound.encode(&mut tape, &sample.features)?;
        let mut tokens = vec![BOS];
        let mut scores = Vec::new();
        while tokens.len() < model.cfg().max_len {
            let out = bound.decode_teacher_forced(&mut tape, &tokens, enc)?;
            let with_memory: Vec<Vec<_>> = out
                .self_traces
                .iter()
                .filter(|heads| heads.iter().any(|t| t.memory_cols() > 0))
                .cloned()
                .collect();
            if with_memory.is_empty() {
                return Err(Error::contract(
                    "no decoder layer carried memory during profiling",
                ));
            }
            let position = tokens.len() - 1;
            let (_, mean) = memory_attention_score(&with_memory, position)?;
            scores.push(mean);

            let logits = tape.value(out.logits);
            let last = logits.row(logits.rows() - 1);
            let next = last
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i)
                .expect("non-empty vocab");
            tokens.push(next);
            if next == EOS {
                break;
            }
        }
        scores_per_sample.push(scores);
    }
    Ok(profile_from_scores(&scores_per_sample))
}

pub fn profile_to_csv(points: &[ProfilePoint]) -> String {
    let mut out = String::from("position,mean,std\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.position, p.mean, p.std));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionTrace;
    use crate::numerics::Tensor;

    #[test]
    fn uniform_scores_give_flat_half_curve() {
        // Uniform traces score 0.5 at every position; the aggregated curve
        // over any number of samples stays flat at 0.5.
        let cols = 6;
        let w = Tensor::new(vec![1, cols], vec![1.0 / cols as f64; cols]).unwrap();
        let trace = AttentionTrace::new(w, 2).unwrap();
        let (_, score) = memory_attention_score(&[vec![trace]], 0).unwrap();
        let scores = vec![vec![score; 4]; 3];
        let curve = profile_from_scores(&scores);
        assert_eq!(curve.len(), 4);
        for p in curve {
            assert!((p.mean - 0.5).abs() < 1e-12);
            assert!(p.std < 1e-12);
            assert_eq!(p.samples, 3);
        }
    }

    #[test]
    fn curve_length_is_max_sequence_length() {
        let scores = vec![vec![0.1, 0.2], vec![0.3, 0.4, 0.5, 0.6]];
        let curve = profile_from_scores(&scores);
        assert_eq!(curve.len(), 4);
        assert_eq!(curve[0].samples, 2);
        assert_eq!(curve[3].samples, 1);
    }

    #[test]
    fn hand_set_scores_match_direct_formula() {
        let scores = vec![vec![0.25, 0.75], vec![0.75, 0.25]];
        let curve = profile_from_scores(&scores);
        assert_eq!(curve[0].mean, 0.5);
        assert_eq!(curve[1].mean, 0.5);
        assert_eq!(curve[0].std, 0.25);
    }

    #[test]
    fn csv_schema() {
        let csv = profile_to_csv(&[ProfilePoint {
            position: 0,
            mean: 0.5,
            std: 0.0,
            samples: 2,
        }]);
        assert!(csv.starts_with("position,mean,std\n"));
        assert!(csv.contains("0,0.5,0"));
    }
}
