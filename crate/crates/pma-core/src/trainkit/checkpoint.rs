//! Checkpoint file format.
//!
//! Layout: magic `PMAC`, format version u32 LE, header length u64 LE, a
//! JSON header (tensor names, shapes, byte offsets, config echo, stream
//! state), the raw little-endian f64 payload, then a trailing SHA-256 of
//! the payload. Parameters, optimizer moments, and installed prototype
//! memories round-trip bit for bit. Raw banks are not persisted: prototypes
//! are the inference artifact, and a resumed run refills its banks, running
//! memoryless until the next fill.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::captioner::Captioner;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::prototypes::PrototypeMemory;
use crate::trainkit::config::TrainConfig;
use crate::trainkit::train::{make_banks, AdamState, TrainState};

pub const MAGIC: &[u8; 4] = b"PMAC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload section.
    offset: u64,
    /// Byte length.
    len: u64,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct ProtoMeta {
    built_at_step: u64,
    k_used: usize,
}

/// Deterministic stream state: every random stream in a run is derived from
/// the seed plus these counters.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct StreamState {
    seed: u64,
    sample_counter: u64,
    refresh_count: u64,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct Header {
    format_version: u32,
    config: TrainConfig,
    step: u64,
    adam_step: u64,
    rng: StreamState,
    /// Per decoder layer: per-head prototype metadata, when installed.
    prototypes: Vec<Option<Vec<ProtoMeta>>>,
    tensors: Vec<TensorEntry>,
}

fn checkpoint_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        field: field.to_string(),
        reason: reason.into(),
    }
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let put = |name: String, t: &Tensor, tensors: &mut Vec<TensorEntry>, payload: &mut Vec<u8>| {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            len: (t.numel() * 8) as u64,
        });
    };

    for (name, t) in state.model.params() {
        put(format!("param.{name}"), t, &mut tensors, &mut payload);
    }
    for (name, t) in &state.adam.m {
        put(format!("adam.m.{name}"), t, &mut tensors, &mut payload);
    }
    for (name, t) in &state.adam.v {
        put(format!("adam.v.{name}"), t, &mut tensors, &mut payload);
    }
    let mut proto_meta = Vec::new();
    for (l, slot) in state.model.memories().iter().enumerate() {
        match slot {
            None => proto_meta.push(None),
            Some(heads) => {
                let mut metas = Vec::new();
                for (h, p) in heads.iter().enumerate() {
                    put(
                        format!("proto.{l}.{h}.keys"),
                        &p.keys,
                        &mut tensors,
                        &mut payload,
                    );
                    put(
                        format!("proto.{l}.{h}.values"),
                        &p.values,
                        &mut tensors,
                        &mut payload,
                    );
                    metas.push(ProtoMeta {
                        built_at_step: p.built_at_step,
                        k_used: p.k_used,
                    });
                }
                proto_meta.push(Some(metas));
            }
        }
    }

    let header = Header {
        format_version: FORMAT_VERSION,
        config: state.config.clone(),
        step: state.step,
        adam_step: state.adam.step,
        rng: StreamState {
            seed: state.config.seed,
            sample_counter: state.sample_counter,
            refresh_count: state.refresh_count,
        },
        prototypes: proto_meta,
        tensors,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| checkpoint_err("header", e.to_string()))?;

    let mut out = Vec::with_capacity(16 + header_json.len() + payload.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&payload);
    out.extend_from_slice(&digest);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(checkpoint_err("magic", "file shorter than fixed prelude"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(checkpoint_err("magic", "not a PMAC checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(checkpoint_err(
            "format_version",
            format!("found {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .ok_or_else(|| checkpoint_err("header_len", "overflow"))?;
    if bytes.len() < header_end + 32 {
        return Err(checkpoint_err("header", "file truncated inside header"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| checkpoint_err("header", e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(checkpoint_err(
            "format_version",
            format!("header says {}, expected {FORMAT_VERSION}", header.format_version),
        ));
    }

    let payload = &bytes[header_end..bytes.len() - 32];
    let stored_digest = &bytes[bytes.len() - 32..];
    let digest = Sha256::digest(payload);
    if digest.as_slice() != stored_digest {
        return Err(checkpoint_err("payload digest", "SHA-256 mismatch"));
    }

    let mut tensor_map: BTreeMap<String, Tensor> = BTreeMap::new();
    for entry in &header.tensors {
        let start = entry.offset as usize;
        let end = start
            .checked_add(entry.len as usize)
            .ok_or_else(|| checkpoint_err(&entry.name, "offset overflow"))?;
        if end > payload.len() {
            return Err(checkpoint_err(
                &entry.name,
                "tensor extends past payload end",
            ));
        }
        let numel: usize = entry.shape.iter().product();
        if numel * 8 != entry.len as usize {
            return Err(checkpoint_err(
                &entry.name,
                format!("shape {:?} disagrees with byte length {}", entry.shape, entry.len),
            ));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| checkpoint_err(&entry.name, e.to_string()))?;
        if tensor_map.insert(entry.name.clone(), t).is_some() {
            return Err(checkpoint_err(&entry.name, "duplicate tensor entry"));
        }
    }

    let mut config = header.config;
    config.finalize()?;
    let mut model = Captioner::new(config.model.clone(), config.mode, config.seed)?;
    // Overwrite freshly initialized parameters with the stored set; the two
    // name sets must agree exactly.
    let expected: Vec<String> = model.params().keys().cloned().collect();
    let mut params = BTreeMap::new();
    for name in &expected {
        let key = format!("param.{name}");
        let t = tensor_map
            .remove(&key)
            .ok_or_else(|| checkpoint_err(&key, "missing parameter tensor"))?;
        if t.shape() != model.params()[name].shape() {
            return Err(checkpoint_err(&key, "parameter shape mismatch"));
        }
        params.insert(name.clone(), t);
    }
    *model.params_mut() = params;

    let mut adam = AdamState::new(model.params());
    adam.step = header.adam_step;
    for name in &expected {
        for (prefix, store) in [("adam.m", &mut adam.m), ("adam.v", &mut adam.v)] {
            let key = format!("{prefix}.{name}");
            let t = tensor_map
                .remove(&key)
                .ok_or_else(|| checkpoint_err(&key, "missing optimizer moment"))?;
            store.insert(name.clone(), t);
        }
    }

    if header.prototypes.len() != config.model.layers {
        return Err(checkpoint_err(
            "prototypes",
            "layer count disagrees with config",
        ));
    }
    let mut memories = Vec::with_capacity(config.model.layers);
    for (l, slot) in header.prototypes.iter().enumerate() {
        match slot {
            None => memories.push(None),
            Some(metas) => {
                let mut heads = Vec::with_capacity(metas.len());
                for (h, meta) in metas.iter().enumerate() {
                    let kkey = format!("proto.{l}.{h}.keys");
                    let vkey = format!("proto.{l}.{h}.values");
                    let keys = tensor_map
                        .remove(&kkey)
                        .ok_or_else(|| checkpoint_err(&kkey, "missing prototype keys"))?;
                    let values = tensor_map
                        .remove(&vkey)
                        .ok_or_else(|| checkpoint_err(&vkey, "missing prototype values"))?;
                    heads.push(PrototypeMemory {
                        keys,
                        values,
                        built_at_step: meta.built_at_step,
                        k_used: meta.k_used,
                    });
                }
                memories.push(Some(heads));
            }
        }
    }
    model.install_memories(memories)?;
    if let Some(name) = tensor_map.keys().next() {
        return Err(checkpoint_err(name, "unexpected extra tensor entry"));
    }

    let banks = make_banks(&config)?;
    Ok(TrainState {
        step: header.step,
        sample_counter: header.rng.sample_counter,
        refresh_count: header.rng.refresh_count,
        config,
        model,
        adam,
        banks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captioner::MemoryMode;
    use crate::trainkit::data::{make_toy_dataset, DatasetConfig};
    use crate::trainkit::train::train;

    fn trained_state(steps: u64) -> (TrainState, crate::trainkit::data::ToyDataset) {
        let mut config = TrainConfig::default();
        config.mode = MemoryMode::Pma;
        config.seed = 11;
        config.batch_size = 8;
        config.t_bank = 3;
        config.stride = 1;
        config.topk = 4;
        config.model.layers = 1;
        config.model.d_model = 16;
        config.model.heads = 2;
        config.model.ffn_dim = 24;
        config.model.memory_slots = 5;
        config.dataset = DatasetConfig {
            seed: 11,
            d_feat: 8,
            train_samples: 24,
            val_samples: 8,
            test_samples: 6,
            ..DatasetConfig::default()
        };
        let dataset = make_toy_dataset(&config.dataset).unwrap();
        let mut state = TrainState::new(config).unwrap();
        train(&mut state, &dataset, steps, &mut |_| {}).unwrap();
        (state, dataset)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (state, _) = trained_state(5);
        let dir = std::env::temp_dir().join("pma_ckpt_test_roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.pmac");
        let p2 = dir.join("b.pmac");
        save_checkpoint(&state, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        let a = std::fs::read(&p1).unwrap();
        let b = std::fs::read(&p2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let (state, _) = trained_state(5);
        let dir = std::env::temp_dir().join("pma_ckpt_test_fields");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("c.pmac");
        save_checkpoint(&state, &p).unwrap();
        let loaded = load_checkpoint(&p).unwrap();
        assert_eq!(loaded.step, state.step);
        assert_eq!(loaded.sample_counter, state.sample_counter);
        assert_eq!(loaded.refresh_count, state.refresh_count);
        assert_eq!(loaded.adam.step, state.adam.step);
        for (name, t) in state.model.params() {
            assert_eq!(t.data(), loaded.model.params()[name].data(), "{name}");
        }
        for (name, t) in &state.adam.m {
            assert_eq!(t.data(), loaded.adam.m[name].data());
        }
        for (a, b) in state.model.memories().iter().zip(loaded.model.memories()) {
            match (a, b) {
                (None, None) => {}
                (Some(x), Some(y)) => {
                    for (p, q) in x.iter().zip(y) {
                        assert_eq!(p, q);
                    }
                }
                _ => panic!("prototype presence mismatch"),
            }
        }
    }

    #[test]
    fn resume_reproduces_next_step_bitwise() {
        let (mut full, dataset) = trained_state(5);
        let dir = std::env::temp_dir().join("pma_ckpt_test_resume");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("resume.pmac");
        save_checkpoint(&full, &p).unwrap();
        // One more step on the original.
        let mut a_metrics = Vec::new();
        train(&mut full, &dataset, 1, &mut |m| a_metrics.push(m.loss.to_bits())).unwrap();
        // One step on the resumed copy.
        let mut resumed = load_checkpoint(&p).unwrap();
        let mut b_metrics = Vec::new();
        train(&mut resumed, &dataset, 1, &mut |m| b_metrics.push(m.loss.to_bits())).unwrap();
        assert_eq!(a_metrics, b_metrics);
        for (name, t) in full.model.params() {
            assert_eq!(t.data(), resumed.model.params()[name].data(), "{name}");
        }
    }

    #[test]
    fn load_then_generate_matches_generate_before_save() {
        use crate::captioner::GenMode;
        use crate::trainkit::data::{BOS, EOS};
        let (state, dataset) = trained_state(6);
        let dir = std::env::temp_dir().join("pma_ckpt_test_generate");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("gen.pmac");
        save_checkpoint(&state, &p).unwrap();
        let loaded = load_checkpoint(&p).unwrap();
        for sample in dataset.val.iter().take(4) {
            let before = state
                .model
                .generate(&sample.features, 8, GenMode::Greedy, BOS, EOS)
                .unwrap();
            let after = loaded
                .model
                .generate(&sample.features, 8, GenMode::Greedy, BOS, EOS)
                .unwrap();
            assert_eq!(before, after);
        }
    }

    #[test]
    fn corrupt_payload_byte_fails_digest() {
        let (state, _) = trained_state(2);
        let dir = std::env::temp_dir().join("pma_ckpt_test_corrupt");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("d.pmac");
        save_checkpoint(&state, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let mid = bytes.len() - 200;
        bytes[mid] ^= 0x40;
        std::fs::write(&p, &bytes).unwrap();
        match load_checkpoint(&p) {
            Err(Error::Checkpoint { field, .. }) => assert_eq!(field, "payload digest"),
            Err(other) => panic!("expected digest failure, got {other}"),
            Ok(_) => panic!("corrupt checkpoint loaded"),
        }
    }

    #[test]
    fn version_mismatch_names_field() {
        let (state, _) = trained_state(1);
        let dir = std::env::temp_dir().join("pma_ckpt_test_version");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("e.pmac");
        save_checkpoint(&state, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[4] = 99;
        std::fs::write(&p, &bytes).unwrap();
        match load_checkpoint(&p) {
            Err(Error::Checkpoint { field, .. }) => assert_eq!(field, "format_version"),
            Err(other) => panic!("expected version failure, got {other}"),
            Ok(_) => panic!("version-mismatched checkpoint loaded"),
        }
    }

    #[test]
    fn truncation_detected() {
        let (state, _) = trained_state(1);
        let dir = std::env::temp_dir().join("pma_ckpt_test_trunc");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("f.pmac");
        save_checkpoint(&state, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(Error::Checkpoint { .. })
        ));
    }
}
