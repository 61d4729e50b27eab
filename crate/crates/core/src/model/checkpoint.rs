use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::speech::{FeatureMode, Normalizer};

use super::{BiLstmConfig, BiLstmTagger, ModelError, Tagger, TransformerConfig, TransformerTagger};

pub const FORMAT_VERSION: u32 = 1;

/// Everything beyond the weights that inference needs: how inputs were
/// featurized and standardized, and the seeds that reproduce the run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub feature_mode: FeatureMode,
    pub d_embed: usize,
    pub embed_seed: u64,
    pub normalizer: Normalizer,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct SavedTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    architecture: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bilstm_config: Option<BiLstmConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transformer_config: Option<TransformerConfig>,
    meta: CheckpointMeta,
    params: BTreeMap<String, SavedTensor>,
}

pub fn save_checkpoint(
    tagger: &Tagger,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<(), ModelError> {
    let params: BTreeMap<String, SavedTensor> = tagger
        .params()
        .iter()
        .map(|p| {
            (
                p.name.clone(),
                SavedTensor {
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                },
            )
        })
        .collect();
    let file = CheckpointFile {
        format_version: FORMAT_VERSION,
        architecture: tagger.arch().to_string(),
        bilstm_config: match tagger {
            Tagger::BiLstm(m) => Some(m.config.clone()),
            _ => None,
        },
        transformer_config: match tagger {
            Tagger::Transformer(m) => Some(m.config.clone()),
            _ => None,
        },
        meta: meta.clone(),
        params,
    };
    let text = serde_json::to_string(&file)
        .map_err(|e| ModelError::Checkpoint(format!("serialize: {e}")))?;
    std::fs::write(path, text).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<(Tagger, CheckpointMeta), ModelError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
    let file: CheckpointFile = serde_json::from_str(&text)
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    if file.format_version != FORMAT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            file.format_version
        )));
    }
    let seed = file.meta.seed;
    let mut tagger = match file.architecture.as_str() {
        "bilstm" => {
            let config = file.bilstm_config.clone().ok_or_else(|| {
                ModelError::Checkpoint("bilstm checkpoint is missing its config".into())
            })?;
            Tagger::BiLstm(BiLstmTagger::new(config, seed)?)
        }
        "transformer" => {
            let config = file.transformer_config.clone().ok_or_else(|| {
                ModelError::Checkpoint("transformer checkpoint is missing its config".into())
            })?;
            Tagger::Transformer(TransformerTagger::new(config, seed)?)
        }
        other => {
            return Err(ModelError::Checkpoint(format!(
                "unknown architecture tag '{other}'"
            )))
        }
    };
    let mut consumed = BTreeSet::new();
    let mut problems = Vec::new();
    for p in tagger.params_mut().iter_mut() {
        match file.params.get(&p.name) {
            Some(saved) if saved.shape == p.value.shape() => {
                p.value = Tensor::new(saved.shape.clone(), saved.data.clone())?;
                consumed.insert(p.name.clone());
            }
            Some(saved) => problems.push(format!(
                "'{}' has shape {:?}, expected {:?}",
                p.name,
                saved.shape,
                p.value.shape()
            )),
            None => problems.push(format!("missing tensor '{}'", p.name)),
        }
    }
    for name in file.params.keys() {
        if !consumed.contains(name) && !problems.iter().any(|p| p.contains(name.as_str())) {
            problems.push(format!("unexpected tensor '{name}'"));
        }
    }
    if !problems.is_empty() {
        return Err(ModelError::Checkpoint(problems.join("; ")));
    }
    Ok((tagger, file.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            feature_mode: FeatureMode::Prosody,
            d_embed: 4,
            embed_seed: 7,
            normalizer: Normalizer::identity(20),
            seed: 11,
        }
    }

    fn tiny_bilstm() -> Tagger {
        let config = BiLstmConfig {
            input_dim: 20,
            hidden_dim: 6,
            num_layers: 1,
            num_heads: 2,
            attn_layers: 1,
            dropout: 0.1,
            proj_dim: 4,
            fusion_dim: 3,
            decoder_concat_dim: None,
        };
        Tagger::BiLstm(BiLstmTagger::new(config, 11).unwrap())
    }

    #[test]
    fn round_trip_restores_forward_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let tagger = tiny_bilstm();
        let x = Tensor::new(vec![3, 20], (0..60).map(|i| (i as f64).sin()).collect()).unwrap();
        let mask = vec![true; 3];
        save_checkpoint(&tagger, &meta(), &path).unwrap();
        let (restored, loaded_meta) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_meta, meta());
        let a = tagger.logits(&x, &[0, 0, 0], &mask).unwrap();
        let b = restored.logits(&x, &[0, 0, 0], &mask).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn wrong_architecture_and_corruption_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let tagger = tiny_bilstm();
        save_checkpoint(&tagger, &meta(), &path).unwrap();

        // Claim the file is a transformer: its config is absent.
        let mut text = std::fs::read_to_string(&path).unwrap();
        text = text.replace("\"architecture\":\"bilstm\"", "\"architecture\":\"transformer\"");
        std::fs::write(&path, &text).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("missing its config"), "{err}");

        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::Checkpoint(_))
        ));
    }

    #[test]
    fn tensor_mismatches_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let tagger = tiny_bilstm();
        save_checkpoint(&tagger, &meta(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut file: serde_json::Value = serde_json::from_str(&text).unwrap();
        let params = file["params"].as_object_mut().unwrap();
        params.remove("fc.b");
        params.insert(
            "rogue".into(),
            serde_json::json!({"shape": [1], "data": [0.0]}),
        );
        std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("missing tensor 'fc.b'"), "{err}");
        assert!(err.contains("unexpected tensor 'rogue'"), "{err}");
    }

    #[test]
    fn restored_values_are_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut tagger = tiny_bilstm();
        // Scramble weights away from the seeded init to prove values travel
        // through the file, not the constructor.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for p in tagger.params_mut().iter_mut() {
            for v in p.value.data_mut() {
                *v = rand::Rng::gen_range(&mut rng, -1.0..1.0);
            }
        }
        save_checkpoint(&tagger, &meta(), &path).unwrap();
        let (restored, _) = load_checkpoint(&path).unwrap();
        for (a, b) in tagger.params().iter().zip(restored.params().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data(), b.value.data());
        }
    }
}
