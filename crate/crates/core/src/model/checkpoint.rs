// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::sync::Arc;

use super::config::ModelConfig;
use super::transformer::{Block, Layer, TransformerModel, BLOCK_FIELDS};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::numerics::Scalar;

impl<T: Scalar> TransformerModel<T> {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.set_meta("kind", "model")?;
        c.set_meta("config", &self.config)?;
        let deleted: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Identity))
            .map(|(i, _)| i)
            .collect();
        c.set_meta("identity_layers", deleted)?;
        for (name, t) in self.named_tensors() {
            c.push(name, t);
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let kind: String = c.meta_as("kind")?;
        if kind != "model" {
            return Err(Error::Format(format!("expected a model file, found {kind}")));
        }
        let config: ModelConfig = c.meta_as("config")?;
        config.validate()?;
        let identity: Vec<usize> = c.meta_as("identity_layers")?;
        let (d, v, f, s) = (config.d_model, config.vocab_size, config.d_ff, config.max_seq_len);
        let shapes: [Vec<usize>; 16] = [
            vec![d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, f],
            vec![f],
            vec![f, d],
            vec![d],
        ];
        let mut layers = Vec::with_capacity(config.n_layers);
        let mut expected = 5;
        for i in 0..config.n_layers {
            if identity.contains(&i) {
                layers.push(Layer::Identity);
                continue;
            }
            let mut b = Block::zeros(&config);
            for ((dst, name), shape) in b.tensors_mut().into_iter().zip(BLOCK_FIELDS).zip(&shapes) {
                *dst = c.get(&format!("blocks.{i}.{name}"), shape)?;
            }
            expected += 16;
            layers.push(Layer::Block(Arc::new(b)));
        }
        if c.len() != expected {
            return Err(Error::Format(format!(
                "model file holds {} tensors, expected {expected}",
                c.len()
            )));
        }
        Ok(Self {
            tok_emb: c.get("tok_emb", &[v, d])?,
            pos_emb: c.get("pos_emb", &[s, d])?,
            layers,
            ln_f_gamma: c.get("ln_f.gamma", &[d])?,
            ln_f_beta: c.get("ln_f.beta", &[d])?,
            unembed: c.get("unembed", &[d, v])?,
            config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_forward_is_bit_identical() {
        let m = TransformerModel::<f32>::init(ModelConfig::tiny(2, 16, 2), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tlns");
        m.save(&path).unwrap();
        let back = TransformerModel::<f32>::load(&path).unwrap();
        let ids = [72, 101, 108, 108, 111];
        assert_eq!(m.forward_trace(&ids).unwrap().logits, back.forward_trace(&ids).unwrap().logits);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(back.to_container().unwrap().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn deleted_layers_round_trip() {
        let m = TransformerModel::<f32>::init(ModelConfig::tiny(3, 8, 2), 4).unwrap();
        let m = m.delete_layer(2).unwrap();
        let back = TransformerModel::<f32>::from_container(&m.to_container().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m = TransformerModel::<f32>::init(ModelConfig::tiny(1, 8, 2), 4).unwrap();
        let mut c = m.to_container().unwrap();
        let mut cfg = m.config.clone();
        cfg.d_ff = 16;
        c.set_meta("config", &cfg).unwrap();
        assert!(TransformerModel::<f32>::from_container(&c).is_err());
    }
}
