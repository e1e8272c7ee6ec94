use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use super::mlp::{Mlp, MlpSpec};
use super::optim::{Adam, EmaShadow, PlateauScheduler};
use crate::error::{invalid, Error, Result};

pub const CHECKPOINT_FORMAT: &str = "boltznce-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which parameter copy is used when the model is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceWeights {
    Ema,
    Raw,
}

/// JSON checkpoint: architecture, flat parameters, EMA shadow, optimizer and
/// scheduler state, plus free-form model metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub spec: MlpSpec,
    pub layer_shapes: Vec<[usize; 2]>,
    pub params: Vec<f64>,
    pub ema: Option<EmaShadow>,
    pub optimizer: Option<Adam>,
    pub scheduler: Option<PlateauScheduler>,
    pub inference_weights: InferenceWeights,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn new(kind: &str, net: &Mlp, metadata: serde_json::Value) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            kind: kind.to_string(),
            spec: net.spec().clone(),
            layer_shapes: net.spec().layer_shapes(),
            params: net.params().to_vec(),
            ema: None,
            optimizer: None,
            scheduler: None,
            inference_weights: InferenceWeights::Raw,
            metadata,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    fn validate(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(invalid(format!("not a checkpoint: format '{}'", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(invalid(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        if self.layer_shapes != self.spec.layer_shapes() {
            return Err(Error::ShapeMismatch(
                "layer shapes disagree with the architecture".into(),
            ));
        }
        let n = self.spec.param_count();
        let bad_ema = self.ema.as_ref().is_some_and(|e| e.shadow.len() != n);
        let bad_opt = self.optimizer.as_ref().is_some_and(|o| o.len() != n);
        if self.params.len() != n || bad_ema || bad_opt {
            return Err(Error::ShapeMismatch(
                "parameter vectors disagree with the architecture".into(),
            ));
        }
        Ok(())
    }

    /// Network with the parameters selected by `inference_weights`.
    pub fn inference_net(&self) -> Result<Mlp> {
        let params = match (&self.inference_weights, &self.ema) {
            (InferenceWeights::Ema, Some(ema)) => ema.shadow.clone(),
            _ => self.params.clone(),
        };
        Mlp::from_params(self.spec.clone(), params)
    }

    pub fn raw_net(&self) -> Result<Mlp> {
        Mlp::from_params(self.spec.clone(), self.params.clone())
    }
}

/// Short content hash of a parameter vector.
pub fn params_hash(params: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for p in params {
        hasher.update(p.to_le_bytes());
    }
    hex::encode(&hasher.finalize()[..8])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::mlp::MlpSpec;

    #[test]
    fn round_trip_is_bit_exact() {
        let net = Mlp::new(MlpSpec::new(2, 1), 3);
        let mut ckpt = Checkpoint::new("energy", &net, serde_json::json!({"schedule": "trig"}));
        let mut ema = EmaShadow::new(net.params(), 0.999, 10);
        let shifted: Vec<f64> = net.params().iter().map(|p| p * 1.1 + 1e-17).collect();
        ema.update(&shifted);
        ckpt.ema = Some(ema);
        ckpt.optimizer = Some(Adam::new(net.param_count()));
        ckpt.scheduler = Some(PlateauScheduler::new(1e-3));
        ckpt.inference_weights = InferenceWeights::Ema;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        let a: Vec<u64> = back.params.iter().map(|p| p.to_bits()).collect();
        let b: Vec<u64> = net.params().iter().map(|p| p.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(
            back.inference_net().unwrap().params(),
            &ckpt.ema.as_ref().unwrap().shadow[..]
        );
        assert_eq!(params_hash(&back.params), params_hash(net.params()));
    }

    #[test]
    fn rejects_corrupted_shapes() {
        let net = Mlp::new(MlpSpec::new(2, 2), 1);
        let mut ckpt = Checkpoint::new("flow", &net, serde_json::Value::Null);
        ckpt.params.pop();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        ckpt.save(&path).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
