//! Model checkpoints as tagged JSON.
//!
//! A checkpoint keeps the full-precision posterior, the input standardization
//! it was trained with, the training configuration and, for a quantized
//! model, the plan it must be evaluated with.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bnn::{BnnModel, TrainConfig};
use crate::io::write_atomic;
use crate::qat::QuantizedModel;
use crate::quant::QuantPlan;
use crate::synth::Standardization;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "gearqat-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub model: BnnModel,
    pub stats: Standardization,
    pub train_config: TrainConfig,
    pub plan: Option<QuantPlan>,
}

impl Checkpoint {
    pub fn new(model: BnnModel, stats: Standardization, train_config: TrainConfig, plan: Option<QuantPlan>) -> Self {
        Self { format: CHECKPOINT_FORMAT.to_string(), model, stats, train_config, plan }
    }

    pub fn quantized(&self) -> Option<QuantizedModel> {
        self.plan.as_ref().map(|plan| QuantizedModel { model: self.model.clone(), plan: plan.clone() })
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("expected checkpoint format {CHECKPOINT_FORMAT}, found {}", self.format)));
        }
        self.model.validate()?;
        if let Some(plan) = &self.plan {
            plan.validate()?;
            if !self.model.plan_covers(plan) {
                return Err(Error::Config("checkpoint plan does not cover every quantization site".into()));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck: Self = serde_json::from_slice(bytes)?;
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bnn::Architecture;

    fn sample() -> Checkpoint {
        let model = BnnModel::init(Architecture::desk_scale(64), 0.1, 2).unwrap();
        let stats = Standardization { mean: vec![0.0; 5], std: vec![1.0; 5] };
        Checkpoint::new(model, stats, TrainConfig::default(), None)
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn wrong_tag_is_format_error() {
        let mut ck = sample();
        ck.format = "something-else/9".into();
        let bytes = serde_json::to_vec(&ck).unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(b"{"), Err(Error::Format(_))));
    }
}
