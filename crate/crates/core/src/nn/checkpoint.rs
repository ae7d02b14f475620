//! JSON checkpoints. Masks are not stored; they are rebuilt from the plan,
//! and the plan itself is checked against the feeder on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{InputLayout, MaskedNetwork, NnError, TrainConfig};
use crate::grid::{feeder_hash, FeederModel};
use crate::topology::MaskPlan;

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: u32,
    pub feeder_hash: String,
    pub plan_hash: String,
    pub plan: MaskPlan,
    pub input: InputLayout,
    pub in_mean: Vec<f64>,
    pub in_scale: Vec<f64>,
    pub out_mean: Vec<f64>,
    pub out_scale: Vec<f64>,
    pub tensors: Vec<Vec<f64>>,
    pub config: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn capture(model: &FeederModel, net: &MaskedNetwork, config: Option<&TrainConfig>) -> Self {
        Checkpoint {
            schema: CHECKPOINT_SCHEMA,
            feeder_hash: feeder_hash(model),
            plan_hash: net.plan().hash(),
            plan: net.plan().clone(),
            input: net.input_layout().clone(),
            in_mean: net.in_mean.clone(),
            in_scale: net.in_scale.clone(),
            out_mean: net.out_mean.clone(),
            out_scale: net.out_scale.clone(),
            tensors: net.tensors.clone(),
            config: config.cloned(),
        }
    }

    /// Rebuilds the network after checking it belongs to `model`.
    pub fn restore(self, model: &FeederModel) -> Result<MaskedNetwork, NnError> {
        let bad = |msg: String| NnError::Checkpoint(msg);
        if self.schema != CHECKPOINT_SCHEMA {
            return Err(bad(format!("schema {} is not supported", self.schema)));
        }
        if self.feeder_hash != feeder_hash(model) {
            return Err(bad("trained on a different feeder".into()));
        }
        if self.plan.hash() != self.plan_hash {
            return Err(bad("stored plan does not match its hash".into()));
        }
        let expected = MaskPlan::for_pmus(model, &self.plan.pmu_buses, self.plan.kind, self.plan.block_width)
            .map_err(|e| bad(e.to_string()))?;
        if expected.hash() != self.plan_hash {
            return Err(bad("plan does not follow from the feeder and PMU placement".into()));
        }
        let mut net = MaskedNetwork::skeleton(self.plan, self.input);
        let w = net.input_layout().width();
        let slots = net.output_len();
        if self.in_mean.len() != w || self.in_scale.len() != w || self.out_mean.len() != slots || self.out_scale.len() != slots {
            return Err(bad("normalization lengths do not match the network".into()));
        }
        if self.tensors.len() != net.tensors.len() || self.tensors.iter().zip(&net.tensors).any(|(a, b)| a.len() != b.len()) {
            return Err(bad("tensor shapes do not match the plan".into()));
        }
        net.in_mean = self.in_mean;
        net.in_scale = self.in_scale;
        net.out_mean = self.out_mean;
        net.out_scale = self.out_scale;
        net.tensors = self.tensors;
        // A tampered file could carry nonzero masked entries.
        let before = net.tensors.clone();
        net.apply_masks();
        if net.tensors != before {
            return Err(bad("masked weights are nonzero".into()));
        }
        Ok(net)
    }
}

pub fn save_checkpoint(path: &Path, model: &FeederModel, net: &MaskedNetwork, config: Option<&TrainConfig>) -> Result<(), NnError> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &Checkpoint::capture(model, net, config))?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, model: &FeederModel) -> Result<MaskedNetwork, NnError> {
    let ck: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    ck.restore(model)
}
