//! JSON checkpoints. Doubles are written with round-trip precision, so a
//! save/load cycle reproduces every tensor bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MudaError, Result};
use crate::ndcore::Tensor;
use crate::nets::{Network, NetworkSpec};
use crate::optim::Optimizer;

pub const CHECKPOINT_FORMAT: &str = "muda-checkpoint-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub spec: NetworkSpec,
    /// Current rate of every dropout layer, in layer order.
    pub dropout_rates: Vec<f64>,
    pub tensors: BTreeMap<String, Tensor>,
    /// Optimizer states keyed by role (`"c"`, `"f"`, `"all"`).
    #[serde(default)]
    pub optimizers: BTreeMap<String, Optimizer>,
    /// Epochs completed in the phase that produced the checkpoint.
    pub epoch: usize,
}

impl Checkpoint {
    pub fn capture(net: &Network, epoch: usize) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            spec: net.spec().clone(),
            dropout_rates: net.dropout_rates(),
            tensors: net.state_tensors(),
            optimizers: BTreeMap::new(),
            epoch,
        }
    }

    pub fn with_optimizer(mut self, role: &str, opt: &Optimizer) -> Self {
        self.optimizers.insert(role.to_string(), opt.clone());
        self
    }

    pub fn network(&self) -> Result<Network> {
        let mut net = Network::from_state(self.spec.clone(), &self.tensors)?;
        net.set_each_dropout_rate(&self.dropout_rates)?;
        Ok(net)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let ckpt: Checkpoint = serde_path_to_error::deserialize(&mut de)
            .map_err(|e| MudaError::Validation(format!("malformed checkpoint at `{}`: {}", e.path(), e.inner())))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(MudaError::Validation(format!(
                "unsupported checkpoint format `{}`",
                ckpt.format
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_json()).map_err(|e| MudaError::io(&path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| MudaError::io(&path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::Mode;
    use crate::nets::ParamScope;
    use crate::optim::OptimizerKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut net = Network::toy(11);
        let x = Tensor::from_rows(&[vec![0.1, -0.3], vec![1.0 / 3.0, 2.0], vec![-0.7, 0.2]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, trace) = net.forward(&x, Mode::Train, true, &mut rng).unwrap();
        net.commit_running_stats(&trace).unwrap();
        net.set_dropout_rates(0.25, 0.0).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::adam(), 1e-3, 5e-4).unwrap();
        for p in net.parameters_mut(ParamScope::All) {
            p.grad = p.value.map(|v| v.sin() / 7.0);
        }
        opt.step(&mut net.parameters_mut(ParamScope::All)).unwrap();

        let ckpt = Checkpoint::capture(&net, 4).with_optimizer("all", &opt);
        let back = Checkpoint::from_json(&ckpt.to_json()).unwrap();
        assert_eq!(back, ckpt);
        let restored = back.network().unwrap();
        assert_eq!(restored.state_tensors(), net.state_tensors());
        assert_eq!(restored.dropout_rates(), vec![0.25]);
        assert_eq!(restored.scores(&x).unwrap(), net.scores(&x).unwrap());
    }

    #[test]
    fn rejects_foreign_format() {
        let mut ckpt = Checkpoint::capture(&Network::toy(0), 0);
        ckpt.format = "other".into();
        assert!(Checkpoint::from_json(&ckpt.to_json()).is_err());
        assert!(Checkpoint::from_json("{\"format\": 3}").is_err());
    }
}
