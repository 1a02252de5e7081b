use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AutogradError, ParamBundle, Tensor};

/// On-disk parameter snapshot: `{ "seed", "step", "params": { name: { "shape", "data" } } }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seed: u64,
    pub step: usize,
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_bundle(bundle: &ParamBundle, step: usize) -> Self {
        Checkpoint { seed: bundle.seed, step, params: bundle.iter().map(|(k, v)| (k.clone(), v.clone())).collect() }
    }

    pub fn into_bundle(self) -> ParamBundle {
        let mut b = ParamBundle::new(self.seed);
        for (k, v) in self.params {
            b.insert(&k, v);
        }
        b
    }
}

pub fn save_checkpoint(path: &Path, bundle: &ParamBundle, step: usize) -> Result<(), AutogradError> {
    let ck = Checkpoint::from_bundle(bundle, step);
    let text = serde_json::to_string(&ck).map_err(|e| AutogradError::Checkpoint(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| AutogradError::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamBundle, usize), AutogradError> {
    let text = std::fs::read_to_string(path).map_err(|e| AutogradError::Checkpoint(format!("{}: {e}", path.display())))?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| AutogradError::Checkpoint(format!("{}: {e}", path.display())))?;
    for (name, t) in &ck.params {
        let n: usize = t.shape().iter().product();
        if n != t.len() {
            return Err(AutogradError::Checkpoint(format!("{name}: shape {:?} holds {n} values, found {}", t.shape(), t.len())));
        }
    }
    let step = ck.step;
    Ok((ck.into_bundle(), step))
}
