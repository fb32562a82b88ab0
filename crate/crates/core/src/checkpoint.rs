//! Model checkpoints: one safetensors archive holding every trainable
//! parameter, the calibration statistics and optimizer moments, plus a JSON
//! manifest in the archive metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrdError};
use crate::model::{ModelConfig, TrdModel};
use crate::networks::BackboneProfile;
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::scoring::CalibrationStats;
use crate::tensor::Tensor;
use crate::weights::{serialize, Archive, NamedBytes};

pub const FORMAT: &str = "trd-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
const MANIFEST_KEY: &str = "manifest";
const CALIBRATION_KEY: &str = "calibration";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub config: ModelConfig,
    pub config_hash: String,
    pub modules: Vec<String>,
    /// Completed training epochs.
    pub epoch: usize,
    pub has_calibration: bool,
    /// Step counters of saved optimizers, keyed by optimizer name.
    pub optimizer_steps: BTreeMap<String, u64>,
}

/// Optimizer state to persist alongside the model.
pub struct OptimizerState<'a, T> {
    pub name: String,
    pub adam: &'a Adam<T>,
}

pub struct Loaded<T> {
    pub model: TrdModel<T>,
    pub manifest: Manifest,
    archive: Archive,
}

impl<T: Scalar> Loaded<T> {
    /// Restore a saved optimizer's moments and step counter into `adam`,
    /// which must cover the same parameters. Returns false if the
    /// checkpoint holds no state under `name`.
    pub fn restore_optimizer(&self, name: &str, adam: &mut Adam<T>) -> Result<bool> {
        let Some(&step) = self.manifest.optimizer_steps.get(name) else {
            return Ok(false);
        };
        let params = self.model.params();
        for (slot, &id) in adam.params.iter().enumerate() {
            let pname = &params.entry(id).name;
            let m: Tensor<T> = self.archive.tensor(&format!("optim.{name}.m.{pname}"))?;
            let v: Tensor<T> = self.archive.tensor(&format!("optim.{name}.v.{pname}"))?;
            m.ensure_shape(adam.first[slot].shape(), "optimizer moment")
                .map_err(|e| TrdError::Checkpoint(e.to_string()))?;
            v.ensure_shape(adam.second[slot].shape(), "optimizer moment")
                .map_err(|e| TrdError::Checkpoint(e.to_string()))?;
            adam.first[slot] = m;
            adam.second[slot] = v;
        }
        adam.step = step;
        Ok(true)
    }
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &TrdModel<T>,
    epoch: usize,
    optimizers: &[OptimizerState<'_, T>],
) -> Result<()> {
    let params = model.params();
    let mut tensors: Vec<NamedBytes> = params
        .entries()
        .iter()
        .map(|e| NamedBytes::from_tensor(e.name.clone(), &e.value))
        .collect();
    if let Some(c) = &model.calibration {
        let values = vec![c.mean[0], c.mean[1], c.std[0], c.std[1]];
        tensors.push(NamedBytes::from_tensor(
            CALIBRATION_KEY,
            &Tensor::from_vec(&[4], values)?,
        ));
    }
    let mut optimizer_steps = BTreeMap::new();
    for o in optimizers {
        optimizer_steps.insert(o.name.clone(), o.adam.step);
        for (slot, &id) in o.adam.params.iter().enumerate() {
            let pname = &params.entry(id).name;
            tensors.push(NamedBytes::from_tensor(format!("optim.{}.m.{pname}", o.name), &o.adam.first[slot]));
            tensors.push(NamedBytes::from_tensor(format!("optim.{}.v.{pname}", o.name), &o.adam.second[slot]));
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        dtype: format!("{:?}", T::DTYPE),
        config: model.config().clone(),
        config_hash: model.config().fingerprint(),
        modules: model.module_names(),
        epoch,
        has_calibration: model.calibration.is_some(),
        optimizer_steps,
    };
    let meta = HashMap::from([(
        MANIFEST_KEY.to_string(),
        serde_json::to_string(&manifest).expect("manifest serializes"),
    )]);
    let bytes = serialize(&tensors, Some(meta))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| TrdError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| TrdError::io(path, e))
}

/// Read a checkpoint, rebuilding the teacher from the stored profile.
/// With `expected` set, a different backbone profile is an error.
pub fn load_checkpoint<T: Scalar>(path: &Path, expected: Option<&BackboneProfile>) -> Result<Loaded<T>> {
    let bytes = std::fs::read(path).map_err(|e| TrdError::io(path, e))?;
    let archive = Archive::from_bytes(bytes)?;
    let raw = archive
        .metadata()
        .and_then(|m| m.get(MANIFEST_KEY).cloned())
        .ok_or_else(|| TrdError::Checkpoint(format!("{} has no manifest", path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&raw).map_err(|e| TrdError::Checkpoint(format!("unreadable manifest: {e}")))?;
    if manifest.format != FORMAT || manifest.version != FORMAT_VERSION {
        return Err(TrdError::Checkpoint(format!(
            "unsupported checkpoint {} v{} (expected {FORMAT} v{FORMAT_VERSION})",
            manifest.format, manifest.version
        )));
    }
    if manifest.config_hash != manifest.config.fingerprint() {
        return Err(TrdError::Checkpoint("config hash does not match the stored config".into()));
    }
    if let Some(p) = expected {
        if *p != manifest.config.profile {
            return Err(TrdError::Checkpoint(format!(
                "checkpoint was trained with profile {}, not {}",
                manifest.config.profile, p
            )));
        }
    }
    let mut model = TrdModel::<T>::new(manifest.config.clone())?;
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let name = model.params().entry(id).name.clone();
        let t: Tensor<T> = archive.tensor(&name)?;
        t.ensure_shape(model.params().value(id).shape(), &name)
            .map_err(|e| TrdError::Checkpoint(e.to_string()))?;
        *model.params_mut().value_mut(id) = t;
    }
    if manifest.has_calibration {
        let v = archive.f64_values(CALIBRATION_KEY)?;
        if v.len() != 4 {
            return Err(TrdError::Checkpoint("calibration record must hold 4 values".into()));
        }
        model.calibration = Some(CalibrationStats {
            mean: [v[0], v[1]],
            std: [v[2], v[3]],
        });
    }
    Ok(Loaded {
        model,
        manifest,
        archive,
    })
}

impl<T: Scalar> TrdModel<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, self, 0, &[])
    }

    pub fn load(path: &Path, expected: Option<&BackboneProfile>) -> Result<Self> {
        Ok(load_checkpoint(path, expected)?.model)
    }
}
