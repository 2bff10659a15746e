//! Checkpoints: a JSON manifest plus one TNS1 file per parameter tensor.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/encoder.top.weight.tns
//! ...
//! ```
//!
//! The manifest records the experiment spec (from which the networks are
//! rebuilt) and, for every tensor, its name, shape and file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::tns;
use crate::trainer::{ExperimentSpec, Model};

pub const FORMAT: &str = "tnet-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub spec: ExperimentSpec,
    pub tensors: Vec<TensorEntry>,
}

fn stores(model: &Model) -> [&ParamStore<f32>; 2] {
    [&model.encoder.params, model.posterior.params()]
}

pub fn save(dir: &Path, spec: &ExperimentSpec, model: &Model) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    for store in stores(model) {
        for (name, t) in store.iter() {
            let file = format!("{name}.tns");
            tns::save(t, dir.join(&file))?;
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                file,
            });
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        spec: spec.clone(),
        tensors,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Format(format!("cannot read checkpoint manifest {}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Format(format!(
            "{} is `{}` version {}, expected `{FORMAT}` version {VERSION}",
            path.display(),
            manifest.format,
            manifest.version
        )));
    }
    Ok(manifest)
}

fn fill(store: &mut ParamStore<f32>, manifest: &Manifest, dir: &Path) -> Result<()> {
    for (name, t) in store.iter_mut() {
        let entry = manifest
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor `{name}` required by its config")))?;
        if entry.shape != t.shape() {
            return Err(Error::shape(
                "checkpoint_load",
                format!("tensor `{name}`: checkpoint {:?}, config expects {:?}", entry.shape, t.shape()),
            ));
        }
        let loaded: crate::tensor::Tensor<f32> = tns::load(dir.join(&entry.file))?;
        if loaded.shape() != t.shape() {
            return Err(Error::shape(
                "checkpoint_load",
                format!("tensor `{name}`: file {:?}, config expects {:?}", loaded.shape(), t.shape()),
            ));
        }
        t.data_mut().copy_from_slice(loaded.data());
    }
    Ok(())
}

/// Rebuilds the networks described by the manifest and loads every tensor.
/// A tensor whose stored shape disagrees with the config is named in the
/// error, as is any tensor the checkpoint has but the networks do not.
pub fn load(dir: &Path) -> Result<(ExperimentSpec, Model)> {
    let manifest = read_manifest(dir)?;
    let spec = manifest.spec.clone();
    spec.validate()?;
    let mut model = Model::init(&spec)?;
    fill(&mut model.encoder.params, &manifest, dir)?;
    fill(model.posterior.params_mut(), &manifest, dir)?;
    if let Some(extra) = manifest.tensors.iter().find(|e| {
        model.encoder.params.find(&e.name).is_none() && model.posterior.params().find(&e.name).is_none()
    }) {
        return Err(Error::Format(format!(
            "checkpoint tensor `{}` does not belong to the configured networks",
            extra.name
        )));
    }
    Ok((spec, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::SynthSpec;
    use crate::trainer::{Mode, Supervision, Task};

    fn spec() -> ExperimentSpec {
        ExperimentSpec {
            mode: Mode::Tnet,
            supervision: Supervision::Shape,
            task: Task::Localization,
            data: SynthSpec {
                count: 4,
                size: 16,
                radius: (2.0, 3.0),
                ..SynthSpec::default()
            },
            model: ModelConfig {
                growth_rate: 2,
                bottleneck_channels: 1,
                level_channels: [4, 6, 8],
                layers_per_block: 1,
                input_channels: 1,
                head_channels: 4,
            },
            seed: 11,
            ..ExperimentSpec::default()
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec();
        let mut model = Model::init(&s).unwrap();
        model.posterior.params_mut().iter_mut().for_each(|(_, t)| t.data_mut()[0] = 0.123);
        save(dir.path(), &s, &model).unwrap();
        let (s2, loaded) = load(dir.path()).unwrap();
        assert_eq!(s2, s);
        assert_eq!(loaded.encoder.params.checksum(), model.encoder.params.checksum());
        assert_eq!(loaded.posterior.params().checksum(), model.posterior.params().checksum());
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec();
        save(dir.path(), &s, &Model::init(&s).unwrap()).unwrap();
        let mut manifest = read_manifest(dir.path()).unwrap();
        manifest.spec.model.head_channels = 5;
        fs::write(dir.path().join(MANIFEST), serde_json::to_string(&manifest).unwrap()).unwrap();
        let err = load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("loc.hidden.weight"), "{err}");
    }

    #[test]
    fn missing_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load(dir.path()).unwrap_err().to_string().contains("manifest"));
    }
}
