use std::path::Path;

use crate::config::{parse_pairs, RunConfig, KEYS};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::sevx::Container;
use crate::tensor::Tensor;

use super::{ModelSpec, SpeakerNet};

const KIND: &str = "severif.checkpoint";

/// Architecture description stored in checkpoint metadata.
pub fn architecture_text(model: &SpeakerNet) -> String {
    let cfg = RunConfig {
        model: model.spec.clone(),
        se: model.se.clone(),
        ..RunConfig::default()
    };
    let mut s = format!("kind = \"{KIND}\"\nmodel.num_speakers = {}\n", model.spec.num_speakers);
    for key in KEYS.iter().filter(|k| k.starts_with("model.") || k.starts_with("se.")) {
        s.push_str(&format!("{key} = {}\n", cfg.get(key).expect("listed key")));
    }
    s
}

/// Parameters and batch-norm running statistics in a container.
pub fn to_container(model: &SpeakerNet) -> Result<Container> {
    let mut c = Container::new(architecture_text(model));
    for p in model.params() {
        c.push(p.name(), p.value.clone())?;
    }
    for bn in model.batch_norms() {
        let n = bn.running_mean.len();
        c.push(format!("{}.running_mean", bn.name()), Tensor::new([n], bn.running_mean.clone())?)?;
        c.push(format!("{}.running_var", bn.name()), Tensor::new([n], bn.running_var.clone())?)?;
    }
    Ok(c)
}

pub fn save_checkpoint(model: &SpeakerNet, path: &Path) -> Result<()> {
    to_container(model)?.save(path)
}

fn parse_architecture(text: &str, path: &Path) -> Result<(ModelSpec, crate::se::SeConfig)> {
    let mut cfg = RunConfig::default();
    let mut num_speakers = None;
    let mut kind = None;
    for (k, v) in parse_pairs(text, path)? {
        match k.as_str() {
            "kind" => kind = v.as_str().map(str::to_string),
            "model.num_speakers" => num_speakers = v.as_integer(),
            _ => cfg.set(&k, &v)?,
        }
    }
    if kind.as_deref() != Some(KIND) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 12,
            msg: format!("metadata kind {kind:?} is not a model checkpoint"),
        });
    }
    cfg.model.num_speakers = num_speakers.ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        offset: 12,
        msg: "metadata lacks model.num_speakers".into(),
    })? as usize;
    Ok((cfg.model, cfg.se))
}

/// Rebuilds a model from a container, checking that every tensor is present
/// with the expected shape and that nothing is left over.
pub fn from_container(c: &Container, path: &Path) -> Result<SpeakerNet> {
    let (spec, se) = parse_architecture(&c.metadata, path)?;
    let mut model = SpeakerNet::build(&spec, &se, 0)?;
    let corrupt = |msg: String| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        msg,
    };
    let fetch = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
        let t = c.get(name).ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(corrupt(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t.clone())
    };
    let mut used = 0;
    for p in model.params_mut() {
        p.value = fetch(p.name(), p.value.shape())?;
        used += 1;
    }
    for bn in model.batch_norms_mut() {
        let n = bn.running_mean.len();
        bn.running_mean = fetch(&format!("{}.running_mean", bn.name()), &[n])?.into_data();
        bn.running_var = fetch(&format!("{}.running_var", bn.name()), &[n])?.into_data();
        used += 2;
    }
    if used != c.len() {
        return Err(corrupt(format!("{} unexpected tensors in checkpoint", c.len() - used)));
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<SpeakerNet> {
    from_container(&Container::load(path)?, path)
}
