use std::collections::BTreeMap;
use std::path::Path;

use crate::encoder::{BlockWeights, EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::io::container::TensorContainer;
use crate::tensor::Tensor;

/// Builds a model from container tensors, validating every shape against `config`.
pub fn load_model(container: &TensorContainer, config: &EncoderConfig) -> Result<EncoderModel<f32>> {
    config.validate()?;
    let expected: BTreeMap<String, Vec<usize>> = EncoderModel::<f32>::expected_shapes(config).into_iter().collect();
    let take = |name: &str| -> Result<Tensor<f32>> {
        let t = container.require(name)?;
        let shape = &expected[name];
        if t.shape() != shape.as_slice() {
            return Err(Error::Load(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t.clone())
    };
    let mut blocks = Vec::with_capacity(config.depth);
    for b in 0..config.depth {
        let mut blk = BlockWeights::zeros(config);
        for (suffix, slot) in blk.named_mut() {
            *slot = take(&format!("blocks.{b}.{suffix}"))?;
        }
        blocks.push(blk);
    }
    let model = EncoderModel {
        patch_w: take("patch_embed.w")?,
        patch_b: take("patch_embed.b")?,
        pos_embed: take("pos_embed")?,
        cls_token: config.has_cls().then(|| take("cls_token")).transpose()?,
        ln_pre: config
            .pre_norm
            .then(|| Ok::<_, Error>((take("ln_pre.gamma")?, take("ln_pre.beta")?)))
            .transpose()?,
        blocks,
        ln_final_gamma: take("ln_final.gamma")?,
        ln_final_beta: take("ln_final.beta")?,
        head_w: config.head_dim.map(|_| take("head.w")).transpose()?,
        config: config.clone(),
    };
    model.validate()?;
    Ok(model)
}

pub fn model_to_container(model: &EncoderModel<f32>) -> TensorContainer {
    let mut c = TensorContainer::new();
    for (name, t) in model.named_tensors() {
        c.insert(name, t.clone());
    }
    c
}

pub fn parse_config(text: &str) -> Result<EncoderConfig> {
    let cfg: EncoderConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("model config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `<model>.rtc` and its JSON config.
pub fn load_model_files(rtc: impl AsRef<Path>, config: impl AsRef<Path>) -> Result<EncoderModel<f32>> {
    let cpath = config.as_ref();
    let text = std::fs::read_to_string(cpath).map_err(|e| Error::io(cpath, e))?;
    let cfg = parse_config(&text)?;
    let container = TensorContainer::load(rtc.as_ref())?;
    load_model(&container, &cfg)
}

pub fn save_model_files(model: &EncoderModel<f32>, rtc: impl AsRef<Path>, config: impl AsRef<Path>) -> Result<()> {
    model_to_container(model).save(rtc.as_ref())?;
    let cpath = config.as_ref();
    let text = serde_json::to_string_pretty(&model.config).expect("config serializes");
    std::fs::write(cpath, text + "\n").map_err(|e| Error::io(cpath, e))
}
