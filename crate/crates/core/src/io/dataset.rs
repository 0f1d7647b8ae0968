use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::container::TensorContainer;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageLayout {
    /// Always `"CHW"`.
    pub layout: LayoutTag,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayoutTag {
    #[serde(rename = "CHW")]
    Chw,
}

impl ImageLayout {
    pub fn chw(channels: usize, height: usize, width: usize) -> Self {
        Self {
            layout: LayoutTag::Chw,
            channels,
            height,
            width,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub tensor_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

/// On-disk description of a dataset of preprocessed images.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Container path, relative to the manifest file.
    pub container_path: String,
    pub image_layout: ImageLayout,
    pub samples: Vec<SampleRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub id: String,
    pub image: Tensor<T>,
    pub label: Option<usize>,
}

/// Images held in memory, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub layout: ImageLayout,
    pub samples: Vec<Sample<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(layout: ImageLayout, samples: Vec<Sample<T>>) -> Result<Self> {
        for s in &samples {
            if s.image.shape() != layout.shape() {
                return Err(Error::Input(format!(
                    "sample {} has shape {:?}, layout says {:?}",
                    s.id,
                    s.image.shape(),
                    layout.shape()
                )));
            }
        }
        Ok(Self { layout, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Self {
        Self {
            layout: self.layout,
            samples: self.samples.iter().take(n).cloned().collect(),
        }
    }

    /// `n` samples drawn without replacement by `seed`, kept in their original order.
    /// The whole set when `n >= len`.
    pub fn subsample(&self, n: usize, seed: u64) -> Self {
        if n >= self.len() {
            return self.clone();
        }
        let mut idx = rand::seq::index::sample(&mut crate::rng::seeded(seed), self.len(), n).into_vec();
        idx.sort_unstable();
        Self {
            layout: self.layout,
            samples: idx.into_iter().map(|i| self.samples[i].clone()).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            layout: self.layout,
            samples: self
                .samples
                .iter()
                .map(|s| Sample {
                    id: s.id.clone(),
                    image: s.image.cast(),
                    label: s.label,
                })
                .collect(),
        }
    }

    pub fn labels(&self) -> Result<Vec<usize>> {
        self.samples
            .iter()
            .map(|s| {
                s.label
                    .ok_or_else(|| Error::Input(format!("sample {} has no label", s.id)))
            })
            .collect()
    }
}

impl Dataset<f32> {
    /// Resolves a manifest against its container.
    pub fn from_manifest(manifest: &DatasetManifest, container: &TensorContainer) -> Result<Self> {
        let samples = manifest
            .samples
            .iter()
            .map(|r| {
                let t = container
                    .get(&r.tensor_name)
                    .ok_or_else(|| Error::Input(format!("sample tensor {} not in container", r.tensor_name)))?;
                Ok(Sample {
                    id: r.tensor_name.clone(),
                    image: t.clone(),
                    label: r.label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest.image_layout, samples)
    }

    /// Reads a dataset manifest (JSON) and its container.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let cpath = resolve(path, &manifest.container_path);
        let container = TensorContainer::load(&cpath)?;
        Self::from_manifest(&manifest, &container).map_err(|e| e.context(path.display().to_string()))
    }

    /// Writes `<stem>.rtc` and `<stem>.json` into `dir`; returns the manifest path.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let mut container = TensorContainer::new();
        let mut seen = BTreeMap::new();
        for s in &self.samples {
            if seen.insert(s.id.clone(), ()).is_some() {
                return Err(Error::Input(format!("duplicate sample id {}", s.id)));
            }
            container.insert(s.id.clone(), s.image.clone());
        }
        let rtc = format!("{stem}.rtc");
        container.save(dir.join(&rtc))?;
        let manifest = DatasetManifest {
            container_path: rtc,
            image_layout: self.layout,
            samples: self
                .samples
                .iter()
                .map(|s| SampleRecord {
                    tensor_name: s.id.clone(),
                    label: s.label,
                })
                .collect(),
        };
        let mpath = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
        Ok(mpath)
    }
}

/// `rel` interpreted relative to the directory holding `base_file`.
pub fn resolve(base_file: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_file.parent().unwrap_or(Path::new(".")).join(p)
    }
}
