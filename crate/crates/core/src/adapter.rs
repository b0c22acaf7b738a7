//! LoRA adapters and their on-disk form.
//!
//! An adapter directory holds `adapter_model.safetensors` and
//! `adapter_config.json`. Tensors named `<path>.lora_A.weight` (shape
//! `[r, d_in]`) and `<path>.lora_B.weight` (shape `[d_out, r]`) are paired
//! by their shared `<path>` prefix.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::safetensors::{read_safetensors, write_safetensors, Dtype, TensorEntry, TensorMap};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const WEIGHTS_FILE: &str = "adapter_model.safetensors";
pub const CONFIG_FILE: &str = "adapter_config.json";

const A_MARKER: &str = ".lora_A";
const B_MARKER: &str = ".lora_B";
const A_SUFFIX: &str = ".lora_A.weight";
const B_SUFFIX: &str = ".lora_B.weight";

/// One low-rank pair: `a` is `r x d_in`, `b` is `d_out x r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer<T> {
    pub a: Matrix<T>,
    pub b: Matrix<T>,
}

impl<T: Scalar> LoraLayer<T> {
    pub fn new(a: Matrix<T>, b: Matrix<T>) -> Result<Self> {
        if a.rows() != b.cols() {
            return Err(Error::dim(
                "LoraLayer::new",
                format!("A has {} rows but B has {} columns", a.rows(), b.cols()),
            ));
        }
        if a.cols() == 0 || b.rows() == 0 {
            return Err(Error::dim("LoraLayer::new", "zero input or output dimension"));
        }
        Ok(Self { a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    /// `(d_in, d_out)`
    pub fn dims(&self) -> (usize, usize) {
        (self.d_in(), self.d_out())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub name: String,
    pub layers: BTreeMap<String, LoraLayer<T>>,
    /// `lora_alpha`; the forward pass applies `alpha / rank`.
    pub alpha: T,
    pub rank: usize,
    pub scaling_folded: bool,
    pub target_modules: Vec<String>,
    /// Config keys other than `r`, `lora_alpha` and `target_modules`,
    /// written back verbatim on save.
    pub extra_config: Map<String, Value>,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn new(
        name: impl Into<String>,
        layers: BTreeMap<String, LoraLayer<T>>,
        alpha: T,
        rank: usize,
    ) -> Result<Self> {
        let adapter = Self {
            name: name.into(),
            layers,
            alpha,
            rank,
            scaling_folded: false,
            target_modules: Vec::new(),
            extra_config: Map::new(),
        };
        adapter.validate()?;
        Ok(adapter)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Domain(format!("adapter {} has rank 0", self.name)));
        }
        if !(self.alpha > T::zero()) || !self.alpha.is_finite() {
            return Err(Error::Domain(format!(
                "adapter {} has non-positive alpha {}",
                self.name, self.alpha
            )));
        }
        for (path, layer) in &self.layers {
            if layer.rank() != self.rank {
                return Err(Error::InvalidLayer {
                    layer: path.clone(),
                    detail: format!("rank {} differs from adapter rank {}", layer.rank(), self.rank),
                });
            }
        }
        Ok(())
    }

    /// Multiplier applied to `B·A` in the forward pass.
    pub fn scale(&self) -> T {
        self.alpha / T::from_count(self.rank)
    }

    pub fn layer(&self, path: &str) -> Option<&LoraLayer<T>> {
        self.layers.get(path)
    }

    pub fn cast<U: Scalar>(&self) -> LoraAdapter<U> {
        let conv = |m: &Matrix<T>| {
            Matrix::new(m.rows(), m.cols(), m.data().iter().map(|v| U::lit(v.as_f64())).collect())
                .expect("cast keeps shape")
        };
        LoraAdapter {
            name: self.name.clone(),
            layers: self
                .layers
                .iter()
                .map(|(k, l)| (k.clone(), LoraLayer { a: conv(&l.a), b: conv(&l.b) }))
                .collect(),
            alpha: U::lit(self.alpha.as_f64()),
            rank: self.rank,
            scaling_folded: self.scaling_folded,
            target_modules: self.target_modules.clone(),
            extra_config: self.extra_config.clone(),
        }
    }
}

/// On-disk dtype for [`save_adapter`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SaveDtype {
    #[default]
    F32,
    F16,
}

impl SaveDtype {
    fn dtype(self) -> Dtype {
        match self {
            SaveDtype::F32 => Dtype::F32,
            SaveDtype::F16 => Dtype::F16,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Skip tensors that are not LoRA A/B weights instead of failing.
    pub ignore_extra: bool,
}

pub fn load_adapter<T: Scalar>(dir: impl AsRef<Path>) -> Result<LoraAdapter<T>> {
    load_adapter_with(dir, LoadOptions::default())
}

pub fn load_adapter_with<T: Scalar>(
    dir: impl AsRef<Path>,
    opts: LoadOptions,
) -> Result<LoraAdapter<T>> {
    let dir = dir.as_ref();
    let config_path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
    let config: Value = serde_json::from_str(&text).map_err(|e| Error::BadConfigValue {
        key: "<root>",
        detail: e.to_string(),
    })?;
    let tensors = read_safetensors(dir.join(WEIGHTS_FILE))?;
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "adapter".into());
    adapter_from_parts(name, &config, &tensors, opts)
}

/// Builds an adapter from a parsed config and tensor map.
pub fn adapter_from_parts<T: Scalar>(
    name: String,
    config: &Value,
    tensors: &TensorMap,
    opts: LoadOptions,
) -> Result<LoraAdapter<T>> {
    let config = config.as_object().ok_or(Error::BadConfigValue {
        key: "<root>",
        detail: "config is not a JSON object".into(),
    })?;
    let rank = config.get("r").ok_or(Error::MissingConfigKey("r"))?;
    let rank = rank.as_u64().filter(|&r| r > 0).ok_or_else(|| Error::BadConfigValue {
        key: "r",
        detail: format!("expected a positive integer, got {rank}"),
    })? as usize;
    let alpha = config.get("lora_alpha").ok_or(Error::MissingConfigKey("lora_alpha"))?;
    let alpha = alpha.as_f64().ok_or_else(|| Error::BadConfigValue {
        key: "lora_alpha",
        detail: format!("expected a number, got {alpha}"),
    })?;
    let targets = config.get("target_modules").ok_or(Error::MissingConfigKey("target_modules"))?;
    let target_modules = targets
        .as_array()
        .and_then(|a| a.iter().map(|v| v.as_str().map(str::to_string)).collect::<Option<Vec<_>>>())
        .ok_or_else(|| Error::BadConfigValue {
            key: "target_modules",
            detail: format!("expected an array of strings, got {targets}"),
        })?;
    let extra_config: Map<String, Value> = config
        .iter()
        .filter(|(k, _)| !matches!(k.as_str(), "r" | "lora_alpha" | "target_modules"))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();

    let mut a_parts: BTreeMap<String, &str> = BTreeMap::new();
    let mut b_parts: BTreeMap<String, &str> = BTreeMap::new();
    for tensor_name in tensors.tensors.keys() {
        if let Some(prefix) = tensor_name.strip_suffix(A_SUFFIX) {
            a_parts.insert(prefix.to_string(), tensor_name);
        } else if let Some(prefix) = tensor_name.strip_suffix(B_SUFFIX) {
            b_parts.insert(prefix.to_string(), tensor_name);
        } else if !opts.ignore_extra
            || tensor_name.contains(A_MARKER)
            || tensor_name.contains(B_MARKER)
        {
            // A/B tensors under an unexpected naming scheme are never skipped silently.
            return Err(Error::ExtraTensor(tensor_name.clone()));
        }
    }
    for (prefix, tensor_name) in a_parts.iter().chain(&b_parts) {
        if !(a_parts.contains_key(prefix) && b_parts.contains_key(prefix)) {
            return Err(Error::UnpairedTensor(tensor_name.to_string()));
        }
    }

    let mut layers = BTreeMap::new();
    for (prefix, a_name) in &a_parts {
        let b_name = b_parts[prefix];
        let a = matrix_from_entry::<T>(a_name, &tensors.tensors[*a_name])?;
        let b = matrix_from_entry::<T>(b_name, &tensors.tensors[b_name])?;
        if a.rows() != b.cols() {
            return Err(Error::InvalidLayer {
                layer: prefix.clone(),
                detail: format!(
                    "A is {}x{} but B is {}x{}",
                    a.rows(),
                    a.cols(),
                    b.rows(),
                    b.cols()
                ),
            });
        }
        if a.rows() != rank {
            return Err(Error::ConfigRankMismatch {
                layer: prefix.clone(),
                config_rank: rank,
                tensor_rank: a.rows(),
            });
        }
        let layer = LoraLayer::new(a, b).map_err(|e| Error::InvalidLayer {
            layer: prefix.clone(),
            detail: e.to_string(),
        })?;
        layers.insert(prefix.clone(), layer);
    }

    let mut adapter = LoraAdapter::new(name, layers, T::lit(alpha), rank)?;
    adapter.target_modules = target_modules;
    adapter.extra_config = extra_config;
    Ok(adapter)
}

fn matrix_from_entry<T: Scalar>(name: &str, entry: &TensorEntry) -> Result<Matrix<T>> {
    if entry.shape.len() != 2 {
        return Err(Error::TensorLayout {
            name: name.to_string(),
            detail: format!("expected a 2-D tensor, got shape {:?}", entry.shape),
        });
    }
    let values = entry.to_f64_vec(name)?;
    let data = values.into_iter().map(T::lit).collect();
    Matrix::new(entry.shape[0], entry.shape[1], data).map_err(|e| Error::TensorLayout {
        name: name.to_string(),
        detail: e.to_string(),
    })
}

/// Tensor map holding the adapter weights at `dtype`.
pub fn adapter_tensors<T: Scalar>(adapter: &LoraAdapter<T>, dtype: SaveDtype) -> Result<TensorMap> {
    let mut map = TensorMap::new();
    for (path, layer) in &adapter.layers {
        for (suffix, m) in [(A_SUFFIX, &layer.a), (B_SUFFIX, &layer.b)] {
            let values: Vec<f64> = m.data().iter().map(|v| v.as_f64()).collect();
            let entry =
                TensorEntry::from_f64_values(&values, vec![m.rows(), m.cols()], dtype.dtype())?;
            map.insert(format!("{path}{suffix}"), entry);
        }
    }
    Ok(map)
}

/// Config JSON: preserved extra keys plus `r`, `lora_alpha`, `target_modules`.
pub fn adapter_config<T: Scalar>(adapter: &LoraAdapter<T>) -> Value {
    let mut config = adapter.extra_config.clone();
    config.insert("r".into(), Value::from(adapter.rank));
    config.insert("lora_alpha".into(), Value::from(adapter.alpha.as_f64()));
    config.insert("target_modules".into(), Value::from(adapter.target_modules.clone()));
    Value::Object(config)
}

pub fn save_adapter<T: Scalar>(
    adapter: &LoraAdapter<T>,
    dir: impl AsRef<Path>,
    dtype: SaveDtype,
) -> Result<()> {
    let dir = dir.as_ref();
    adapter.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_safetensors(&adapter_tensors(adapter, dtype)?, dir.join(WEIGHTS_FILE))?;
    let config_path = dir.join(CONFIG_FILE);
    let mut text = serde_json::to_string_pretty(&adapter_config(adapter))
        .expect("config serializes");
    text.push('\n');
    std::fs::write(&config_path, text).map_err(|e| Error::io(&config_path, e))
}

/// Sorted union of the target modules of several adapters.
pub fn merged_target_modules<T>(adapters: &[LoraAdapter<T>]) -> Vec<String> {
    adapters
        .iter()
        .flat_map(|a| a.target_modules.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}
