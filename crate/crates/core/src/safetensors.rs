//! Reader and writer for the safetensors container.
//!
//! Layout: an 8-byte little-endian header length `n`, `n` bytes of JSON
//! mapping tensor names to `{dtype, shape, data_offsets}` (plus an optional
//! `__metadata__` string map), then the packed little-endian tensor data.
//! Offsets are relative to the start of the data region.
//!
//! The writer emits the header with sorted keys and no whitespace, and lays
//! tensors out contiguously in name order, so output is reproducible.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";
/// Guard against absurd header sizes in corrupt files.
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dtype {
    Bool,
    U8,
    I8,
    U16,
    I16,
    F16,
    BF16,
    U32,
    I32,
    F32,
    U64,
    I64,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::Bool | Dtype::U8 | Dtype::I8 => 1,
            Dtype::U16 | Dtype::I16 | Dtype::F16 | Dtype::BF16 => 2,
            Dtype::U32 | Dtype::I32 | Dtype::F32 => 4,
            Dtype::U64 | Dtype::I64 | Dtype::F64 => 8,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Dtype::Bool => "BOOL",
            Dtype::U8 => "U8",
            Dtype::I8 => "I8",
            Dtype::U16 => "U16",
            Dtype::I16 => "I16",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
            Dtype::U32 => "U32",
            Dtype::I32 => "I32",
            Dtype::F32 => "F32",
            Dtype::U64 => "U64",
            Dtype::I64 => "I64",
            Dtype::F64 => "F64",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Ok(match tag {
            "BOOL" => Dtype::Bool,
            "U8" => Dtype::U8,
            "I8" => Dtype::I8,
            "U16" => Dtype::U16,
            "I16" => Dtype::I16,
            "F16" => Dtype::F16,
            "BF16" => Dtype::BF16,
            "U32" => Dtype::U32,
            "I32" => Dtype::I32,
            "F32" => Dtype::F32,
            "U64" => Dtype::U64,
            "I64" => Dtype::I64,
            "F64" => Dtype::F64,
            other => return Err(Error::UnknownDtype(other.to_string())),
        })
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl TensorEntry {
    pub fn new(dtype: Dtype, shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let entry = Self { dtype, shape, data };
        entry.check_len("<new>")?;
        Ok(entry)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn check_len(&self, name: &str) -> Result<()> {
        let expected = self.numel() * self.dtype.size();
        if expected != self.data.len() {
            return Err(Error::TensorLayout {
                name: name.to_string(),
                detail: format!(
                    "{} bytes for dtype {} and shape {:?} (expected {expected})",
                    self.data.len(),
                    self.dtype,
                    self.shape
                ),
            });
        }
        Ok(())
    }

    /// Decodes floating point payloads (F64/F32/F16/BF16) to `f64`.
    pub fn to_f64_vec(&self, name: &str) -> Result<Vec<f64>> {
        let d = &self.data;
        Ok(match self.dtype {
            Dtype::F64 => d
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F32 => d
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect(),
            Dtype::F16 => d
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f64())
                .collect(),
            Dtype::BF16 => d
                .chunks_exact(2)
                .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f64())
                .collect(),
            other => {
                return Err(Error::UnsupportedDtype {
                    name: name.to_string(),
                    dtype: other.to_string(),
                })
            }
        })
    }

    /// Encodes `values` as F32 or F16 (round to nearest).
    pub fn from_f64_values(values: &[f64], shape: Vec<usize>, dtype: Dtype) -> Result<Self> {
        let data: Vec<u8> = match dtype {
            Dtype::F32 => values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
            Dtype::F16 => values
                .iter()
                .flat_map(|&v| half::f16::from_f64(v).to_le_bytes())
                .collect(),
            Dtype::F64 => values.iter().flat_map(|&v| v.to_le_bytes()).collect(),
            Dtype::BF16 => values
                .iter()
                .flat_map(|&v| half::bf16::from_f64(v).to_le_bytes())
                .collect(),
            other => {
                return Err(Error::UnsupportedDtype {
                    name: "<encode>".into(),
                    dtype: other.to_string(),
                })
            }
        };
        Self::new(dtype, shape, data)
    }
}

/// Named tensors plus the optional free-form string metadata block.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TensorMap {
    pub tensors: BTreeMap<String, TensorEntry>,
    pub metadata: Option<BTreeMap<String, String>>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: TensorEntry) {
        self.tensors.insert(name.into(), entry);
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = Map::new();
        let mut offset = 0usize;
        for (name, entry) in &self.tensors {
            entry.check_len(name)?;
            let end = offset + entry.data.len();
            let mut obj = Map::new();
            obj.insert("dtype".into(), Value::from(entry.dtype.tag()));
            obj.insert("shape".into(), Value::from(entry.shape.clone()));
            obj.insert("data_offsets".into(), Value::from(vec![offset, end]));
            header.insert(name.clone(), Value::Object(obj));
            offset = end;
        }
        if let Some(meta) = &self.metadata {
            let obj: Map<String, Value> =
                meta.iter().map(|(k, v)| (k.clone(), Value::from(v.as_str()))).collect();
            header.insert(METADATA_KEY.into(), Value::Object(obj));
        }
        // serde_json's default map is ordered by key, and to_vec is compact.
        let header_bytes = serde_json::to_vec(&Value::Object(header))
            .map_err(|e| Error::HeaderJson(e.to_string()))?;
        let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for entry in self.tensors.values() {
            out.extend_from_slice(&entry.data);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Truncated(format!(
                "{} bytes, need at least 8 for the header length",
                bytes.len()
            )));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        if n == 0 || n > MAX_HEADER_LEN {
            return Err(Error::HeaderLength(n));
        }
        let header_end = 8usize
            .checked_add(n as usize)
            .ok_or(Error::HeaderLength(n))?;
        if header_end > bytes.len() {
            return Err(Error::Truncated(format!(
                "header declares {n} bytes but only {} follow",
                bytes.len() - 8
            )));
        }
        let header: Value = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| Error::HeaderJson(e.to_string()))?;
        let Value::Object(header) = header else {
            return Err(Error::HeaderJson("header is not a JSON object".into()));
        };
        let data = &bytes[header_end..];

        let mut map = TensorMap::new();
        let mut spans: Vec<(usize, usize, String)> = Vec::new();
        for (name, value) in header {
            if name == METADATA_KEY {
                map.metadata = Some(parse_metadata(&value)?);
                continue;
            }
            let (dtype, shape, start, end) = parse_tensor_header(&name, &value)?;
            let numel: usize = shape.iter().product();
            if end < start || end - start != numel * dtype.size() {
                return Err(Error::TensorLayout {
                    name,
                    detail: format!(
                        "offsets [{start}, {end}) do not match dtype {dtype} and shape {shape:?}"
                    ),
                });
            }
            if end > data.len() {
                return Err(Error::Truncated(format!(
                    "tensor {name} ends at byte {end} of a {}-byte data region",
                    data.len()
                )));
            }
            spans.push((start, end, name.clone()));
            map.insert(name, TensorEntry { dtype, shape, data: data[start..end].to_vec() });
        }

        spans.sort();
        let mut cursor = 0usize;
        let mut prev = "<start>".to_string();
        for (start, end, name) in spans {
            if start < cursor {
                return Err(Error::OffsetOverlap { first: prev, second: name });
            }
            if start > cursor {
                return Err(Error::TensorLayout {
                    name,
                    detail: format!("gap in data region before offset {start}"),
                });
            }
            cursor = end;
            prev = name;
        }
        if cursor != data.len() {
            return Err(Error::TensorLayout {
                name: "<data>".into(),
                detail: format!("{} trailing bytes after last tensor", data.len() - cursor),
            });
        }
        Ok(map)
    }
}

fn parse_metadata(value: &Value) -> Result<BTreeMap<String, String>> {
    let obj = value
        .as_object()
        .ok_or_else(|| Error::HeaderJson("__metadata__ is not an object".into()))?;
    obj.iter()
        .map(|(k, v)| {
            v.as_str()
                .map(|s| (k.clone(), s.to_string()))
                .ok_or_else(|| Error::HeaderJson(format!("__metadata__ value for {k} is not a string")))
        })
        .collect()
}

fn parse_tensor_header(name: &str, value: &Value) -> Result<(Dtype, Vec<usize>, usize, usize)> {
    let bad = |detail: &str| Error::HeaderJson(format!("tensor {name}: {detail}"));
    let obj = value.as_object().ok_or_else(|| bad("entry is not an object"))?;
    let dtype = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing dtype"))?;
    let dtype = Dtype::from_tag(dtype)?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing shape"))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize).ok_or_else(|| bad("non-integer dimension")))
        .collect::<Result<Vec<_>>>()?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing data_offsets"))?;
    if offsets.len() != 2 {
        return Err(bad("data_offsets must have two entries"));
    }
    let off = |i: usize| {
        offsets[i]
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| bad("non-integer offset"))
    };
    Ok((dtype, shape, off(0)?, off(1)?))
}

pub fn read_safetensors(path: impl AsRef<Path>) -> Result<TensorMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorMap::from_bytes(&bytes)
}

pub fn write_safetensors(map: &TensorMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = map.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f32_entry(shape: Vec<usize>, values: &[f32]) -> TensorEntry {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        TensorEntry::new(Dtype::F32, shape, data).unwrap()
    }

    fn header_of(bytes: &[u8]) -> String {
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        String::from_utf8(bytes[8..8 + n].to_vec()).unwrap()
    }

    #[test]
    fn empty_map_has_empty_header() {
        let bytes = TensorMap::new().to_bytes().unwrap();
        assert_eq!(bytes, [2, 0, 0, 0, 0, 0, 0, 0, b'{', b'}']);
        assert!(TensorMap::from_bytes(&bytes).unwrap().is_empty());
    }

    #[test]
    fn single_tensor_round_trip() {
        let mut map = TensorMap::new();
        map.insert("w", f32_entry(vec![3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let bytes = map.to_bytes().unwrap();
        let header = header_of(&bytes);
        assert_eq!(header, r#"{"w":{"data_offsets":[0,24],"dtype":"F32","shape":[3,2]}}"#);
        assert_eq!(bytes.len(), 8 + header.len() + 24);
        assert_eq!(TensorMap::from_bytes(&bytes).unwrap(), map);
    }

    #[test]
    fn offsets_are_contiguous_in_name_order() {
        let mut map = TensorMap::new();
        map.insert("b", f32_entry(vec![2], &[1.0, 2.0]));
        map.insert("a", f32_entry(vec![1, 3], &[3.0, 4.0, 5.0]));
        let header = header_of(&map.to_bytes().unwrap());
        assert_eq!(
            header,
            r#"{"a":{"data_offsets":[0,12],"dtype":"F32","shape":[1,3]},"b":{"data_offsets":[12,20],"dtype":"F32","shape":[2]}}"#
        );
    }

    #[test]
    fn metadata_round_trip() {
        let mut map = TensorMap::new();
        map.metadata = Some(BTreeMap::from([("format".to_string(), "pt".to_string())]));
        map.insert("x", f32_entry(vec![1], &[0.5]));
        let back = TensorMap::from_bytes(&map.to_bytes().unwrap()).unwrap();
        assert_eq!(back, map);
    }

    fn raw(header: &str, data: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn zero_header_length_rejected() {
        let bytes = [0u8; 16];
        assert!(matches!(TensorMap::from_bytes(&bytes), Err(Error::HeaderLength(0))));
    }

    #[test]
    fn truncation_detected() {
        assert!(matches!(TensorMap::from_bytes(&[1, 2, 3]), Err(Error::Truncated(_))));
        let h = r#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#;
        assert!(matches!(TensorMap::from_bytes(&raw(h, &[0; 4])), Err(Error::Truncated(_))));
        let mut short_header = raw(h, &[0; 8]);
        short_header.truncate(20);
        assert!(matches!(TensorMap::from_bytes(&short_header), Err(Error::Truncated(_))));
    }

    #[test]
    fn bad_json_rejected() {
        assert!(matches!(TensorMap::from_bytes(&raw("{nope", &[])), Err(Error::HeaderJson(_))));
        assert!(matches!(TensorMap::from_bytes(&raw("[]", &[])), Err(Error::HeaderJson(_))));
    }

    #[test]
    fn overlap_detected() {
        let h = r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#;
        assert!(matches!(
            TensorMap::from_bytes(&raw(h, &[0; 8])),
            Err(Error::OffsetOverlap { .. })
        ));
    }

    #[test]
    fn unknown_dtype_rejected() {
        let h = r#"{"a":{"dtype":"F8_E9","shape":[1],"data_offsets":[0,1]}}"#;
        assert!(matches!(TensorMap::from_bytes(&raw(h, &[0])), Err(Error::UnknownDtype(_))));
    }

    #[test]
    fn size_mismatch_rejected() {
        let h = r#"{"a":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}"#;
        assert!(matches!(
            TensorMap::from_bytes(&raw(h, &[0; 8])),
            Err(Error::TensorLayout { .. })
        ));
    }

    #[test]
    fn padded_header_accepted() {
        // Other writers pad the header with spaces to an 8-byte boundary.
        let h = r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}    "#;
        let map = TensorMap::from_bytes(&raw(h, &1.5f32.to_le_bytes())).unwrap();
        assert_eq!(map.get("a").unwrap().to_f64_vec("a").unwrap(), vec![1.5]);
    }

    #[test]
    fn half_precision_decoding() {
        let values = [1.0, -0.5, 0.099_975_586];
        for dtype in [Dtype::F16, Dtype::BF16] {
            let e = TensorEntry::from_f64_values(&values, vec![3], dtype).unwrap();
            assert_eq!(e.data.len(), 6);
            let back = e.to_f64_vec("x").unwrap();
            for (a, b) in values.iter().zip(&back) {
                assert!((a - b).abs() <= a.abs() * 2f64.powi(-7));
            }
        }
        let ints = TensorEntry::new(Dtype::I32, vec![1], vec![0; 4]).unwrap();
        assert!(matches!(ints.to_f64_vec("i"), Err(Error::UnsupportedDtype { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn dtype_strategy() -> impl Strategy<Value = Dtype> {
            prop_oneof![
                Just(Dtype::F32),
                Just(Dtype::F16),
                Just(Dtype::BF16),
                Just(Dtype::F64),
                Just(Dtype::I64),
                Just(Dtype::U8),
            ]
        }

        fn entry_strategy() -> impl Strategy<Value = TensorEntry> {
            (dtype_strategy(), proptest::collection::vec(0usize..4, 0..3)).prop_flat_map(
                |(dtype, shape)| {
                    let len = shape.iter().product::<usize>() * dtype.size();
                    proptest::collection::vec(any::<u8>(), len)
                        .prop_map(move |data| TensorEntry { dtype, shape: shape.clone(), data })
                },
            )
        }

        proptest! {
            #[test]
            fn bytes_survive_round_trip(
                entries in proptest::collection::btree_map("[a-z.]{1,12}", entry_strategy(), 0..5)
            ) {
                let map = TensorMap { tensors: entries, metadata: None };
                let bytes = map.to_bytes().unwrap();
                let back = TensorMap::from_bytes(&bytes).unwrap();
                prop_assert_eq!(&back, &map);
                prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            }
        }
    }
}
