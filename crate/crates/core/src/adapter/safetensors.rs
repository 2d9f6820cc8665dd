//! Hand-rolled reader and writer for the safetensors container plus the
//! JSON sidecar that carries adapter hyperparameters.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{LoraAdapter, LoraPair, StorageDtype, TaskVectorSet, Variant};
use crate::error::{Error, Result};
use crate::toylab::{ModelConfig, ModulePath, ModuleType};
use crate::Mat;

const METADATA_KEY: &str = "__metadata__";
/// Refuse headers beyond this size before allocating.
const MAX_HEADER_LEN: u64 = 100 << 20;

/// One tensor as stored: dtype, shape and values widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub dtype: StorageDtype,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TensorRecord {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn from_matrix(m: &Mat, dtype: StorageDtype) -> Self {
        Self {
            dtype,
            shape: vec![m.rows(), m.cols()],
            values: m.as_slice().to_vec(),
        }
    }

    /// 2-D view; `None` for other ranks.
    pub fn to_matrix(&self) -> Option<Mat> {
        match self.shape[..] {
            [r, c] => Mat::from_vec(r, c, self.values.clone()).ok(),
            _ => None,
        }
    }
}

/// Parsed container contents.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub tensors: BTreeMap<String, TensorRecord>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

fn parse_err(offset: u64, reason: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        reason: reason.into(),
    }
}

fn encode(dtype: StorageDtype, values: &[f64], out: &mut Vec<u8>) {
    for &x in values {
        match dtype {
            StorageDtype::F16 => out.extend_from_slice(&half::f16::from_f64(x).to_le_bytes()),
            StorageDtype::BF16 => out.extend_from_slice(&half::bf16::from_f64(x).to_le_bytes()),
            StorageDtype::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
            StorageDtype::F64 => out.extend_from_slice(&x.to_le_bytes()),
        }
    }
}

fn decode(dtype: StorageDtype, bytes: &[u8]) -> Vec<f64> {
    let n = dtype.size();
    bytes
        .chunks_exact(n)
        .map(|c| match dtype {
            StorageDtype::F16 => half::f16::from_le_bytes([c[0], c[1]]).to_f64(),
            StorageDtype::BF16 => half::bf16::from_le_bytes([c[0], c[1]]).to_f64(),
            StorageDtype::F32 => f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64,
            StorageDtype::F64 => f64::from_le_bytes(c.try_into().expect("chunk of 8")),
        })
        .collect()
}

/// Serializes a container. Output depends only on the contents: tensors are
/// laid out in name order and the header is space-padded to 8 bytes.
pub fn write_container(container: &Container) -> Result<Vec<u8>> {
    let mut header = serde_json::Map::new();
    if !container.metadata.is_empty() {
        header.insert(METADATA_KEY.into(), serde_json::to_value(&container.metadata)?);
    }
    let mut data = Vec::new();
    for (name, t) in &container.tensors {
        if name == METADATA_KEY {
            return Err(Error::arg("tensor name collides with the metadata key"));
        }
        if t.values.len() != t.numel() {
            return Err(Error::arg(format!(
                "tensor {name}: {} values for shape {:?}",
                t.values.len(),
                t.shape
            )));
        }
        let begin = data.len() as u64;
        encode(t.dtype, &t.values, &mut data);
        let entry = HeaderEntry {
            dtype: t.dtype.tag().into(),
            shape: t.shape.clone(),
            data_offsets: [begin, data.len() as u64],
        };
        header.insert(name.clone(), serde_json::to_value(entry)?);
    }
    // serde_json's map is ordered by key, which fixes the header bytes.
    let mut json = serde_json::to_vec(&Value::Object(header))?;
    while json.len() % 8 != 0 {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + json.len() + data.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

/// Parses a container, reporting the byte offset of the first defect.
pub fn read_container(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 8 {
        return Err(parse_err(0, format!("file of {} bytes has no header length", bytes.len())));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let available = bytes.len() as u64 - 8;
    if header_len > available || header_len > MAX_HEADER_LEN {
        return Err(parse_err(
            0,
            format!("header length {header_len} exceeds the {available} bytes that follow"),
        ));
    }
    let header_end = 8 + header_len as usize;
    let header_bytes = &bytes[8..header_end];
    let text = std::str::from_utf8(header_bytes)
        .map_err(|e| parse_err(8 + e.valid_up_to() as u64, "header is not valid UTF-8"))?;
    let value: Value = serde_json::from_str(text).map_err(|e| {
        let col = line_col_to_offset(text, e.line(), e.column());
        parse_err(8 + col as u64, format!("header JSON: {e}"))
    })?;
    let Value::Object(map) = value else {
        return Err(parse_err(8, "header is not a JSON object"));
    };

    let data = &bytes[header_end..];
    let mut container = Container::default();
    let mut spans = Vec::new();
    for (name, entry) in map {
        if name == METADATA_KEY {
            container.metadata = serde_json::from_value(entry)
                .map_err(|e| parse_err(8, format!("__metadata__ must map strings to strings: {e}")))?;
            continue;
        }
        let entry: HeaderEntry = serde_json::from_value(entry)
            .map_err(|e| parse_err(8, format!("header entry `{name}`: {e}")))?;
        let dtype = StorageDtype::from_tag(&entry.dtype)?;
        let [begin, end] = entry.data_offsets;
        if begin > end || end > data.len() as u64 {
            return Err(parse_err(
                header_end as u64 + begin.min(end),
                format!(
                    "tensor `{name}` spans [{begin}, {end}) outside the {}-byte data buffer",
                    data.len()
                ),
            ));
        }
        let numel: usize = entry.shape.iter().product();
        if (end - begin) as usize != numel * dtype.size() {
            return Err(parse_err(
                header_end as u64 + begin,
                format!(
                    "tensor `{name}` has {} bytes but shape {:?} needs {}",
                    end - begin,
                    entry.shape,
                    numel * dtype.size()
                ),
            ));
        }
        spans.push((begin, end));
        let values = decode(dtype, &data[begin as usize..end as usize]);
        container.tensors.insert(
            name,
            TensorRecord {
                dtype,
                shape: entry.shape,
                values,
            },
        );
    }
    spans.sort_unstable();
    let mut cursor = 0u64;
    for (begin, end) in spans {
        if begin != cursor {
            return Err(parse_err(
                header_end as u64 + begin.min(cursor),
                "tensor data regions overlap or leave a gap",
            ));
        }
        cursor = end;
    }
    if cursor != data.len() as u64 {
        return Err(parse_err(
            header_end as u64 + cursor,
            format!("{} trailing bytes after the last tensor", data.len() as u64 - cursor),
        ));
    }
    Ok(container)
}

fn line_col_to_offset(text: &str, line: usize, col: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return offset + col.saturating_sub(1);
        }
        offset += l.len();
    }
    offset
}

/// Hyperparameters stored next to the tensor container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSidecar {
    pub alpha: f64,
    pub rank: usize,
    #[serde(default)]
    pub variant: Variant,
    pub target_modules: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_pattern: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_pattern: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainable_token_indices: Option<Value>,
}

impl AdapterSidecar {
    /// Entries this toolkit cannot honour; empty patterns are harmless.
    pub fn unsupported_features(&self) -> Vec<String> {
        let nonempty = |v: &Option<Value>| match v {
            None | Some(Value::Null) => false,
            Some(Value::Object(m)) => !m.is_empty(),
            Some(Value::Array(a)) => !a.is_empty(),
            Some(_) => true,
        };
        let mut out = Vec::new();
        if nonempty(&self.rank_pattern) {
            out.push("per-module rank pattern".to_string());
        }
        if nonempty(&self.alpha_pattern) {
            out.push("per-module alpha pattern".to_string());
        }
        if nonempty(&self.trainable_token_indices) {
            out.push("vocabulary-index training".to_string());
        }
        out
    }
}

/// Container plus sidecar before any structural interpretation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawAdapter {
    pub name: String,
    pub sidecar: AdapterSidecar,
    pub container: Container,
}

/// `adapter.safetensors` → `adapter.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn adapter_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Reads container and sidecar without checking them against a model.
pub fn load_raw(path: &Path) -> Result<RawAdapter> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let container = read_container(&bytes)?;
    let side_path = sidecar_path(path);
    let side_text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let sidecar: AdapterSidecar = serde_json::from_str(&side_text)?;
    Ok(RawAdapter {
        name: adapter_name(path),
        sidecar,
        container,
    })
}

impl RawAdapter {
    /// Groups tensors into A/B pairs. Structural problems become
    /// validation errors; tensor values are not inspected.
    pub fn into_adapter(self, cfg: &ModelConfig) -> Result<LoraAdapter> {
        let RawAdapter {
            name,
            sidecar,
            container,
        } = self;
        if let Some(feature) = sidecar.unsupported_features().into_iter().next() {
            return Err(Error::Unsupported(format!("adapter {name}: {feature}")));
        }
        if sidecar.rank == 0 {
            return Err(Error::Validation(format!("adapter {name}: rank 0")));
        }
        let mut halves: BTreeMap<ModulePath, (Option<Mat>, Option<Mat>)> = BTreeMap::new();
        let mut dtypes = BTreeSet::new();
        for (tensor_name, t) in &container.tensors {
            let (path, tail) = ModulePath::parse_tensor_name(tensor_name)
                .filter(|(p, _)| cfg.contains(*p))
                .ok_or_else(|| Error::Validation(format!("adapter {name}: unknown module path `{tensor_name}`")))?;
            let m = t
                .to_matrix()
                .ok_or_else(|| Error::Validation(format!("adapter {name}: `{tensor_name}` is not 2-D")))?;
            dtypes.insert(t.dtype.tag());
            let slot = halves.entry(path).or_default();
            match tail {
                "lora_A.weight" => slot.0 = Some(m),
                "lora_B.weight" => slot.1 = Some(m),
                _ => {
                    return Err(Error::Validation(format!(
                        "adapter {name}: unexpected tensor `{tensor_name}`"
                    )))
                }
            }
        }
        if dtypes.len() > 1 {
            return Err(Error::Unsupported(format!("adapter {name}: mixed tensor dtypes {dtypes:?}")));
        }
        let dtype = match dtypes.first() {
            Some(tag) => StorageDtype::from_tag(tag)?,
            None => StorageDtype::F32,
        };
        let scaling = sidecar.variant.scaling(sidecar.alpha, sidecar.rank);
        let mut modules = BTreeMap::new();
        for (path, slot) in halves {
            let (Some(a), Some(b)) = slot else {
                return Err(Error::Validation(format!("adapter {name}: {path} lacks one of lora_A/lora_B")));
            };
            let (n, m) = cfg.module_shape(path.module);
            let r = sidecar.rank;
            if a.shape() != (r, m) || b.shape() != (n, r) {
                return Err(Error::Validation(format!(
                    "adapter {name}: {path} has A {:?}, B {:?}; expected A ({r}, {m}), B ({n}, {r})",
                    a.shape(),
                    b.shape()
                )));
            }
            modules.insert(path, LoraPair { a, b, scaling });
        }
        Ok(LoraAdapter {
            name,
            modules,
            alpha: sidecar.alpha,
            rank: sidecar.rank,
            variant: sidecar.variant,
            dtype,
            metadata: container.metadata,
        })
    }
}

/// Loads `<dir>/<name>.safetensors` with its `<name>.json` sidecar.
pub fn load_adapter(path: &Path, cfg: &ModelConfig) -> Result<LoraAdapter> {
    load_raw(path)?.into_adapter(cfg)
}

impl LoraAdapter {
    pub fn sidecar(&self) -> AdapterSidecar {
        let present: BTreeSet<ModuleType> = self.modules.keys().map(|p| p.module).collect();
        AdapterSidecar {
            alpha: self.alpha,
            rank: self.rank,
            variant: self.variant,
            target_modules: present.into_iter().map(|m| m.name().to_string()).collect(),
            rank_pattern: None,
            alpha_pattern: None,
            trainable_token_indices: None,
        }
    }

    pub fn to_container(&self) -> Container {
        let mut tensors = BTreeMap::new();
        for (path, pair) in &self.modules {
            let prefix = path.peft_prefix();
            tensors.insert(format!("{prefix}.lora_A.weight"), TensorRecord::from_matrix(&pair.a, self.dtype));
            tensors.insert(format!("{prefix}.lora_B.weight"), TensorRecord::from_matrix(&pair.b, self.dtype));
        }
        Container {
            tensors,
            metadata: self.metadata.clone(),
        }
    }

    pub fn to_raw(&self) -> RawAdapter {
        RawAdapter {
            name: self.name.clone(),
            sidecar: self.sidecar(),
            container: self.to_container(),
        }
    }
}

/// Writes the container to `path` and the sidecar next to it.
pub fn save_adapter(adapter: &LoraAdapter, path: &Path) -> Result<()> {
    if adapter.modules.is_empty() {
        return Err(Error::Contract(format!("adapter {} has no modules", adapter.name)));
    }
    let bytes = write_container(&adapter.to_container())?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side_path = sidecar_path(path);
    let mut side = serde_json::to_string_pretty(&adapter.sidecar())?;
    side.push('\n');
    fs::write(&side_path, side).map_err(|e| Error::io(&side_path, e))?;
    Ok(())
}

/// Tensor name of a dense delta in exported task vectors.
pub fn delta_tensor_name(path: &ModulePath) -> String {
    format!("{}.delta.weight", path.peft_prefix())
}

/// Container holding one dense delta per module.
pub fn task_vectors_container(tvs: &TaskVectorSet, dtype: StorageDtype) -> Container {
    let tensors = tvs
        .deltas
        .iter()
        .map(|(p, d)| (delta_tensor_name(p), TensorRecord::from_matrix(d, dtype)))
        .collect();
    let metadata = [("name".to_string(), tvs.name.clone()), ("format".to_string(), "dense-delta".to_string())]
        .into_iter()
        .collect();
    Container { tensors, metadata }
}

/// Writes merged task vectors as dense deltas named by module path.
pub fn save_task_vectors(tvs: &TaskVectorSet, path: &Path, dtype: StorageDtype) -> Result<()> {
    if tvs.deltas.is_empty() {
        return Err(Error::Contract(format!("task vectors {} are empty", tvs.name)));
    }
    let bytes = write_container(&task_vectors_container(tvs, dtype))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`save_task_vectors`].
pub fn load_task_vectors(path: &Path) -> Result<TaskVectorSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let container = read_container(&bytes)?;
    let name = container
        .metadata
        .get("name")
        .cloned()
        .unwrap_or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let mut out = TaskVectorSet::new(name);
    for (tensor, record) in &container.tensors {
        let path_and_rest = ModulePath::parse_tensor_name(tensor);
        let Some((p, "delta.weight")) = path_and_rest else {
            return Err(Error::Validation(format!("unexpected tensor `{tensor}` in task vector file")));
        };
        let m = record
            .to_matrix()
            .ok_or_else(|| Error::Validation(format!("tensor `{tensor}` is not 2-D")))?;
        out.deltas.insert(p, m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            vocab: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            max_seq: 8,
        }
    }

    fn adapter(modules: &[ModuleType], rank: usize, seed: u64) -> LoraAdapter {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs: Vec<_> = (0..cfg.n_layers)
            .flat_map(|l| modules.iter().map(move |&m| ModulePath::new(l, m)))
            .map(|p| {
                let (n, m) = cfg.module_shape(p.module);
                (p, Mat::randn(rank, m, 0.1, &mut rng), Mat::randn(n, rank, 0.1, &mut rng))
            })
            .collect();
        LoraAdapter::new("t", 2.0 * rank as f64, rank, Variant::Standard, pairs)
            .unwrap()
            .quantized()
    }

    #[test]
    fn container_round_trip_is_byte_identical() {
        let mut a = adapter(&ModuleType::ALL, 2, 1);
        a.metadata.insert("license".into(), "apache-2.0".into());
        let bytes = write_container(&a.to_container()).unwrap();
        let parsed = read_container(&bytes).unwrap();
        assert_eq!(parsed, a.to_container());
        assert_eq!(write_container(&parsed).unwrap(), bytes);
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        assert_eq!(header_len % 8, 0);
    }

    #[test]
    fn half_precision_round_trip() {
        for dtype in [StorageDtype::F16, StorageDtype::BF16, StorageDtype::F64] {
            let mut a = adapter(&[ModuleType::QProj], 1, 2);
            a.dtype = dtype;
            let a = a.quantized();
            let bytes = write_container(&a.to_container()).unwrap();
            let back = read_container(&bytes).unwrap();
            assert_eq!(back, a.to_container());
        }
    }

    #[test]
    fn oversized_header_length_is_a_parse_error() {
        let a = adapter(&[ModuleType::QProj], 1, 3);
        let mut bytes = write_container(&a.to_container()).unwrap();
        let bogus = (bytes.len() as u64).to_le_bytes();
        bytes[..8].copy_from_slice(&bogus);
        assert!(matches!(read_container(&bytes), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(read_container(&[1, 2, 3]), Err(Error::Parse { .. })));
    }

    #[test]
    fn truncated_buffer_reports_offset() {
        let a = adapter(&[ModuleType::QProj], 1, 4);
        let bytes = write_container(&a.to_container()).unwrap();
        let err = read_container(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert!(offset >= 8),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn integer_dtype_is_unsupported() {
        let header = br#"{"x":{"dtype":"I32","shape":[1],"data_offsets":[0,4]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0; 4]);
        assert!(matches!(read_container(&bytes), Err(Error::Unsupported(_))));
    }

    #[test]
    fn save_load_save_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let a = adapter(&[ModuleType::QProj, ModuleType::VProj], 4, 5);
        let p1 = dir.path().join("one.safetensors");
        let p2 = dir.path().join("two.safetensors");
        save_adapter(&a, &p1).unwrap();
        save_adapter(&a, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        let back = load_adapter(&p1, &small_cfg()).unwrap();
        assert_eq!(back.name, "one");
        assert_eq!(back.modules.len(), 2 * small_cfg().n_layers);
        assert_eq!(back.modules, a.modules);
        assert_eq!(back.sidecar(), a.sidecar());
    }

    #[test]
    fn empty_adapter_cannot_be_saved() {
        let dir = tempfile::tempdir().unwrap();
        let a = LoraAdapter::new("e", 1.0, 1, Variant::Standard, []).unwrap();
        let err = save_adapter(&a, &dir.path().join("e.safetensors"));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn unknown_module_path_is_a_validation_error() {
        let a = adapter(&[ModuleType::QProj], 1, 6);
        let mut raw = a.to_raw();
        let t = raw.container.tensors.values().next().unwrap().clone();
        raw.container
            .tensors
            .insert("base_model.model.lm_head.lora_A.weight".into(), t);
        assert!(matches!(raw.into_adapter(&small_cfg()), Err(Error::Validation(_))));
    }
}
