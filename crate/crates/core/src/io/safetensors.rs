//! Safetensors container: an 8-byte little-endian header length, a JSON
//! header, then one contiguous region of little-endian row-major payloads.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use half::{bf16, f16};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::merge::{Checkpoint, OpaqueTensor};
use crate::tensor::{DType, Tensor};

const METADATA_KEY: &str = "__metadata__";

/// How float tensors are encoded on write.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DtypePolicy {
    /// Each tensor in its own dtype, narrowing with round-to-nearest-even.
    #[default]
    Preserve,
    /// Every float tensor as `F32`.
    ForceF32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    data_offsets: [u64; 2],
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Serialize)]
#[serde(untagged)]
enum HeaderValue<'a> {
    Entry(Entry),
    Metadata(&'a BTreeMap<String, String>),
}

/// Byte width of the non-float dtypes the format defines.
fn opaque_width(dtype: &str) -> Option<usize> {
    match dtype {
        "BOOL" | "U8" | "I8" | "F8_E5M2" | "F8_E4M3" => Some(1),
        "I16" | "U16" => Some(2),
        "I32" | "U32" => Some(4),
        "I64" | "U64" => Some(8),
        _ => None,
    }
}

fn entry_path(name: &str) -> String {
    format!("$[{}]", serde_json::to_string(name).unwrap_or_default())
}

/// Byte offset in the file of a 1-based line/column inside the header.
fn header_offset(header: &[u8], line: usize, column: usize) -> u64 {
    let mut start = 0;
    for _ in 1..line {
        match header[start..].iter().position(|&b| b == b'\n') {
            Some(p) => start += p + 1,
            None => break,
        }
    }
    (8 + start + column.saturating_sub(1)).min(8 + header.len()) as u64
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(Error::corrupt_at_byte(
            0,
            format!("file is {} bytes, shorter than the 8-byte length prefix", bytes.len()),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let available = (bytes.len() - 8) as u64;
    if header_len > available {
        return Err(Error::corrupt_at_byte(
            0,
            format!("header length {header_len} exceeds the {available} bytes that follow"),
        ));
    }
    let header = &bytes[8..8 + header_len as usize];
    let data = &bytes[8 + header_len as usize..];

    let root: Value = serde_json::from_slice(header).map_err(|e| {
        Error::corrupt_at_byte(header_offset(header, e.line(), e.column()), format!("invalid JSON: {e}"))
    })?;
    let Value::Object(root) = root else {
        return Err(Error::corrupt_at_byte(8, "header is not a JSON object"));
    };

    let mut ckpt = Checkpoint::new();
    let mut spans: Vec<(u64, u64, String)> = Vec::new();
    let mut pending: Vec<(String, Entry)> = Vec::new();
    for (name, value) in root {
        if name == METADATA_KEY {
            let meta: BTreeMap<String, String> = serde_json::from_value(value).map_err(|e| {
                Error::corrupt_at_path(entry_path(&name), format!("metadata must map strings to strings: {e}"))
            })?;
            *ckpt.metadata_mut() = meta;
            continue;
        }
        let entry: Entry = serde_json::from_value(value)
            .map_err(|e| Error::corrupt_at_path(entry_path(&name), format!("bad tensor entry: {e}")))?;
        let [begin, end] = entry.data_offsets;
        if end < begin {
            return Err(Error::corrupt_at_path(
                format!("{}.data_offsets", entry_path(&name)),
                format!("end {end} precedes begin {begin}"),
            ));
        }
        spans.push((begin, end, name.clone()));
        pending.push((name, entry));
    }

    spans.sort();
    let mut cursor = 0u64;
    for (begin, end, name) in &spans {
        if *begin != cursor {
            let what = if *begin < cursor { "overlaps the previous tensor" } else { "leaves a gap" };
            return Err(Error::corrupt_at_path(
                format!("{}.data_offsets", entry_path(name)),
                format!("range [{begin}, {end}) {what}; expected it to start at {cursor}"),
            ));
        }
        cursor = *end;
    }
    if cursor != data.len() as u64 {
        return Err(Error::corrupt_at_byte(
            8 + header_len + cursor.min(data.len() as u64),
            format!("tensors cover {cursor} bytes but the data region holds {}", data.len()),
        ));
    }

    for (name, entry) in pending {
        let [begin, end] = entry.data_offsets;
        let payload = &data[begin as usize..end as usize];
        let numel = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::corrupt_at_path(format!("{}.shape", entry_path(&name)), "element count overflows"))?;
        let width = DType::parse(&entry.dtype)
            .map(DType::byte_width)
            .or_else(|| opaque_width(&entry.dtype));
        if let Some(width) = width {
            if numel.checked_mul(width) != Some(payload.len()) {
                return Err(Error::corrupt_at_path(
                    format!("{}.data_offsets", entry_path(&name)),
                    format!(
                        "{} bytes for {numel} elements of {} ({width} bytes each)",
                        payload.len(),
                        entry.dtype
                    ),
                ));
            }
        }
        match DType::parse(&entry.dtype) {
            Some(dtype) => {
                let values = decode_values(payload, dtype);
                ckpt.insert(name, Tensor::new(entry.shape, dtype, values)?)?;
            }
            None => ckpt.insert_opaque(
                name,
                OpaqueTensor {
                    dtype: entry.dtype,
                    shape: entry.shape,
                    bytes: payload.to_vec(),
                },
            )?,
        }
    }
    Ok(ckpt)
}

fn decode_values(payload: &[u8], dtype: DType) -> Vec<f64> {
    let chunks = payload.chunks_exact(dtype.byte_width());
    match dtype {
        DType::F16 => chunks
            .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f64())
            .collect(),
        DType::BF16 => chunks
            .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f64())
            .collect(),
        DType::F32 => chunks
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        DType::F64 => chunks
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    }
}

fn encode_values(tensor: &Tensor, out: &mut Vec<u8>) {
    match tensor.dtype() {
        DType::F16 => {
            for &v in tensor.data() {
                out.extend_from_slice(&f16::from_f64(v).to_le_bytes());
            }
        }
        DType::BF16 => {
            for &v in tensor.data() {
                out.extend_from_slice(&bf16::from_f64(v).to_le_bytes());
            }
        }
        DType::F32 => {
            for &v in tensor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

/// Canonical encoding: names in lexicographic order, offsets assigned in
/// that order, compact JSON with sorted keys, no header padding.
pub fn encode_checkpoint(ckpt: &Checkpoint, policy: DtypePolicy) -> Result<Vec<u8>> {
    let mut header: BTreeMap<&str, HeaderValue> = BTreeMap::new();
    let mut data = Vec::new();
    for name in ckpt.names() {
        if name == METADATA_KEY {
            return Err(Error::InvalidArgument(format!("tensor name {METADATA_KEY:?} is reserved")));
        }
        let begin = data.len() as u64;
        let (dtype, shape) = if let Some(t) = ckpt.tensor(name) {
            let target = match policy {
                DtypePolicy::Preserve => t.dtype(),
                DtypePolicy::ForceF32 => DType::F32,
            };
            // Values already at the target precision pass through unchanged;
            // anything wider is rounded (ties to even) and checked for overflow.
            let narrowed = t.cast(target).map_err(|e| match e {
                Error::OverflowOnCast { value, target, .. } => Error::OverflowOnCast {
                    value,
                    target,
                    context: format!("tensor {name:?}"),
                },
                other => other,
            })?;
            encode_values(&narrowed, &mut data);
            (target.as_str().to_string(), t.shape().to_vec())
        } else {
            let o = &ckpt.opaque()[name];
            data.extend_from_slice(&o.bytes);
            (o.dtype.clone(), o.shape.clone())
        };
        let end = data.len() as u64;
        header.insert(
            name,
            HeaderValue::Entry(Entry {
                data_offsets: [begin, end],
                dtype,
                shape,
            }),
        );
    }
    if !ckpt.metadata().is_empty() {
        header.insert(METADATA_KEY, HeaderValue::Metadata(ckpt.metadata()));
    }
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + data.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::CorruptHeader { location, reason } => Error::CorruptHeader {
            location: format!("{location} of {}", path.display()),
            reason,
        },
        other => other,
    })
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>, policy: DtypePolicy) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ckpt, policy)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
