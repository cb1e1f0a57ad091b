//! On-disk attention captures.
//!
//! A capture directory holds a `manifest.json` plus one raw little-endian
//! float32 file per layer for attention (`attn_l{l}.f32`, layout `[H, T, T]`)
//! and for values (`vals_l{l}.f32`, layout `[H_kv, T, d_h]`). Attention is
//! stored dense, with explicit zeros above the causal diagonal.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CaptureError;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Tolerance on causal softmax row sums. Captures usually come from
/// half-precision models, so this is looser than the generators' target.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureDims {
    pub t: usize,
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl CaptureDims {
    fn attn_len(&self) -> usize {
        self.heads * self.t * self.t
    }

    fn vals_len(&self) -> usize {
        self.kv_heads * self.t * self.head_dim
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "L")]
    layers: usize,
    #[serde(rename = "H")]
    heads: usize,
    #[serde(rename = "H_kv")]
    kv_heads: usize,
    d_h: usize,
    kv_map: Vec<usize>,
    attention_files: Vec<String>,
    value_files: Vec<String>,
    meta: BTreeMap<String, String>,
}

/// Per-layer, per-head prefill attention plus cache-resident values.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCapture {
    dims: CaptureDims,
    attention: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    kv_map: Vec<usize>,
    meta: BTreeMap<String, String>,
}

impl AttentionCapture {
    /// Builds a capture from per-layer buffers and validates every invariant.
    pub fn new(
        dims: CaptureDims,
        attention: Vec<Vec<f32>>,
        values: Vec<Vec<f32>>,
        kv_map: Vec<usize>,
        meta: BTreeMap<String, String>,
    ) -> Result<Self, CaptureError> {
        let capture = Self {
            dims,
            attention,
            values,
            kv_map,
            meta,
        };
        capture.validate()?;
        Ok(capture)
    }

    pub fn dims(&self) -> CaptureDims {
        self.dims
    }

    pub fn t(&self) -> usize {
        self.dims.t
    }

    pub fn layers(&self) -> usize {
        self.dims.layers
    }

    pub fn heads(&self) -> usize {
        self.dims.heads
    }

    pub fn kv_heads(&self) -> usize {
        self.dims.kv_heads
    }

    pub fn head_dim(&self) -> usize {
        self.dims.head_dim
    }

    pub fn kv_map(&self) -> &[usize] {
        &self.kv_map
    }

    pub fn kv_head_of(&self, head: usize) -> usize {
        self.kv_map[head]
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.meta
    }

    /// Full attention row `A_{l,h}[u, ·]` of length T (zeros past `u`).
    pub fn attn_row(&self, layer: usize, head: usize, row: usize) -> &[f32] {
        let t = self.dims.t;
        let start = (head * t + row) * t;
        &self.attention[layer][start..start + t]
    }

    pub fn attn(&self, layer: usize, head: usize, row: usize, key: usize) -> f64 {
        self.attn_row(layer, head, row)[key] as f64
    }

    /// Value vector `V_{l,kv,i}` of length d_h.
    pub fn value(&self, layer: usize, kv_head: usize, token: usize) -> &[f32] {
        let (t, d) = (self.dims.t, self.dims.head_dim);
        let start = (kv_head * t + token) * d;
        &self.values[layer][start..start + d]
    }

    pub fn attention_layer(&self, layer: usize) -> &[f32] {
        &self.attention[layer]
    }

    pub fn values_layer(&self, layer: usize) -> &[f32] {
        &self.values[layer]
    }

    /// Mutable access to the value tensors. Values carry no invariant beyond
    /// finiteness, which is rechecked on save.
    pub fn values_layer_mut(&mut self, layer: usize) -> &mut [f32] {
        &mut self.values[layer]
    }

    pub fn validate(&self) -> Result<(), CaptureError> {
        let d = self.dims;
        if d.t == 0 || d.layers == 0 || d.heads == 0 || d.kv_heads == 0 || d.head_dim == 0 {
            return Err(CaptureError::Shape(format!("all dimensions must be positive: {d:?}")));
        }
        if self.attention.len() != d.layers || self.values.len() != d.layers {
            return Err(CaptureError::Shape(format!(
                "expected {} layers of attention and values, got {} and {}",
                d.layers,
                self.attention.len(),
                self.values.len()
            )));
        }
        if self.kv_map.len() != d.heads {
            return Err(CaptureError::Shape(format!(
                "kv_map has {} entries for {} heads",
                self.kv_map.len(),
                d.heads
            )));
        }
        for (head, &kv_head) in self.kv_map.iter().enumerate() {
            if kv_head >= d.kv_heads {
                return Err(CaptureError::KvMap {
                    head,
                    kv_head,
                    kv_heads: d.kv_heads,
                });
            }
        }
        for layer in 0..d.layers {
            if self.attention[layer].len() != d.attn_len() {
                return Err(CaptureError::Shape(format!(
                    "layer {layer} attention has {} entries, expected {}",
                    self.attention[layer].len(),
                    d.attn_len()
                )));
            }
            if self.values[layer].len() != d.vals_len() {
                return Err(CaptureError::Shape(format!(
                    "layer {layer} values have {} entries, expected {}",
                    self.values[layer].len(),
                    d.vals_len()
                )));
            }
            for head in 0..d.heads {
                for row in 0..d.t {
                    self.validate_row(layer, head, row)?;
                }
            }
            for kv_head in 0..d.kv_heads {
                let span = kv_head * d.t * d.head_dim..(kv_head + 1) * d.t * d.head_dim;
                if self.values[layer][span].iter().any(|v| !v.is_finite()) {
                    return Err(CaptureError::ValueNotFinite { layer, kv_head });
                }
            }
        }
        Ok(())
    }

    fn validate_row(&self, layer: usize, head: usize, row: usize) -> Result<(), CaptureError> {
        let weights = self.attn_row(layer, head, row);
        if weights[row + 1..].iter().any(|&w| w != 0.0) {
            return Err(CaptureError::Causality { layer, head, row });
        }
        let mut sum = 0.0f64;
        for &w in &weights[..=row] {
            if !w.is_finite() || w < 0.0 {
                return Err(CaptureError::Weight {
                    layer,
                    head,
                    row,
                    value: w,
                });
            }
            sum += w as f64;
        }
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(CaptureError::RowSum {
                layer,
                head,
                row,
                sum,
            });
        }
        Ok(())
    }
}

fn attn_file(layer: usize) -> String {
    format!("attn_l{layer}.f32")
}

fn vals_file(layer: usize) -> String {
    format!("vals_l{layer}.f32")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CaptureError + '_ {
    move |source| CaptureError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn f32_to_le_bytes(data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_f32_file(dir: &Path, name: &str, expected_len: usize) -> Result<Vec<f32>, CaptureError> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(CaptureError::MissingFile(path));
    }
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let expected = expected_len * 4;
    if bytes.len() != expected {
        return Err(CaptureError::ByteLength {
            file: name.to_string(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes a capture directory. Output is byte-identical for equal captures.
pub fn save_capture(capture: &AttentionCapture, dir: impl AsRef<Path>) -> Result<(), CaptureError> {
    let dir = dir.as_ref();
    capture.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let d = capture.dims;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        t: d.t,
        layers: d.layers,
        heads: d.heads,
        kv_heads: d.kv_heads,
        d_h: d.head_dim,
        kv_map: capture.kv_map.clone(),
        attention_files: (0..d.layers).map(attn_file).collect(),
        value_files: (0..d.layers).map(vals_file).collect(),
        meta: capture.meta.clone(),
    };
    for layer in 0..d.layers {
        let path = dir.join(&manifest.attention_files[layer]);
        fs::write(&path, f32_to_le_bytes(&capture.attention[layer])).map_err(io_err(&path))?;
        let path = dir.join(&manifest.value_files[layer]);
        fs::write(&path, f32_to_le_bytes(&capture.values[layer])).map_err(io_err(&path))?;
    }
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(())
}

/// Reads and validates a capture directory.
pub fn load_capture(dir: impl AsRef<Path>) -> Result<AttentionCapture, CaptureError> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(CaptureError::MissingFile(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CaptureError::Manifest {
        path: manifest_path.clone(),
        message: e.to_string(),
    })?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(CaptureError::SchemaVersion(manifest.schema_version));
    }
    let dims = CaptureDims {
        t: manifest.t,
        layers: manifest.layers,
        heads: manifest.heads,
        kv_heads: manifest.kv_heads,
        head_dim: manifest.d_h,
    };
    if manifest.attention_files.len() != dims.layers || manifest.value_files.len() != dims.layers {
        return Err(CaptureError::Manifest {
            path: manifest_path,
            message: format!("expected {} attention and value files", dims.layers),
        });
    }
    let mut attention = Vec::with_capacity(dims.layers);
    let mut values = Vec::with_capacity(dims.layers);
    for layer in 0..dims.layers {
        attention.push(read_f32_file(dir, &manifest.attention_files[layer], dims.attn_len())?);
        values.push(read_f32_file(dir, &manifest.value_files[layer], dims.vals_len())?);
    }
    AttentionCapture::new(dims, attention, values, manifest.kv_map, manifest.meta)
}

/// Manifest-level summary, used by `capture info`.
#[derive(Debug, Clone, Serialize)]
pub struct CaptureInfo {
    pub dims: CaptureDims,
    pub kv_map: Vec<usize>,
    pub meta: BTreeMap<String, String>,
    pub max_row_sum_error: f64,
}

pub fn capture_info(capture: &AttentionCapture) -> CaptureInfo {
    let d = capture.dims();
    let mut max_err = 0.0f64;
    for l in 0..d.layers {
        for h in 0..d.heads {
            for u in 0..d.t {
                let s: f64 = capture.attn_row(l, h, u).iter().map(|&w| w as f64).sum();
                max_err = max_err.max((s - 1.0).abs());
            }
        }
    }
    CaptureInfo {
        dims: d,
        kv_map: capture.kv_map().to_vec(),
        meta: capture.meta().clone(),
        max_row_sum_error: max_err,
    }
}

/// Directory path helper for tests and the CLI.
pub fn manifest_path(dir: impl AsRef<Path>) -> PathBuf {
    dir.as_ref().join(MANIFEST_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_capture(t: usize, layers: usize, heads: usize) -> AttentionCapture {
        let dims = CaptureDims {
            t,
            layers,
            heads,
            kv_heads: heads,
            head_dim: 2,
        };
        let mut layer = vec![0f32; heads * t * t];
        for h in 0..heads {
            for u in 0..t {
                for i in 0..=u {
                    layer[(h * t + u) * t + i] = 1.0 / (u + 1) as f32;
                }
            }
        }
        let vals: Vec<f32> = (0..heads * t * 2).map(|x| x as f32 * 0.5).collect();
        AttentionCapture::new(
            dims,
            vec![layer; layers],
            vec![vals; layers],
            (0..heads).collect(),
            BTreeMap::new(),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let cap = uniform_capture(8, 2, 2);
        let dir = tempfile::tempdir().unwrap();
        save_capture(&cap, dir.path()).unwrap();
        let back = load_capture(dir.path()).unwrap();
        assert_eq!(back.t(), 8);
        assert_eq!(back, cap);
    }

    #[test]
    fn wrong_byte_length_is_rejected() {
        let cap = uniform_capture(8, 2, 2);
        let dir = tempfile::tempdir().unwrap();
        save_capture(&cap, dir.path()).unwrap();
        let path = dir.path().join("attn_l1.f32");
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&path, bytes).unwrap();
        match load_capture(dir.path()) {
            Err(CaptureError::ByteLength { file, .. }) => assert_eq!(file, "attn_l1.f32"),
            other => panic!("expected byte length error, got {other:?}"),
        }
    }

    #[test]
    fn above_diagonal_weight_is_a_causality_error() {
        let cap = uniform_capture(8, 1, 2);
        let mut attention = vec![cap.attention_layer(0).to_vec()];
        // head 1, row 3, key 5
        attention[0][(8 + 3) * 8 + 5] = 0.1;
        let err = AttentionCapture::new(
            cap.dims(),
            attention,
            vec![cap.values_layer(0).to_vec()],
            cap.kv_map().to_vec(),
            BTreeMap::new(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            CaptureError::Causality {
                layer: 0,
                head: 1,
                row: 3
            }
        ));
    }

    #[test]
    fn row_sum_error_names_the_row() {
        let cap = uniform_capture(4, 1, 1);
        let mut attention = vec![cap.attention_layer(0).to_vec()];
        attention[0][2 * 4] = 0.5;
        let err = AttentionCapture::new(
            cap.dims(),
            attention,
            vec![cap.values_layer(0).to_vec()],
            vec![0],
            BTreeMap::new(),
        )
        .unwrap_err();
        assert!(matches!(err, CaptureError::RowSum { row: 2, .. }));
    }

    #[test]
    fn missing_file_is_named() {
        let cap = uniform_capture(4, 1, 1);
        let dir = tempfile::tempdir().unwrap();
        save_capture(&cap, dir.path()).unwrap();
        fs::remove_file(dir.path().join("vals_l0.f32")).unwrap();
        match load_capture(dir.path()) {
            Err(CaptureError::MissingFile(p)) => assert!(p.ends_with("vals_l0.f32")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn kv_map_out_of_range() {
        let cap = uniform_capture(4, 1, 2);
        let err = AttentionCapture::new(
            CaptureDims {
                kv_heads: 1,
                ..cap.dims()
            },
            vec![cap.attention_layer(0).to_vec()],
            vec![cap.values_layer(0)[..8].to_vec()],
            vec![0, 1],
            BTreeMap::new(),
        )
        .unwrap_err();
        assert!(matches!(err, CaptureError::KvMap { head: 1, .. }));
    }

    #[cfg(unix)]
    #[test]
    fn save_to_read_only_directory_fails() {
        use std::os::unix::fs::PermissionsExt;
        let cap = uniform_capture(4, 1, 1);
        let dir = tempfile::tempdir().unwrap();
        let locked = dir.path().join("locked");
        fs::create_dir(&locked).unwrap();
        fs::set_permissions(&locked, fs::Permissions::from_mode(0o555)).unwrap();
        let res = save_capture(&cap, locked.join("cap"));
        // root ignores permission bits; only assert when the write was refused
        if fs::metadata(locked.join("cap")).is_err() {
            assert!(matches!(res, Err(CaptureError::Io { .. })));
        }
        fs::set_permissions(&locked, fs::Permissions::from_mode(0o755)).unwrap();
    }
}
