//! File formats and parameter parsing for the CLI.
//!
//! Tensors use a small binary format: magic "SLT1", then c, h, w as u32
//! little-endian, then c*h*w f32 values in channel-major order. Bulk weights
//! are raw little-endian f32 arrays guarded by a SHA-256 checksum recorded
//! in the JSON manifest.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{
    random_weights, BnParams, ConvKind, DepthwiseKernel, FcWeights, Kernel4,
    LayerWeights, NetConfig, NetWeights,
};
use crate::packing::Tensor3;

pub const TENSOR_MAGIC: &[u8; 4] = b"SLT1";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic; expected SLT1")]
    BadMagic,
    #[error("truncated file: expected {expected} bytes of payload, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checksum mismatch for {path}: expected {expected}, got {got}")]
    Checksum { path: String, expected: String, got: String },
    #[error("invalid parameter string: {0}")]
    Params(String),
}

pub fn save_tensor(path: &Path, t: &Tensor3) -> Result<(), FormatError> {
    let mut buf = Vec::with_capacity(16 + 4 * t.data.len());
    buf.extend_from_slice(TENSOR_MAGIC);
    for dim in [t.c as u32, t.h as u32, t.w as u32] {
        buf.extend_from_slice(&dim.to_le_bytes());
    }
    for &v in &t.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor3, FormatError> {
    let mut f = fs::File::open(path)?;
    let mut header = [0u8; 16];
    f.read_exact(&mut header).map_err(|_| FormatError::BadMagic)?;
    if &header[..4] != TENSOR_MAGIC {
        return Err(FormatError::BadMagic);
    }
    let dim = |i: usize| {
        u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize
    };
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let expected = c * h * w * 4;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(FormatError::Truncated { expected, got: payload.len() });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Tensor3::new(c, h, w, data)
        .map_err(|e| FormatError::Manifest(e.to_string()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

/// Write a raw little-endian f32 blob and return its checksum.
pub fn save_blob(path: &Path, values: &[f64]) -> Result<String, FormatError> {
    let mut buf = Vec::with_capacity(4 * values.len());
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let checksum = sha256_hex(&buf);
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(checksum)
}

pub fn load_blob(path: &Path, count: usize, checksum: &str) -> Result<Vec<f64>, FormatError> {
    let bytes = fs::read(path)?;
    if bytes.len() != count * 4 {
        return Err(FormatError::Truncated { expected: count * 4, got: bytes.len() });
    }
    let got = sha256_hex(&bytes);
    if got != checksum {
        return Err(FormatError::Checksum {
            path: path.display().to_string(),
            expected: checksum.into(),
            got,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect())
}

/// Reference to one weight blob file, relative to the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobRef {
    pub file: String,
    pub count: usize,
    pub sha256: String,
}

/// Serialized network description. Weights come either from a stored seed
/// (deterministic random initialization) or from per-layer blob files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelManifest {
    #[serde(flatten)]
    pub config: NetConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    pub blobs: std::collections::BTreeMap<String, BlobRef>,
}

impl ModelManifest {
    pub fn random(config: NetConfig, seed: u64) -> Self {
        Self { config, random_seed: Some(seed), blobs: Default::default() }
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Materialize the weights: seeded random initialization, or blob files
    /// resolved relative to the manifest location.
    pub fn resolve_weights(&self, manifest_dir: &Path) -> Result<NetWeights, FormatError> {
        if let Some(seed) = self.random_seed {
            return Ok(random_weights(&self.config, seed));
        }
        if self.blobs.is_empty() {
            return Err(FormatError::Manifest(
                "manifest has neither random_seed nor blobs".into(),
            ));
        }
        load_blob_weights(&self.config, &self.blobs, manifest_dir)
    }
}

fn fetch(
    blobs: &std::collections::BTreeMap<String, BlobRef>,
    dir: &Path,
    name: &str,
) -> Result<Vec<f64>, FormatError> {
    let r = blobs
        .get(name)
        .ok_or_else(|| FormatError::Manifest(format!("missing blob entry {name}")))?;
    load_blob(&dir.join(&r.file), r.count, &r.sha256)
}

fn split_rows(flat: Vec<f64>, rows: usize, cols: usize) -> Result<Vec<Vec<f64>>, FormatError> {
    if flat.len() != rows * cols {
        return Err(FormatError::Manifest(format!(
            "blob length {} != {rows}x{cols}",
            flat.len()
        )));
    }
    Ok(flat.chunks_exact(cols).map(<[f64]>::to_vec).collect())
}

fn bn_from_flat(flat: Vec<f64>, c: usize) -> Result<BnParams, FormatError> {
    // layout: gamma | beta | mu | var, then eps as a single trailing value
    if flat.len() != 4 * c + 1 {
        return Err(FormatError::Manifest(format!("bn blob length {} != 4*{c}+1", flat.len())));
    }
    Ok(BnParams {
        gamma: flat[..c].to_vec(),
        beta: flat[c..2 * c].to_vec(),
        mu: flat[2 * c..3 * c].to_vec(),
        var: flat[3 * c..4 * c].to_vec(),
        eps: flat[4 * c],
    })
}

fn load_blob_weights(
    cfg: &NetConfig,
    blobs: &std::collections::BTreeMap<String, BlobRef>,
    dir: &Path,
) -> Result<NetWeights, FormatError> {
    let f = 3usize;
    let mut weights = NetWeights::default();
    let w0 = cfg.widths[0];

    let data = fetch(blobs, dir, "init.conv")?;
    if data.len() != w0 * cfg.input_channels * f * f {
        return Err(FormatError::Manifest("init.conv blob length mismatch".into()));
    }
    weights.insert(
        "init.conv",
        LayerWeights::Traditional(Kernel4 { c_o: w0, c_i: cfg.input_channels, f, data }),
    );
    weights.insert("init.bn", LayerWeights::Bn(bn_from_flat(fetch(blobs, dir, "init.bn")?, w0)?));

    for (stage, &width) in cfg.widths.iter().enumerate() {
        for block in 0..cfg.blocks_per_stage {
            let c_in_block = if block == 0 && stage > 0 { cfg.widths[stage - 1] } else { width };
            for (conv, c_i) in [(1usize, c_in_block), (2, width)] {
                let name = format!("s{stage}.b{block}.conv{conv}");
                match cfg.stage_kinds[stage] {
                    ConvKind::Traditional => {
                        let data = fetch(blobs, dir, &name)?;
                        if data.len() != width * c_i * f * f {
                            return Err(FormatError::Manifest(format!(
                                "{name} blob length mismatch"
                            )));
                        }
                        weights.insert(
                            name.clone(),
                            LayerWeights::Traditional(Kernel4 { c_o: width, c_i, f, data }),
                        );
                        let bn_name = format!("s{stage}.b{block}.bn{conv}");
                        weights.insert(
                            bn_name.clone(),
                            LayerWeights::Bn(bn_from_flat(fetch(blobs, dir, &bn_name)?, width)?),
                        );
                    }
                    ConvKind::DepthwiseSeparable => {
                        let dw = fetch(blobs, dir, &format!("{name}.dw"))?;
                        if dw.len() != c_i * f * f {
                            return Err(FormatError::Manifest(format!(
                                "{name}.dw blob length mismatch"
                            )));
                        }
                        let pw = split_rows(fetch(blobs, dir, &format!("{name}.pw"))?, width, c_i)?;
                        let bn = bn_from_flat(fetch(blobs, dir, &format!("{name}.bn"))?, width)?;
                        weights.insert(
                            name,
                            LayerWeights::Dsc {
                                depthwise: DepthwiseKernel { c: c_i, f, data: dw },
                                pointwise: pw,
                                bn,
                            },
                        );
                    }
                }
            }
            if block == 0 && stage > 0 {
                let name = format!("s{stage}.b0.down");
                let pw = split_rows(fetch(blobs, dir, &name)?, width, cfg.widths[stage - 1])?;
                weights.insert(name, LayerWeights::Downsample(pw));
            }
        }
    }

    let c_last = *cfg.widths.last().unwrap();
    let w = split_rows(fetch(blobs, dir, "fc.w")?, cfg.classes, c_last)?;
    let b = fetch(blobs, dir, "fc.b")?;
    if b.len() != cfg.classes {
        return Err(FormatError::Manifest("fc.b blob length mismatch".into()));
    }
    weights.insert("fc", LayerWeights::Fc(FcWeights { w, b }));
    Ok(weights)
}

/// Export every layer of a weight set as blob files next to the manifest.
pub fn export_blob_weights(
    weights: &NetWeights,
    dir: &Path,
) -> Result<std::collections::BTreeMap<String, BlobRef>, FormatError> {
    let mut blobs = std::collections::BTreeMap::new();
    let mut put = |name: &str, values: &[f64]| -> Result<(), FormatError> {
        let file = format!("{}.bin", name.replace('.', "_"));
        let sha256 = save_blob(&dir.join(&file), values)?;
        blobs.insert(name.to_string(), BlobRef { file, count: values.len(), sha256 });
        Ok(())
    };
    for (name, layer) in &weights.layers {
        match layer {
            LayerWeights::Traditional(k) => put(name, &k.data)?,
            LayerWeights::Bn(bn) => put(name, &bn_to_flat(bn))?,
            LayerWeights::Dsc { depthwise, pointwise, bn } => {
                put(&format!("{name}.dw"), &depthwise.data)?;
                let flat: Vec<f64> = pointwise.iter().flatten().copied().collect();
                put(&format!("{name}.pw"), &flat)?;
                put(&format!("{name}.bn"), &bn_to_flat(bn))?;
            }
            LayerWeights::Downsample(pw) => {
                let flat: Vec<f64> = pw.iter().flatten().copied().collect();
                put(name, &flat)?;
            }
            LayerWeights::Fc(fc) => {
                let flat: Vec<f64> = fc.w.iter().flatten().copied().collect();
                put("fc.w", &flat)?;
                put("fc.b", &fc.b)?;
            }
        }
    }
    Ok(blobs)
}

fn bn_to_flat(bn: &BnParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(4 * bn.gamma.len() + 1);
    out.extend_from_slice(&bn.gamma);
    out.extend_from_slice(&bn.beta);
    out.extend_from_slice(&bn.mu);
    out.extend_from_slice(&bn.var);
    out.push(bn.eps);
    out
}

/// Scheme parameters parsed from a "L=26,boot=14,slots=16384" string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSpec {
    pub max_level: u32,
    pub boot_depth: u32,
    pub n_slots: usize,
}

impl Default for ParamSpec {
    fn default() -> Self {
        Self { max_level: 26, boot_depth: 14, n_slots: 16384 }
    }
}

pub fn parse_params(s: &str) -> Result<ParamSpec, FormatError> {
    let mut spec = ParamSpec::default();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| FormatError::Params(format!("expected key=value, got {part:?}")))?;
        let value = value.trim();
        match key.trim() {
            "L" => {
                spec.max_level =
                    value.parse().map_err(|_| FormatError::Params(format!("bad L: {value}")))?;
            }
            "boot" => {
                spec.boot_depth = value
                    .parse()
                    .map_err(|_| FormatError::Params(format!("bad boot: {value}")))?;
            }
            "slots" => {
                spec.n_slots = value
                    .parse()
                    .map_err(|_| FormatError::Params(format!("bad slots: {value}")))?;
            }
            other => return Err(FormatError::Params(format!("unknown key {other:?}"))),
        }
    }
    Ok(spec)
}

/// Locate a file relative to a manifest path's directory.
pub fn manifest_dir(manifest_path: &Path) -> PathBuf {
    manifest_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tensor_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let data: Vec<f64> =
            (0..3 * 32 * 32).map(|_| rng.gen_range(-1.0f32..1.0) as f64).collect();
        let t = Tensor3::new(3, 32, 32, data).unwrap();
        save_tensor(&path, &t).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 16 + 3 * 32 * 32 * 4);
        let back = load_tensor(&path).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn tensor_truncated_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        let t = Tensor3::zeros(2, 4, 4);
        save_tensor(&path, &t).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_tensor(&path), Err(FormatError::Truncated { .. })));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_tensor(&path), Err(FormatError::BadMagic)));
    }

    #[test]
    fn blob_checksum_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let values: Vec<f64> = (0..64).map(|i| (i as f32 * 0.125) as f64).collect();
        let sum = save_blob(&path, &values).unwrap();
        assert_eq!(load_blob(&path, 64, &sum).unwrap(), values);
        assert!(matches!(
            load_blob(&path, 64, "deadbeef"),
            Err(FormatError::Checksum { .. })
        ));
        assert!(matches!(load_blob(&path, 63, &sum), Err(FormatError::Truncated { .. })));
    }

    #[test]
    fn manifest_random_mode() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = ModelManifest::random(NetConfig::resnet20_quarter(), 11);
        m.save(&path).unwrap();
        let back = ModelManifest::load(&path).unwrap();
        assert_eq!(back.random_seed, Some(11));
        let w = back.resolve_weights(dir.path()).unwrap();
        assert_eq!(w, random_weights(&back.config, 11));
    }

    #[test]
    fn manifest_blob_mode_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = NetConfig::resnet20_quarter();
        let weights = random_weights(&cfg, 5);
        let blobs = export_blob_weights(&weights, dir.path()).unwrap();
        let manifest = ModelManifest { config: cfg, random_seed: None, blobs };
        let path = dir.path().join("model.json");
        manifest.save(&path).unwrap();
        let back = ModelManifest::load(&path).unwrap().resolve_weights(dir.path()).unwrap();
        // f32 storage rounds the f64 weights
        for (name, layer) in &weights.layers {
            let restored = back.get(name).unwrap();
            match (layer, restored) {
                (LayerWeights::Traditional(a), LayerWeights::Traditional(b)) => {
                    for (x, y) in a.data.iter().zip(&b.data) {
                        assert!((x - y).abs() < 1e-6);
                    }
                }
                (LayerWeights::Fc(a), LayerWeights::Fc(b)) => {
                    for (x, y) in a.b.iter().zip(&b.b) {
                        assert!((x - y).abs() < 1e-6);
                    }
                }
                _ => {}
            }
        }
    }

    #[test]
    fn params_parsing() {
        assert_eq!(parse_params("").unwrap(), ParamSpec::default());
        let p = parse_params("L=30,boot=12,slots=1024").unwrap();
        assert_eq!(p, ParamSpec { max_level: 30, boot_depth: 12, n_slots: 1024 });
        assert_eq!(parse_params("slots=4096").unwrap().n_slots, 4096);
        assert!(parse_params("L=x").is_err());
        assert!(parse_params("nope=1").is_err());
        assert!(parse_params("L:26").is_err());
    }
}
