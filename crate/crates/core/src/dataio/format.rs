//! `.mefs` feature files.
//!
//! ```text
//! "MEFS" | version u32 | N u64 | D u64 | C u32
//! features: N*D f64, row-major | labels: N i32 | crc32(features ++ labels) u32
//! ```
//! All integers and floats are little-endian. A JSON manifest with the
//! same stem plus `.json` sits next to each file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binio::{check_preamble, f64s_from, put_f64s, put_u32, put_u64, Reader};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::FeatureSet;

pub const FEATURE_MAGIC: [u8; 4] = *b"MEFS";
pub const FEATURE_VERSION: u32 = 1;

pub fn encode_feature_set(fs: &FeatureSet) -> Vec<u8> {
    let n = fs.len();
    let d = fs.dim();
    let mut out = Vec::with_capacity(32 + n * d * 8 + n * 4 + 4);
    out.extend_from_slice(&FEATURE_MAGIC);
    put_u32(&mut out, FEATURE_VERSION);
    put_u64(&mut out, n as u64);
    put_u64(&mut out, d as u64);
    put_u32(&mut out, fs.num_classes());
    let payload_start = out.len();
    put_f64s(&mut out, fs.features().data());
    for &l in fs.labels() {
        out.extend_from_slice(&(l as i32).to_le_bytes());
    }
    let crc = crc32fast::hash(&out[payload_start..]);
    put_u32(&mut out, crc);
    out
}

pub fn decode_feature_set(bytes: &[u8]) -> Result<FeatureSet> {
    let mut r = Reader::new(bytes);
    check_preamble(&mut r, FEATURE_MAGIC, FEATURE_VERSION)?;
    let n = r.u64("header N")? as usize;
    let d = r.u64("header D")? as usize;
    let c = r.u32("header C")?;
    let feature_bytes = n
        .checked_mul(d)
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| Error::Malformed(format!("N*D overflows ({n} x {d})")))?;
    let label_bytes = n
        .checked_mul(4)
        .ok_or_else(|| Error::Malformed(format!("N overflows ({n})")))?;
    let payload_start = r.position();
    let feats = r.take(feature_bytes, "feature payload")?;
    let labs = r.take(label_bytes, "label payload")?;
    let payload_end = r.position();
    let stored = r.u32("crc32")?;
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after crc",
            r.remaining()
        )));
    }
    let computed = crc32fast::hash(&bytes[payload_start..payload_end]);
    if stored != computed {
        return Err(Error::CrcMismatch { stored, computed });
    }
    let features = Matrix::from_vec(n, d, f64s_from(feats))?;
    let mut labels = Vec::with_capacity(n);
    for (i, chunk) in labs.chunks_exact(4).enumerate() {
        let l = i32::from_le_bytes(chunk.try_into().unwrap());
        if l < 0 {
            return Err(Error::Malformed(format!("negative label {l} at row {i}")));
        }
        labels.push(l as u32);
    }
    FeatureSet::new(features, labels, c)
}

pub fn write_feature_set(fs: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_feature_set(fs)).map_err(|e| Error::io(path, e))
}

pub fn read_feature_set(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_set(&bytes)
}

/// Sidecar describing a feature file and where it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub path: String,
    pub n: usize,
    pub dim: usize,
    pub num_classes: u32,
    pub seed: Option<u64>,
    pub provenance: serde_json::Value,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_manifest(
    fs: &FeatureSet,
    path: impl AsRef<Path>,
    seed: Option<u64>,
    provenance: serde_json::Value,
) -> Result<PathBuf> {
    let path = path.as_ref();
    let manifest = FeatureManifest {
        path: path.display().to_string(),
        n: fs.len(),
        dim: fs.dim(),
        num_classes: fs.num_classes(),
        seed,
        provenance,
    };
    let out = manifest_path(path);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&out, text).map_err(|e| Error::io(&out, e))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::generate_synthetic;

    #[test]
    fn round_trip_bits() {
        let fs = generate_synthetic(3, 4, 5, 0.2, 1).unwrap();
        let back = decode_feature_set(&encode_feature_set(&fs)).unwrap();
        assert_eq!(back, fs);
    }

    #[test]
    fn flipped_payload_byte_is_crc_error() {
        let fs = generate_synthetic(3, 4, 5, 0.2, 1).unwrap();
        let mut bytes = encode_feature_set(&fs);
        bytes[40] ^= 0x01;
        assert!(matches!(
            decode_feature_set(&bytes),
            Err(Error::CrcMismatch { .. })
        ));
    }

    #[test]
    fn empty_is_truncated() {
        assert!(matches!(
            decode_feature_set(&[]),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn distinct_errors() {
        let fs = generate_synthetic(2, 2, 2, 0.0, 1).unwrap();
        let good = encode_feature_set(&fs);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            decode_feature_set(&bad_magic),
            Err(Error::BadMagic { .. })
        ));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(matches!(
            decode_feature_set(&bad_version),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));

        for cut in [3, 10, 30, good.len() - 1] {
            assert!(
                matches!(
                    decode_feature_set(&good[..cut]),
                    Err(Error::Truncated { .. })
                ),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn manifest_sits_next_to_file() {
        let dir = tempfile::tempdir().unwrap();
        let fs = generate_synthetic(2, 2, 2, 0.0, 1).unwrap();
        let p = dir.path().join("d.mefs");
        write_feature_set(&fs, &p).unwrap();
        let m = write_manifest(&fs, &p, Some(1), serde_json::json!({"kind": "test"})).unwrap();
        assert_eq!(m, dir.path().join("d.mefs.json"));
        let parsed: FeatureManifest =
            serde_json::from_str(&std::fs::read_to_string(m).unwrap()).unwrap();
        assert_eq!((parsed.n, parsed.dim, parsed.num_classes), (4, 2, 2));
        assert_eq!(read_feature_set(&p).unwrap(), fs);
    }
}
