//! `.meck` checkpoints: a named-tensor container.
//!
//! ```text
//! "MECK" | version u32 | meta_len u32 | meta (JSON, utf-8)
//! tensor_count u32
//! per tensor: name_len u16 | name | dtype u8 | ndim u8 | dims u64*ndim | offset u64
//! payload (tensor data, little-endian, at the recorded offsets)
//! crc32 of every preceding byte, u32
//! ```
//! dtype 0 is f64, dtype 1 is u64 (RNG stream states). Tensors are
//! row-major; a weight of shape `[in, out]` maps row vectors `x` to `x·W`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arcface::{ArcFaceParams, MarginConfig};
use crate::binio::{check_preamble, put_u16, put_u32, put_u64, Reader};
use crate::error::{Error, Result};
use crate::model::{
    branch_bias_name, branch_weight_name, Branch, HeadParams, Model, TinyBackbone, ARCFACE_WEIGHT,
    BACKBONE_BIAS, BACKBONE_WEIGHT,
};
use crate::numerics::{Matrix, RngState};

use super::config::TrainConfig;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MECK";
pub const CHECKPOINT_VERSION: u32 = 1;

const DROPOUT_RATES: &str = "head.dropout_rates";
const RNG_DATA: &str = "rng.data";
const RNG_DROPOUT: &str = "rng.dropout";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F64,
    U64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::U64 => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(DType::F64),
            1 => Ok(DType::U64),
            _ => Err(Error::Malformed(format!("unknown dtype code {c}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngStates {
    pub data: RngState,
    pub dropout: Vec<RngState>,
}

/// Non-tensor checkpoint metadata, stored as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: u8,
    pub num_classes: usize,
    pub margin: MarginConfig,
    pub backbone_frozen: bool,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model,
    pub rng: RngStates,
}

enum TensorData<'a> {
    F64(std::borrow::Cow<'a, [f64]>),
    U64(Vec<u64>),
}

fn rng_words(s: &RngState) -> [u64; 4] {
    [
        s.seed,
        s.stream,
        s.word_pos as u64,
        (s.word_pos >> 64) as u64,
    ]
}

fn rng_from_words(w: &[u64]) -> RngState {
    RngState {
        seed: w[0],
        stream: w[1],
        word_pos: (w[2] as u128) | ((w[3] as u128) << 64),
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let m = &ck.model;
    let (d, e) = (m.head.in_dim(), m.head.out_dim());
    let rates = m.head.dropout_rates();
    let nb = rates.len();
    let mut tensors: Vec<(String, Vec<usize>, TensorData<'_>)> = vec![
        (
            BACKBONE_WEIGHT.into(),
            vec![m.backbone.raw_dim(), m.backbone.out_dim()],
            TensorData::F64(m.backbone.weight.data().into()),
        ),
        (
            BACKBONE_BIAS.into(),
            vec![m.backbone.out_dim()],
            TensorData::F64((&m.backbone.bias[..]).into()),
        ),
        (
            DROPOUT_RATES.into(),
            vec![nb],
            TensorData::F64(rates.into()),
        ),
    ];
    for (b, br) in m.head.branches().iter().enumerate() {
        tensors.push((
            branch_weight_name(b),
            vec![d, e],
            TensorData::F64(br.weight.data().into()),
        ));
        tensors.push((
            branch_bias_name(b),
            vec![e],
            TensorData::F64((&br.bias[..]).into()),
        ));
    }
    tensors.push((
        ARCFACE_WEIGHT.into(),
        vec![m.arcface.weight.rows(), e],
        TensorData::F64(m.arcface.weight.data().into()),
    ));
    tensors.push((
        RNG_DATA.into(),
        vec![4],
        TensorData::U64(rng_words(&ck.rng.data).to_vec()),
    ));
    tensors.push((
        RNG_DROPOUT.into(),
        vec![ck.rng.dropout.len(), 4],
        TensorData::U64(ck.rng.dropout.iter().flat_map(rng_words).collect()),
    ));

    let meta = serde_json::to_vec(&ck.meta).expect("meta serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, meta.len() as u32);
    out.extend_from_slice(&meta);
    put_u32(&mut out, tensors.len() as u32);
    let mut offset = 0u64;
    for (name, shape, data) in &tensors {
        put_u16(&mut out, name.len() as u16);
        out.extend_from_slice(name.as_bytes());
        let dtype = match data {
            TensorData::F64(_) => DType::F64,
            TensorData::U64(_) => DType::U64,
        };
        out.push(dtype.code());
        out.push(shape.len() as u8);
        for &s in shape {
            put_u64(&mut out, s as u64);
        }
        put_u64(&mut out, offset);
        offset += 8 * shape.iter().product::<usize>() as u64;
    }
    for (_, _, data) in &tensors {
        match data {
            TensorData::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

fn parse_header(r: &mut Reader<'_>) -> Result<(CheckpointMeta, Vec<TensorInfo>)> {
    check_preamble(r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let meta_len = r.u32("meta length")? as usize;
    let meta_bytes = r.take(meta_len, "meta")?;
    let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
        .map_err(|e| Error::Malformed(format!("checkpoint meta: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut table = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| Error::Malformed("tensor name is not utf-8".into()))?;
        let dtype = DType::from_code(r.u8("tensor dtype")?)?;
        let ndim = r.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("tensor dims")? as usize);
        }
        let offset = r.u64("tensor offset")?;
        table.push(TensorInfo {
            name,
            dtype,
            shape,
            offset,
        });
    }
    Ok((meta, table))
}

struct Tensors<'a> {
    payload: &'a [u8],
    table: BTreeMap<String, TensorInfo>,
}

impl<'a> Tensors<'a> {
    fn raw(&self, name: &str, shape: &[usize], dtype: DType) -> Result<&'a [u8]> {
        let info = self
            .table
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.into()))?;
        if info.shape != shape {
            return Err(Error::TensorShape {
                name: name.into(),
                expected: shape.to_vec(),
                found: info.shape.clone(),
            });
        }
        if info.dtype != dtype {
            return Err(Error::Malformed(format!(
                "tensor `{name}` has dtype {:?}",
                info.dtype
            )));
        }
        let start = info.offset as usize;
        let end = start + 8 * info.numel();
        self.payload
            .get(start..end)
            .ok_or_else(|| Error::Truncated {
                what: format!("tensor `{name}`"),
            })
    }

    fn f64s(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        Ok(crate::binio::f64s_from(self.raw(
            name,
            shape,
            DType::F64,
        )?))
    }

    fn u64s(&self, name: &str, shape: &[usize]) -> Result<Vec<u64>> {
        Ok(self
            .raw(name, shape, DType::U64)?
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn shape_of(&self, name: &str) -> Result<&[usize]> {
        self.table
            .get(name)
            .map(|t| t.shape.as_slice())
            .ok_or_else(|| Error::MissingTensor(name.into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    let (meta, table) = parse_header(&mut r)?;
    let payload_start = r.position();
    if bytes.len() < payload_start + 4 {
        return Err(Error::Truncated {
            what: "crc32".into(),
        });
    }
    let body_end = bytes.len() - 4;
    let payload_len: u64 = table.iter().map(|t| 8 * t.numel() as u64).sum();
    if ((body_end - payload_start) as u64) < payload_len {
        return Err(Error::Truncated {
            what: "tensor payload".into(),
        });
    }
    if ((body_end - payload_start) as u64) > payload_len {
        return Err(Error::Malformed(
            "unexpected bytes after tensor payload".into(),
        ));
    }
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::CrcMismatch { stored, computed });
    }

    let t = Tensors {
        payload: &bytes[payload_start..body_end],
        table: table.into_iter().map(|t| (t.name.clone(), t)).collect(),
    };

    let bb_shape = t.shape_of(BACKBONE_WEIGHT)?.to_vec();
    if bb_shape.len() != 2 {
        return Err(Error::Malformed("backbone.weight must be rank 2".into()));
    }
    let (raw_dim, d) = (bb_shape[0], bb_shape[1]);
    let backbone = TinyBackbone::new(
        Matrix::from_vec(raw_dim, d, t.f64s(BACKBONE_WEIGHT, &bb_shape)?)?,
        t.f64s(BACKBONE_BIAS, &[d])?,
        meta.backbone_frozen,
    )?;

    let nb = t.shape_of(DROPOUT_RATES)?.first().copied().unwrap_or(0);
    let rates = t.f64s(DROPOUT_RATES, &[nb])?;
    let e = t
        .shape_of(&branch_bias_name(0))?
        .first()
        .copied()
        .unwrap_or(0);
    let mut branches = Vec::with_capacity(nb);
    for (b, &p) in rates.iter().enumerate() {
        branches.push(Branch {
            weight: Matrix::from_vec(d, e, t.f64s(&branch_weight_name(b), &[d, e])?)?,
            bias: t.f64s(&branch_bias_name(b), &[e])?,
            dropout_rate: p,
        });
    }
    let head = HeadParams::from_branches(d, e, branches)?;

    let rows = meta.num_classes * meta.margin.subcenters;
    let arcface = ArcFaceParams::new(
        Matrix::from_vec(rows, e, t.f64s(ARCFACE_WEIGHT, &[rows, e])?)?,
        meta.num_classes,
        meta.margin,
    )?;

    let data = rng_from_words(&t.u64s(RNG_DATA, &[4])?);
    let dropout = t
        .u64s(RNG_DROPOUT, &[nb, 4])?
        .chunks_exact(4)
        .map(rng_from_words)
        .collect();

    Ok(Checkpoint {
        meta,
        model: Model {
            backbone,
            head,
            arcface,
        },
        rng: RngStates { data, dropout },
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckpointSummary {
    pub version: u32,
    pub meta: CheckpointMeta,
    pub tensors: Vec<TensorInfo>,
    pub stored_crc: u32,
    pub file_len: u64,
}

/// Reads only the header, tensor table and trailing CRC.
pub fn inspect_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointSummary> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut f = File::open(path).map_err(io)?;
    let file_len = f.metadata().map_err(io)?.len();

    // grow the prefix until the table parses
    let mut prefix = Vec::new();
    let mut want = 4096u64;
    let (meta, tensors) = loop {
        let target = want.min(file_len) as usize;
        if prefix.len() < target {
            let mut extra = vec![0u8; target - prefix.len()];
            f.read_exact(&mut extra).map_err(io)?;
            prefix.extend_from_slice(&extra);
        }
        let mut r = Reader::new(&prefix);
        match parse_header(&mut r) {
            Ok(parsed) => break parsed,
            Err(Error::Truncated { .. }) if (prefix.len() as u64) < file_len => want *= 2,
            Err(e) => return Err(e),
        }
    };
    if file_len < 4 {
        return Err(Error::Truncated {
            what: "crc32".into(),
        });
    }
    f.seek(SeekFrom::End(-4)).map_err(io)?;
    let mut crc = [0u8; 4];
    f.read_exact(&mut crc).map_err(io)?;
    Ok(CheckpointSummary {
        version: CHECKPOINT_VERSION,
        meta,
        tensors,
        stored_crc: u32::from_le_bytes(crc),
        file_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_head;
    use crate::numerics::Rng;

    fn sample() -> Checkpoint {
        let cfg = TrainConfig::stage1();
        let head = init_head(6, 3, 4, &[0.1, 0.3, 0.5], 1).unwrap();
        let arcface = ArcFaceParams::init(5, 4, cfg.margin(), 1).unwrap();
        let mut rngs = head.dropout_rngs(4);
        rngs[1].uniform();
        let mut backbone = TinyBackbone::random(6, 6, 2);
        backbone.frozen = true;
        Checkpoint {
            meta: CheckpointMeta {
                stage: 1,
                num_classes: 5,
                margin: cfg.margin(),
                backbone_frozen: true,
                config: cfg,
            },
            model: Model {
                backbone,
                head,
                arcface,
            },
            rng: RngStates {
                data: Rng::new(3, 9).state(),
                dropout: rngs.iter().map(Rng::state).collect(),
            },
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let ck = sample();
        let back = decode_checkpoint(&encode_checkpoint(&ck)).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn truncation_is_structured() {
        let bytes = encode_checkpoint(&sample());
        for cut in [0, 2, 7, 40, bytes.len() / 2, bytes.len() - 1] {
            match decode_checkpoint(&bytes[..cut]) {
                Err(Error::Truncated { .. }) | Err(Error::CrcMismatch { .. }) => {}
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. }) | Err(Error::CrcMismatch { .. })
        ));
    }

    #[test]
    fn version_and_crc_errors() {
        let mut bytes = encode_checkpoint(&sample());
        let n = bytes.len();
        bytes[n - 10] ^= 0x40;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::CrcMismatch { .. })
        ));
        let mut bytes = encode_checkpoint(&sample());
        bytes[4] = 2;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));
    }

    #[test]
    fn missing_tensor_is_named() {
        // rename arcface.weight inside the table and re-seal the crc
        let mut bytes = encode_checkpoint(&sample());
        let pat = ARCFACE_WEIGHT.as_bytes();
        let pos = bytes.windows(pat.len()).position(|w| w == pat).unwrap();
        bytes[pos] = b'X';
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        match decode_checkpoint(&bytes) {
            Err(Error::MissingTensor(name)) => assert_eq!(name, ARCFACE_WEIGHT),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn inspect_reads_table() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.meck");
        let ck = sample();
        save_checkpoint(&p, &ck).unwrap();
        let s = inspect_checkpoint(&p).unwrap();
        assert_eq!(s.meta, ck.meta);
        let names: Vec<&str> = s.tensors.iter().map(|t| t.name.as_str()).collect();
        assert!(names.contains(&"head.branch.2.weight"));
        let bytes = std::fs::read(&p).unwrap();
        let n = bytes.len();
        assert_eq!(
            s.stored_crc,
            u32::from_le_bytes(bytes[n - 4..].try_into().unwrap())
        );
        assert_eq!(load_checkpoint(&p).unwrap(), ck);
    }
}
