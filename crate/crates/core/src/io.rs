//! On-disk formats.
//!
//! Tensors live in `.rctr` containers:
//!
//! ```text
//! "RCTR" | version u32 | count u32 | count × tensor
//! tensor := name_len u32 | name utf-8 | dtype u8 | ndim u32 | ndim × u64 | payload
//! ```
//!
//! All integers and payloads are little-endian, payloads row-major.
//! Detection metadata and segments are line-delimited JSON.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{Dense, EncoderPair, EncoderParams};
use crate::error::{Error, Result};
use crate::linalg::{DType, Matrix, Scalar};
use crate::synth::{Detection, FrameBatch, LabeledStream, Observation, ObservedStream, Stream};
use crate::tracklet::TrackletSegment;

pub const MAGIC: &[u8; 4] = b"RCTR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn from_slice<T: Scalar>(name: &str, shape: Vec<usize>, values: &[T]) -> Self {
        let data = match T::DTYPE {
            DType::F32 => TensorData::F32(values.iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => TensorData::F64(values.iter().map(|v| v.as_f64()).collect()),
        };
        Self {
            name: name.to_string(),
            shape,
            data,
        }
    }

    pub fn from_matrix<T: Scalar>(name: &str, m: &Matrix<T>) -> Self {
        Self::from_slice(name, vec![m.rows(), m.cols()], m.as_slice())
    }

    /// Values converted to `T`. Refuses silent precision changes.
    pub fn values<T: Scalar>(&self) -> Result<Vec<T>> {
        if self.data.dtype() != T::DTYPE {
            return Err(Error::Format(format!(
                "tensor {} is {:?}, requested {:?}",
                self.name,
                self.data.dtype(),
                T::DTYPE
            )));
        }
        Ok(match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
        })
    }

    pub fn matrix<T: Scalar>(&self) -> Result<Matrix<T>> {
        match self.shape[..] {
            [r, c] => Matrix::from_vec(r, c, self.values()?),
            _ => Err(Error::Format(format!("tensor {} is not two-dimensional", self.name))),
        }
    }
}

pub type TensorMap = BTreeMap<String, Tensor>;

pub fn encode_tensors(tensors: &[Tensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let expected: usize = t.shape.iter().product();
        if expected != t.data.len() {
            return Err(Error::Format(format!(
                "tensor {} has {} values for shape {:?}",
                t.name,
                t.data.len(),
                t.shape
            )));
        }
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.data.dtype().tag());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &t.data {
            TensorData::F32(v) => v.iter().for_each(|x| x.to_le(&mut out)),
            TensorData::F64(v) => v.iter().for_each(|x| x.to_le(&mut out)),
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated tensor container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<TensorMap> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("missing RCTR magic".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let count = c.u32()?;
    let mut out = TensorMap::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?
            .to_string();
        let dtype = DType::from_tag(c.take(1)?[0])
            .ok_or_else(|| Error::Format(format!("unknown dtype tag in tensor {name}")))?;
        let ndim = c.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            shape.push(usize::try_from(c.u64()?).map_err(|_| Error::Format("dimension overflow".into()))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("shape overflow".into()))?;
        let payload = c.take(n.checked_mul(dtype.size()).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        let data = match dtype {
            DType::F32 => TensorData::F32(payload.chunks_exact(4).map(f32::from_le).collect()),
            DType::F64 => TensorData::F64(payload.chunks_exact(8).map(f64::from_le).collect()),
        };
        if out.insert(name.clone(), Tensor { name: name.clone(), shape, data }).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let bytes = encode_tensors(tensors)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<TensorMap> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_tensors(&bytes)
}

pub fn take<'a>(map: &'a TensorMap, name: &str) -> Result<&'a Tensor> {
    map.get(name)
        .ok_or_else(|| Error::Format(format!("tensor {name} missing from container")))
}

pub fn params_tensors<T: Scalar>(prefix: &str, params: &EncoderParams<T>) -> Vec<Tensor> {
    params
        .layers
        .iter()
        .enumerate()
        .flat_map(|(i, l)| {
            [
                Tensor::from_matrix(&format!("{prefix}.{i}.weight"), &l.weight),
                Tensor::from_slice(&format!("{prefix}.{i}.bias"), vec![l.bias.len()], &l.bias),
            ]
        })
        .collect()
}

pub fn params_from_tensors<T: Scalar>(prefix: &str, map: &TensorMap) -> Result<EncoderParams<T>> {
    let mut layers = Vec::new();
    while let Some(w) = map.get(&format!("{prefix}.{}.weight", layers.len())) {
        let bias = take(map, &format!("{prefix}.{}.bias", layers.len()))?.values::<T>()?;
        let weight = w.matrix::<T>()?;
        if bias.len() != weight.rows() {
            return Err(Error::Format(format!("bias of {prefix} layer {} has wrong length", layers.len())));
        }
        layers.push(Dense { weight, bias });
    }
    if layers.is_empty() {
        return Err(Error::Format(format!("no {prefix} layers in checkpoint")));
    }
    let params = EncoderParams { layers };
    params.architecture().validate()?;
    let arch = params.architecture().0;
    for (i, l) in params.layers.iter().enumerate() {
        if l.weight.cols() != arch[i] {
            return Err(Error::Format(format!("{prefix} layer {i} input width does not chain")));
        }
    }
    Ok(params)
}

pub fn write_checkpoint<T: Scalar>(path: &Path, pair: &EncoderPair<T>) -> Result<()> {
    let mut tensors = params_tensors("query", &pair.query);
    tensors.extend(params_tensors("key", &pair.key));
    tensors.push(Tensor::from_slice("momentum", vec![1], &[T::of(pair.momentum)]));
    write_tensors(path, &tensors)
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<EncoderPair<T>> {
    let map = read_tensors(path)?;
    let query = params_from_tensors("query", &map)?;
    let key = params_from_tensors("key", &map)?;
    if !query.same_shape(&key) {
        return Err(Error::Format("query and key architectures differ".into()));
    }
    let momentum = take(&map, "momentum")?.values::<T>()?[0].as_f64();
    Ok(EncoderPair { query, key, momentum })
}

/// Metadata line of one detection. `gt_id` is written by the simulator and
/// read only by evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub det_id: u64,
    pub camera_id: u32,
    pub frame: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_id: Option<u32>,
}

/// Training-side view of a detection line: any identity field is ignored.
#[derive(Debug, Clone, Deserialize)]
struct ObservedRecord {
    det_id: u64,
    camera_id: u32,
    frame: u32,
}

pub fn write_jsonl<S: Serialize>(path: &Path, items: impl IntoIterator<Item = S>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<D: DeserializeOwned>(path: &Path) -> Result<Vec<D>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Writes `<stem>.jsonl` metadata and `<stem>.rctr` observations.
pub fn write_stream<T: Scalar>(dir: &Path, stem: &str, stream: &LabeledStream<T>) -> Result<()> {
    write_jsonl(
        &dir.join(format!("{stem}.jsonl")),
        stream.detections().map(|d| DetectionRecord {
            det_id: d.det_id,
            camera_id: d.camera_id,
            frame: d.frame,
            gt_id: d.gt_id,
        }),
    )?;
    let obs = crate::tracklet::stream_matrix(stream)?;
    write_tensors(
        &dir.join(format!("{stem}.rctr")),
        &[
            Tensor::from_matrix("observations", &obs),
            Tensor::from_slice("duration_frames", vec![1], &[T::of(stream.duration_frames as f64)]),
        ],
    )
}

fn rebuild<T: Scalar, D>(
    duration_frames: u32,
    meta: Vec<(u64, u32, u32)>,
    obs: &Matrix<T>,
    mut make: impl FnMut(u64, u32, u32, Vec<T>) -> D,
) -> Result<Stream<D>> {
    if meta.len() != obs.rows() {
        return Err(Error::Format(format!(
            "{} detection records for {} observation rows",
            meta.len(),
            obs.rows()
        )));
    }
    let mut batches: Vec<FrameBatch<D>> = Vec::new();
    for (row, (det_id, camera_id, frame)) in meta.into_iter().enumerate() {
        let d = make(det_id, camera_id, frame, obs.row(row).to_vec());
        match batches.last_mut() {
            Some(b) if b.camera_id == camera_id && b.frame == frame => b.detections.push(d),
            Some(b) if (b.camera_id, b.frame) > (camera_id, frame) => {
                return Err(Error::Format("detections are not ordered by (camera, frame)".into()))
            }
            _ => batches.push(FrameBatch {
                camera_id,
                frame,
                detections: vec![d],
            }),
        }
    }
    Ok(Stream {
        duration_frames,
        batches,
    })
}

fn read_stream_tensors<T: Scalar>(dir: &Path, stem: &str) -> Result<(u32, Matrix<T>)> {
    let map = read_tensors(&dir.join(format!("{stem}.rctr")))?;
    let obs = take(&map, "observations")?.matrix::<T>()?;
    let duration = take(&map, "duration_frames")?.values::<T>()?[0].as_f64() as u32;
    Ok((duration, obs))
}

/// Stream reader for training stages. Identities never leave this function.
pub fn read_observed_stream<T: Scalar>(dir: &Path, stem: &str) -> Result<ObservedStream<T>> {
    let records: Vec<ObservedRecord> = read_jsonl(&dir.join(format!("{stem}.jsonl")))?;
    let (duration, obs) = read_stream_tensors::<T>(dir, stem)?;
    let meta = records.into_iter().map(|r| (r.det_id, r.camera_id, r.frame)).collect();
    rebuild(duration, meta, &obs, |det_id, camera_id, frame, observation| Observation {
        det_id,
        frame,
        camera_id,
        observation,
    })
}

/// Stream reader with identities, for simulation and evaluation only.
pub fn read_labeled_stream<T: Scalar>(dir: &Path, stem: &str) -> Result<LabeledStream<T>> {
    let records: Vec<DetectionRecord> = read_jsonl(&dir.join(format!("{stem}.jsonl")))?;
    let gt: Vec<Option<u32>> = records.iter().map(|r| r.gt_id).collect();
    let (duration, obs) = read_stream_tensors::<T>(dir, stem)?;
    let meta = records.iter().map(|r| (r.det_id, r.camera_id, r.frame)).collect();
    let mut row = 0;
    rebuild(duration, meta, &obs, |det_id, camera_id, frame, observation| {
        let d = Detection {
            det_id,
            frame,
            camera_id,
            observation,
            gt_id: gt[row],
        };
        row += 1;
        d
    })
}

pub fn write_segments(path: &Path, segments: &[TrackletSegment]) -> Result<()> {
    write_jsonl(path, segments)
}

pub fn read_segments(path: &Path) -> Result<Vec<TrackletSegment>> {
    read_jsonl(path)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_encoder, Architecture};
    use crate::synth::{generate_world, simulate_stream, StreamConfig};
    use proptest::prelude::*;

    #[test]
    fn container_layout() {
        let t = Tensor::from_slice::<f32>("ab", vec![1, 2], &[1.0, -2.0]);
        let bytes = encode_tensors(&[t.clone()]).unwrap();
        let mut want = b"RCTR".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(b"ab");
        want.push(0);
        want.extend(2u32.to_le_bytes());
        want.extend(1u64.to_le_bytes());
        want.extend(2u64.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
        assert_eq!(decode_tensors(&bytes).unwrap()["ab"], t);
    }

    #[test]
    fn corrupt_containers_are_rejected() {
        let t = Tensor::from_slice::<f64>("x", vec![3], &[1.0, 2.0, 3.0]);
        let bytes = encode_tensors(&[t]).unwrap();
        assert!(decode_tensors(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_tensors(&bad).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_tensors(&extra).is_err());
        let wrong = Tensor {
            name: "y".into(),
            shape: vec![2],
            data: TensorData::F32(vec![1.0]),
        };
        assert!(encode_tensors(&[wrong]).is_err());
        let t64 = decode_tensors(&bytes).unwrap();
        assert!(t64["x"].values::<f32>().is_err());
    }

    proptest! {
        #[test]
        fn tensors_round_trip(rows in 0usize..5, cols in 0usize..5, seed in any::<u64>(), wide in any::<bool>()) {
            let vals: Vec<f64> = (0..rows * cols).map(|i| (seed as f64 + i as f64).sin()).collect();
            let t = if wide {
                Tensor::from_slice::<f64>("m", vec![rows, cols], &vals)
            } else {
                let v32: Vec<f32> = vals.iter().map(|&v| v as f32).collect();
                Tensor::from_slice::<f32>("m", vec![rows, cols], &v32)
            };
            let back = decode_tensors(&encode_tensors(&[t.clone()]).unwrap()).unwrap();
            prop_assert_eq!(&back["m"], &t);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pair = init_encoder::<f32>(&Architecture::new(6, &[5, 4], 3), 1, 0.99).unwrap();
        let path = dir.path().join("ckpt.rctr");
        write_checkpoint(&path, &pair).unwrap();
        let back = read_checkpoint::<f32>(&path).unwrap();
        assert_eq!(back.query.max_abs_diff(&pair.query), 0.0);
        assert_eq!(back.key.max_abs_diff(&pair.key), 0.0);
        assert!((back.momentum - 0.99).abs() < 1e-7);
        assert!(read_checkpoint::<f64>(&path).is_err());
    }

    #[test]
    fn streams_round_trip_and_training_reader_drops_identities() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = StreamConfig {
            duration_frames: 60,
            ..Default::default()
        };
        let world = generate_world(&cfg, 10, 3, 2).unwrap();
        let stream = simulate_stream::<f32>(&world);
        write_stream(dir.path(), "train", &stream).unwrap();
        let labeled = read_labeled_stream::<f32>(dir.path(), "train").unwrap();
        assert_eq!(labeled, stream);
        let observed = read_observed_stream::<f32>(dir.path(), "train").unwrap();
        assert_eq!(observed, stream.strip());
    }

    #[test]
    fn segments_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let segs = vec![TrackletSegment {
            segment_id: 3,
            camera_id: 1,
            start_frame: 7,
            det_ids: vec![4, 9, 12],
        }];
        let path = dir.path().join("segments.jsonl");
        write_segments(&path, &segs).unwrap();
        assert_eq!(read_segments(&path).unwrap(), segs);
        let line = std::fs::read_to_string(&path).unwrap();
        assert!(line.contains("\"det_ids\":[4,9,12]"));
    }
}
