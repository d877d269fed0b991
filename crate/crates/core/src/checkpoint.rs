//! Binary checkpoints for models and agent parameters.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic    8 bytes  "SPATLCKP"
//! version  u32      currently 1
//! has_arch u8       0 = bare param set, 1 = encoder architecture follows
//! arch (if has_arch == 1):
//!   input_ndim u8, input extents u32 each
//!   layer_count u32, then per layer a tag byte and its fields:
//!     0 linear   in u32, out u32, bias u8
//!     1 conv2d   in u32, out u32, kernel u32, stride u32, padding u32, bias u8
//!     2 relu
//!     3 flatten
//!     4 residual tap u32
//!   scatter u8; if 1: full u32, count u32, kept indices u32 each
//! tensors:
//!   count u32, then per tensor:
//!     name_len u16, name bytes, ndim u8, extents u32 each,
//!     values as raw f64 bits u64 each
//! ```
//!
//! Weights are stored as exact f64 bits, so save/load round-trips
//! bit-identically.

use crate::nn::{Encoder, Layer, ModelError, OutputScatter};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"SPATLCKP";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Format("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn write_params(w: &mut Writer, params: &ParamSet) {
    w.u32(params.len() as u32);
    for (name, t) in params.iter() {
        w.u16(name.len() as u16);
        w.bytes(name.as_bytes());
        w.u8(t.shape().len() as u8);
        for &e in t.shape() {
            w.u32(e as u32);
        }
        for &v in t.data() {
            w.u64(v.to_bits());
        }
    }
}

fn read_params(r: &mut Reader) -> Result<ParamSet, CheckpointError> {
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Format("non-utf8 tensor name".into()))?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_bits(r.u64()?));
        }
        let t = Tensor::from_vec(shape, data)
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
        params.insert(name, t);
    }
    Ok(params)
}

fn write_header(w: &mut Writer, has_arch: bool) {
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u8(if has_arch { 1 } else { 0 });
}

fn read_header(r: &mut Reader) -> Result<bool, CheckpointError> {
    if r.take(8)? != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Format(format!(
            "unsupported version {version}"
        )));
    }
    Ok(r.u8()? == 1)
}

pub fn save_encoder(path: &Path, enc: &Encoder) -> Result<(), CheckpointError> {
    let mut w = Writer::new();
    write_header(&mut w, true);
    w.u8(enc.input_shape().len() as u8);
    for &e in enc.input_shape() {
        w.u32(e as u32);
    }
    w.u32(enc.layers().len() as u32);
    for layer in enc.layers() {
        match layer {
            Layer::Linear {
                in_features,
                out_features,
                bias,
            } => {
                w.u8(0);
                w.u32(*in_features as u32);
                w.u32(*out_features as u32);
                w.u8(*bias as u8);
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                bias,
            } => {
                w.u8(1);
                w.u32(*in_channels as u32);
                w.u32(*out_channels as u32);
                w.u32(*kernel as u32);
                w.u32(*stride as u32);
                w.u32(*padding as u32);
                w.u8(*bias as u8);
            }
            Layer::Relu => w.u8(2),
            Layer::Flatten => w.u8(3),
            Layer::ResidualAdd { tap } => {
                w.u8(4);
                w.u32(*tap as u32);
            }
        }
    }
    match enc.output_scatter() {
        Some(sc) => {
            w.u8(1);
            w.u32(sc.full as u32);
            w.u32(sc.kept.len() as u32);
            for &k in &sc.kept {
                w.u32(k as u32);
            }
        }
        None => w.u8(0),
    }
    write_params(&mut w, enc.params());
    std::fs::write(path, w.buf)?;
    Ok(())
}

pub fn load_encoder(path: &Path) -> Result<Encoder, CheckpointError> {
    let data = std::fs::read(path)?;
    let mut r = Reader::new(&data);
    if !read_header(&mut r)? {
        return Err(CheckpointError::Format(
            "file holds a bare param set, not an encoder".into(),
        ));
    }
    let ndim = r.u8()? as usize;
    let mut input_shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        input_shape.push(r.u32()? as usize);
    }
    let layer_count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let layer = match r.u8()? {
            0 => Layer::Linear {
                in_features: r.u32()? as usize,
                out_features: r.u32()? as usize,
                bias: r.u8()? == 1,
            },
            1 => Layer::Conv2d {
                in_channels: r.u32()? as usize,
                out_channels: r.u32()? as usize,
                kernel: r.u32()? as usize,
                stride: r.u32()? as usize,
                padding: r.u32()? as usize,
                bias: r.u8()? == 1,
            },
            2 => Layer::Relu,
            3 => Layer::Flatten,
            4 => Layer::ResidualAdd {
                tap: r.u32()? as usize,
            },
            tag => return Err(CheckpointError::Format(format!("unknown layer tag {tag}"))),
        };
        layers.push(layer);
    }
    let scatter = if r.u8()? == 1 {
        let full = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut kept = Vec::with_capacity(count);
        for _ in 0..count {
            kept.push(r.u32()? as usize);
        }
        Some(OutputScatter { full, kept })
    } else {
        None
    };
    let params = read_params(&mut r)?;
    if !r.done() {
        return Err(CheckpointError::Format("trailing bytes".into()));
    }
    Ok(Encoder::from_parts(layers, input_shape, params, scatter)?)
}

/// Save a bare param set (agent checkpoints reuse this container).
pub fn save_params(path: &Path, params: &ParamSet) -> Result<(), CheckpointError> {
    let mut w = Writer::new();
    write_header(&mut w, false);
    write_params(&mut w, params);
    std::fs::write(path, w.buf)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamSet, CheckpointError> {
    let data = std::fs::read(path)?;
    let mut r = Reader::new(&data);
    if read_header(&mut r)? {
        return Err(CheckpointError::Format(
            "file holds an encoder, not a bare param set".into(),
        ));
    }
    let params = read_params(&mut r)?;
    if !r.done() {
        return Err(CheckpointError::Format("trailing bytes".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn encoder_roundtrip_is_bit_exact() {
        let mut rng = rng_for(42, "ckpt", &[]);
        let enc = Encoder::new(
            vec![
                Layer::Conv2d {
                    in_channels: 1,
                    out_channels: 3,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    bias: true,
                },
                Layer::Relu,
                Layer::Flatten,
                Layer::Linear {
                    in_features: 3 * 3 * 3,
                    out_features: 5,
                    bias: false,
                },
            ],
            vec![1, 5, 5],
            &mut rng,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.bin");
        save_encoder(&path, &enc).unwrap();
        let loaded = load_encoder(&path).unwrap();
        assert_eq!(loaded.layers(), enc.layers());
        assert_eq!(loaded.input_shape(), enc.input_shape());
        assert_eq!(
            loaded.params().content_hash(),
            enc.params().content_hash()
        );
    }

    #[test]
    fn params_roundtrip_and_kind_checks() {
        let mut rng = rng_for(43, "ckpt2", &[]);
        let mut params = ParamSet::new();
        params.insert("a.weight", Tensor::randn(&[2, 3], &mut rng));
        params.insert("b.bias", Tensor::randn(&[7], &mut rng));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        save_params(&path, &params).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(loaded.content_hash(), params.content_hash());
        assert!(load_encoder(&path).is_err());
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_params(&path).is_err());
    }
}
