//! Portable on-disk formats.
//!
//! * model spec: JSON text, keys `name`, `input`, `layers`;
//! * quantized weights (`CNNA`): little-endian header then, per conv or
//!   dense layer, its bias words followed by its kernel words in window
//!   order, each a two's-complement word packed to whole bytes;
//! * float weights (`CNNF`): same layout with `f32` values and no format;
//! * images: raw little-endian `f32` raster, dims from the model.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use cnna_core::fxp::{FixedPointFormat, FixedWord};
use cnna_core::model::{FloatLayer, LayerKind, LayerWeights, ModelSpec};
use cnna_core::tensor::{Dims, Tensor};

use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"CNNA";
pub const FLOATS_MAGIC: &[u8; 4] = b"CNNF";
pub const VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u16),
    #[error("truncated payload")]
    Truncated,
    #[error("trailing bytes after the last layer")]
    Trailing,
    #[error("unknown layer kind code {0}")]
    Kind(u8),
    #[error("layer {index}: {reason}")]
    Layer { index: u32, reason: String },
    #[error("layer {index}: raw word {raw} out of range for {format}")]
    WordOutOfRange {
        index: u32,
        raw: i64,
        format: FixedPointFormat,
    },
    #[error("invalid format Q{0}.{1}")]
    Format(u8, u8),
    #[error("expected {expected} f32 values, got {got} bytes")]
    ImageLength { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl FormatError {
    fn from_read(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            FormatError::Truncated
        } else {
            FormatError::Io(e)
        }
    }
}

fn read_bytes<const N: usize>(r: &mut impl Read) -> Result<[u8; N], FormatError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(FormatError::from_read)?;
    Ok(b)
}

fn read_u8(r: &mut impl Read) -> Result<u8, FormatError> {
    Ok(read_bytes::<1>(r)?[0])
}

fn read_u16(r: &mut impl Read) -> Result<u16, FormatError> {
    read_bytes(r).map(u16::from_le_bytes)
}

fn read_u32(r: &mut impl Read) -> Result<u32, FormatError> {
    read_bytes(r).map(u32::from_le_bytes)
}

fn read_i32(r: &mut impl Read) -> Result<i32, FormatError> {
    read_bytes(r).map(i32::from_le_bytes)
}

fn read_u64(r: &mut impl Read) -> Result<u64, FormatError> {
    read_bytes(r).map(u64::from_le_bytes)
}

fn expect_end(r: &mut impl Read) -> Result<(), FormatError> {
    let mut b = [0u8; 1];
    match r.read(&mut b)? {
        0 => Ok(()),
        _ => Err(FormatError::Trailing),
    }
}

fn read_header(r: &mut impl Read, magic: &[u8; 4]) -> Result<(), FormatError> {
    let m = read_bytes::<4>(r)?;
    if &m != magic {
        return Err(FormatError::BadMagic(m));
    }
    match read_u16(r)? {
        VERSION => Ok(()),
        v => Err(FormatError::Version(v)),
    }
}

fn read_format(r: &mut impl Read) -> Result<FixedPointFormat, FormatError> {
    let (i, f) = (read_u8(r)?, read_u8(r)?);
    FixedPointFormat::new(i as u32, f as u32).map_err(|_| FormatError::Format(i, f))
}

fn write_format(w: &mut impl Write, f: FixedPointFormat) -> io::Result<()> {
    w.write_all(&[f.int_bits() as u8, f.frac_bits() as u8])
}

/// Layer geometry shared by both weight formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerHeader {
    index: u32,
    kind: LayerKind,
    filters: usize,
    window: usize,
    depth: usize,
}

impl LayerHeader {
    fn word_count(&self) -> usize {
        self.filters * (1 + self.window * self.window * self.depth)
    }

    fn write_dims(&self, w: &mut impl Write) -> io::Result<()> {
        for d in [self.filters, self.window, self.window, self.depth] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&(self.word_count() as u64).to_le_bytes())
    }

    fn read_dims(r: &mut impl Read, index: u32, kind: LayerKind) -> Result<Self, FormatError> {
        let dims = [read_u32(r)?, read_u32(r)?, read_u32(r)?, read_u32(r)?];
        let bad = |reason: &str| FormatError::Layer {
            index,
            reason: reason.to_string(),
        };
        if dims[1] != dims[2] {
            return Err(bad("window must be square"));
        }
        if !kind.has_weights() {
            return Err(bad("only conv and dense layers carry weights"));
        }
        let h = LayerHeader {
            index,
            kind,
            filters: dims[0] as usize,
            window: dims[1] as usize,
            depth: dims[3] as usize,
        };
        let count = read_u64(r)?;
        if count != h.word_count() as u64 {
            return Err(bad(&format!("word count {count} does not match dims {dims:?}")));
        }
        Ok(h)
    }
}

fn read_kind(r: &mut impl Read) -> Result<LayerKind, FormatError> {
    let code = read_u8(r)?;
    LayerKind::from_code(code).ok_or(FormatError::Kind(code))
}

/// Serialize quantized weights. All layers must share one data format and
/// one scale format.
pub fn write_weights(w: &mut impl Write, layers: &[LayerWeights]) -> Result<(), FormatError> {
    let format = layers.first().map(|l| l.format).unwrap_or(FixedPointFormat::Q2_14);
    let scale_format = layers.first().map(|l| l.scale_word.format()).unwrap_or(format);
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_format(w, format)?;
    write_format(w, scale_format)?;
    w.write_all(&(layers.len() as u32).to_le_bytes())?;
    let bytes = format.word_bytes();
    for l in layers {
        if l.format != format || l.scale_word.format() != scale_format {
            return Err(FormatError::Layer {
                index: l.index as u32,
                reason: "all layers must share one format".into(),
            });
        }
        w.write_all(&(l.index as u32).to_le_bytes())?;
        w.write_all(&[l.kind.code()])?;
        w.write_all(&l.scale_word.raw().to_le_bytes())?;
        let h = LayerHeader {
            index: l.index as u32,
            kind: l.kind,
            filters: l.filters,
            window: l.window,
            depth: l.depth,
        };
        h.write_dims(w)?;
        for word in l.bias.iter().chain(&l.kernels) {
            w.write_all(&word.raw().to_le_bytes()[..bytes])?;
        }
    }
    Ok(())
}

pub fn read_weights(r: &mut impl Read) -> Result<Vec<LayerWeights>, FormatError> {
    read_header(r, WEIGHTS_MAGIC)?;
    let format = read_format(r)?;
    let scale_format = read_format(r)?;
    let count = read_u32(r)?;
    let bytes = format.word_bytes();
    let mut out = Vec::new();
    for _ in 0..count {
        let index = read_u32(r)?;
        let kind = read_kind(r)?;
        let scale_raw = read_i32(r)?;
        let scale_word =
            FixedWord::from_raw(scale_raw as i64, scale_format).map_err(|_| FormatError::WordOutOfRange {
                index,
                raw: scale_raw as i64,
                format: scale_format,
            })?;
        let h = LayerHeader::read_dims(r, index, kind)?;
        let mut buf = vec![0u8; bytes];
        let mut words = Vec::with_capacity(h.word_count());
        for _ in 0..h.word_count() {
            r.read_exact(&mut buf).map_err(FormatError::from_read)?;
            let mut le = [0u8; 4];
            le[..bytes].copy_from_slice(&buf);
            let shift = 32 - 8 * bytes as u32;
            let raw = ((i32::from_le_bytes(le) << shift) >> shift) as i64;
            words.push(
                FixedWord::from_raw(raw, format).map_err(|_| FormatError::WordOutOfRange { index, raw, format })?,
            );
        }
        let kernels = words.split_off(h.filters);
        out.push(LayerWeights {
            index: index as usize,
            kind,
            format,
            scale: scale_word.to_f64(),
            scale_word,
            filters: h.filters,
            window: h.window,
            depth: h.depth,
            bias: words,
            kernels,
        });
    }
    expect_end(r)?;
    Ok(out)
}

pub fn write_floats(w: &mut impl Write, layers: &[FloatLayer]) -> Result<(), FormatError> {
    w.write_all(FLOATS_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(layers.len() as u32).to_le_bytes())?;
    for l in layers {
        w.write_all(&(l.index as u32).to_le_bytes())?;
        w.write_all(&[l.kind.code()])?;
        let h = LayerHeader {
            index: l.index as u32,
            kind: l.kind,
            filters: l.filters,
            window: l.window,
            depth: l.depth,
        };
        if l.bias.len() + l.kernels.len() != h.word_count() {
            return Err(FormatError::Layer {
                index: h.index,
                reason: "value count does not match dims".into(),
            });
        }
        h.write_dims(w)?;
        for v in l.bias.iter().chain(&l.kernels) {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_floats(r: &mut impl Read) -> Result<Vec<FloatLayer>, FormatError> {
    read_header(r, FLOATS_MAGIC)?;
    let count = read_u32(r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let index = read_u32(r)?;
        let kind = read_kind(r)?;
        let h = LayerHeader::read_dims(r, index, kind)?;
        let mut vals = Vec::with_capacity(h.word_count());
        for _ in 0..h.word_count() {
            vals.push(f32::from_le_bytes(read_bytes(r)?) as f64);
        }
        let kernels = vals.split_off(h.filters);
        out.push(FloatLayer {
            index: index as usize,
            kind,
            filters: h.filters,
            window: h.window,
            depth: h.depth,
            bias: vals,
            kernels,
        });
    }
    expect_end(r)?;
    Ok(out)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path) -> impl Fn(FormatError) -> Error + '_ {
    move |source| Error::Format {
        path: path.into(),
        source,
    }
}

/// Parse and validate a model spec.
pub fn load_model(path: &Path) -> Result<ModelSpec> {
    let bytes = read_file(path)?;
    let model: ModelSpec = serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })?;
    model.shapes()?;
    Ok(model)
}

pub fn save_model(path: &Path, model: &ModelSpec) -> Result<()> {
    let mut s = serde_json::to_string_pretty(model).expect("model serializes");
    s.push('\n');
    write_file(path, s.as_bytes())
}

pub fn load_weights(path: &Path) -> Result<Vec<LayerWeights>> {
    read_weights(&mut read_file(path)?.as_slice()).map_err(format_err(path))
}

pub fn save_weights(path: &Path, layers: &[LayerWeights]) -> Result<()> {
    let mut buf = Vec::new();
    write_weights(&mut buf, layers).map_err(format_err(path))?;
    write_file(path, &buf)
}

pub fn load_floats(path: &Path) -> Result<Vec<FloatLayer>> {
    read_floats(&mut read_file(path)?.as_slice()).map_err(format_err(path))
}

pub fn save_floats(path: &Path, layers: &[FloatLayer]) -> Result<()> {
    let mut buf = Vec::new();
    write_floats(&mut buf, layers).map_err(format_err(path))?;
    write_file(path, &buf)
}

pub fn decode_image(bytes: &[u8], dims: Dims) -> Result<Tensor<f64>, FormatError> {
    if bytes.len() != dims.len() * 4 {
        return Err(FormatError::ImageLength {
            expected: dims.len(),
            got: bytes.len(),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Tensor::from_vec(dims, data).expect("length checked"))
}

pub fn encode_image(t: &Tensor<f64>) -> Vec<u8> {
    t.data().iter().flat_map(|v| (*v as f32).to_le_bytes()).collect()
}

pub fn load_image(path: &Path, dims: Dims) -> Result<Tensor<f64>> {
    decode_image(&read_file(path)?, dims).map_err(format_err(path))
}
