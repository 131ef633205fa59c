//! `.geobank` v1: a 40-byte little-endian header followed by an f32 payload.
//!
//! ```text
//! offset  field
//!      0  magic "GEOB"
//!      4  version (u32) = 1
//!      8  num_layers
//!     12  first_layer_index
//!     16  num_frames
//!     20  grid_h
//!     24  grid_w
//!     28  d_geo
//!     32  dtype (0 = IEEE-754 f32)
//!     36  reserved, must be 0
//! ```
//!
//! Payload order is layer, frame, patch row, patch column, channel. Layers cover the
//! contiguous id range `first_layer_index..first_layer_index + num_layers`.

use std::fmt::Write;
use std::fs;
use std::path::Path;

use crate::bank::{GridShape, RawLayerStack};
use crate::error::{Error, Result};
use crate::numerics::Tensor2D;

pub const MAGIC: [u8; 4] = *b"GEOB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 40;
pub const DTYPE_F32: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeobankHeader {
    pub version: u32,
    pub num_layers: u32,
    pub first_layer_index: u32,
    pub num_frames: u32,
    pub grid_h: u32,
    pub grid_w: u32,
    pub d_geo: u32,
    pub dtype: u32,
}

impl GeobankHeader {
    pub fn for_stack(raw: &RawLayerStack) -> Result<Self> {
        let ids = raw.layer_indices();
        if ids.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::config(format!(
                "geobank v1 stores a contiguous layer range, got {ids:?}"
            )));
        }
        let to_u32 = |name: &str, v: usize| {
            u32::try_from(v).map_err(|_| Error::config(format!("{name} {v} does not fit in 32 bits")))
        };
        let shape = raw.shape();
        Ok(Self {
            version: VERSION,
            num_layers: to_u32("num_layers", raw.num_layers())?,
            first_layer_index: to_u32("first_layer_index", ids[0])?,
            num_frames: to_u32("num_frames", shape.num_frames)?,
            grid_h: to_u32("grid_h", shape.grid_h)?,
            grid_w: to_u32("grid_w", shape.grid_w)?,
            d_geo: to_u32("d_geo", raw.d_geo())?,
            dtype: DTYPE_F32,
        })
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..4].copy_from_slice(&MAGIC);
        let fields = [
            self.version,
            self.num_layers,
            self.first_layer_index,
            self.num_frames,
            self.grid_h,
            self.grid_w,
            self.d_geo,
            self.dtype,
            0,
        ];
        for (k, f) in fields.iter().enumerate() {
            out[4 + 4 * k..8 + 4 * k].copy_from_slice(&f.to_le_bytes());
        }
        out
    }

    /// Parses and validates the header; errors are plain messages for the caller to wrap.
    fn parse(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < HEADER_LEN {
            return Err(format!(
                "truncated header: expected {HEADER_LEN} bytes, found {}",
                bytes.len()
            ));
        }
        if bytes[..4] != MAGIC {
            return Err(format!("bad magic {:02x?}, expected \"GEOB\"", &bytes[..4]));
        }
        let field = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap());
        let h = Self {
            version: field(0),
            num_layers: field(1),
            first_layer_index: field(2),
            num_frames: field(3),
            grid_h: field(4),
            grid_w: field(5),
            d_geo: field(6),
            dtype: field(7),
        };
        if h.version != VERSION {
            return Err(format!("unsupported version {}, expected {VERSION}", h.version));
        }
        for (name, v) in [
            ("num_layers", h.num_layers),
            ("num_frames", h.num_frames),
            ("grid_h", h.grid_h),
            ("grid_w", h.grid_w),
            ("d_geo", h.d_geo),
        ] {
            if v == 0 {
                return Err(format!("{name} must be >= 1"));
            }
        }
        if h.grid_h % 2 != 0 || h.grid_w % 2 != 0 {
            return Err(format!("odd patch grid {}x{}", h.grid_h, h.grid_w));
        }
        if h.dtype != DTYPE_F32 {
            return Err(format!("unknown dtype code {}", h.dtype));
        }
        if field(8) != 0 {
            return Err(format!("reserved header field is {}, expected 0", field(8)));
        }
        if h.first_layer_index.checked_add(h.num_layers).is_none() {
            return Err("layer index range overflows 32 bits".into());
        }
        Ok(h)
    }

    pub fn shape(&self) -> GridShape {
        GridShape {
            num_frames: self.num_frames as usize,
            grid_h: self.grid_h as usize,
            grid_w: self.grid_w as usize,
        }
    }

    pub fn layer_indices(&self) -> Vec<usize> {
        let first = self.first_layer_index as usize;
        (first..first + self.num_layers as usize).collect()
    }

    /// Expected payload size in bytes.
    pub fn payload_len(&self) -> u128 {
        [self.num_layers, self.num_frames, self.grid_h, self.grid_w, self.d_geo]
            .iter()
            .fold(4u128, |acc, &v| acc * v as u128)
    }
}

/// Serializes `raw`, down-casting the payload to f32.
pub fn encode_geobank(raw: &RawLayerStack) -> Result<Vec<u8>> {
    let header = GeobankHeader::for_stack(raw)?;
    let mut out = Vec::with_capacity(HEADER_LEN + header.payload_len() as usize);
    out.extend_from_slice(&header.to_bytes());
    for (pos, layer) in raw.layers().iter().enumerate() {
        for &v in layer.as_slice() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::Numeric(format!(
                    "layer {pos} value {v} does not fit in f32"
                )));
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a full `.geobank` image; `path` only labels errors.
pub fn decode_geobank(bytes: &[u8], path: &Path) -> Result<RawLayerStack> {
    let format = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let header = GeobankHeader::parse(bytes).map_err(format)?;
    let expected = HEADER_LEN as u128 + header.payload_len();
    if bytes.len() as u128 != expected {
        return Err(format(format!(
            "payload size mismatch: expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let shape = header.shape();
    let d = header.d_geo as usize;
    let per_layer = shape.num_tokens() * d;
    let mut chunks = bytes[HEADER_LEN..].chunks_exact(4);
    let mut layers = Vec::with_capacity(header.num_layers as usize);
    for pos in 0..header.num_layers as usize {
        let data: Vec<f64> = chunks
            .by_ref()
            .take(per_layer)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(format(format!("layer {pos} contains non-finite values")));
        }
        layers.push(Tensor2D::from_vec(shape.num_tokens(), d, data)?);
    }
    RawLayerStack::new(header.layer_indices(), shape, d, layers)
}

pub fn write_geobank(path: &Path, raw: &RawLayerStack) -> Result<()> {
    let bytes = encode_geobank(raw)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_geobank(path: &Path) -> Result<RawLayerStack> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_geobank(&bytes, path)
}

/// Validated header and the file size, without decoding the payload.
pub fn read_header(path: &Path) -> Result<(GeobankHeader, u64)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = GeobankHeader::parse(&bytes).map_err(|message| Error::Format {
        path: path.to_path_buf(),
        message,
    })?;
    Ok((header, bytes.len() as u64))
}

/// Summary statistics of one layer's features.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerStats {
    pub layer_index: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

pub fn layer_stats(raw: &RawLayerStack) -> Vec<LayerStats> {
    raw.layer_indices()
        .iter()
        .zip(raw.layers())
        .map(|(&layer_index, grid)| {
            let v = grid.as_slice();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            LayerStats {
                layer_index,
                mean,
                std: var.sqrt(),
                min: v.iter().cloned().fold(f64::INFINITY, f64::min),
                max: v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

/// Header fields and per-layer statistics as printable text.
pub fn inspect_geobank(path: &Path) -> Result<String> {
    let raw = read_geobank(path)?;
    let h = GeobankHeader::for_stack(&raw)?;
    let mut out = String::new();
    let _ = writeln!(out, "file = {}", path.display());
    let _ = writeln!(out, "version = {}", h.version);
    let _ = writeln!(out, "num_layers = {}", h.num_layers);
    let _ = writeln!(out, "layer_indices = {:?}", h.layer_indices());
    let _ = writeln!(out, "num_frames = {}", h.num_frames);
    let _ = writeln!(out, "grid = {}x{}", h.grid_h, h.grid_w);
    let _ = writeln!(out, "d_geo = {}", h.d_geo);
    let _ = writeln!(out, "dtype = f32");
    let _ = writeln!(out, "\n[layers]\nlayer  mean  std  min  max");
    for s in layer_stats(&raw) {
        let _ = writeln!(
            out,
            "{}  {:.6}  {:.6}  {:.6}  {:.6}",
            s.layer_index, s.mean, s.std, s.min, s.max
        );
    }
    Ok(out)
}
