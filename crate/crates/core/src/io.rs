//! File formats: 17-digit JSON, the binary weights container, and hashing.

use std::fs::File;
use std::hash::Hasher;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use fnv::FnvHasher;
use ndarray::{Array1, Array2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::{CompactFormatter, Formatter, PrettyFormatter};

use crate::error::{Error, Result};
use crate::network::{NetworkConfig, Weights};

/// Container layout version written into every weights file and manifest.
pub const LAYOUT_VERSION: u32 = 1;

const WEIGHTS_MAGIC: &[u8; 4] = b"OPNW";

/// Scientific notation with 17 significant digits; round-trips every f64.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub fn hex64(h: u64) -> String {
    format!("{h:016x}")
}

/// JSON formatter whose floats carry 17 significant digits. Non-finite floats
/// become `null`.
struct Json17<F>(F);

impl<F: Formatter> Formatter for Json17<F> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            w.write_all(fmt17(value).as_bytes())
        } else {
            w.write_all(b"null")
        }
    }
    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

fn serialize_with<T: Serialize + ?Sized, F: Formatter>(value: &T, f: F) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Json17(f));
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

/// Pretty-printed JSON with a trailing newline.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut s = serialize_with(value, PrettyFormatter::new())?;
    s.push('\n');
    Ok(s)
}

/// Single-line JSON.
pub fn to_json_line<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    serialize_with(value, CompactFormatter)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_json(value)?)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Serialize, Deserialize)]
struct WeightsHeader {
    layout_version: u32,
    config: NetworkConfig,
    /// `(rows, cols)` of each `W_l`, stored row-major after the header,
    /// followed by `v`.
    shapes: Vec<(usize, usize)>,
}

/// Binary weights container: magic, `u32` version, `u64` header length,
/// JSON header, then little-endian f64 matrices row-major and `v`.
pub fn write_weights<W: Write>(w: &Weights, out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    let header = WeightsHeader {
        layout_version: LAYOUT_VERSION,
        config: w.config().clone(),
        shapes: w.layers().iter().map(|m| m.dim()).collect(),
    };
    let header = serde_json::to_vec(&header)?;
    out.write_all(WEIGHTS_MAGIC)?;
    out.write_all(&LAYOUT_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for m in w.layers() {
        for v in m.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    for v in w.output() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format("weights file is truncated".into()))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn read_weights<R: Read>(input: R) -> Result<Weights> {
    let mut r = BufReader::new(input);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("weights file is truncated".into()))?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::Format("not a weights file".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != LAYOUT_VERSION {
        return Err(Error::Format(format!("unsupported weights layout version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("weights header is truncated".into()))?;
    let header: WeightsHeader = serde_json::from_slice(&header)?;
    let mut layers = Vec::with_capacity(header.shapes.len());
    for &(rows, cols) in &header.shapes {
        let data = read_f64s(&mut r, rows * cols)?;
        layers.push(Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Format(e.to_string()))?);
    }
    let m_last = header.shapes.last().map_or(0, |s| s.1);
    let output = Array1::from(read_f64s(&mut r, m_last)?);
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format("trailing bytes after weights".into()));
    }
    Weights::from_parts(header.config, layers, output)
}

pub fn save_weights(w: &Weights, path: &Path) -> Result<()> {
    write_weights(w, File::create(path)?)
}

pub fn load_weights(path: &Path) -> Result<Weights> {
    read_weights(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::he_init;

    #[test]
    fn fmt17_round_trips() {
        for x in [0.1, -1.0 / 3.0, 1e-300, 6.02214076e23, f64::MIN_POSITIVE, 0.0] {
            assert_eq!(fmt17(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn json_floats_round_trip() {
        let v = vec![0.1, 2.0 / 3.0, -7.25e-9];
        let text = to_json(&v).unwrap();
        let back: Vec<f64> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(to_json(&f64::NAN).unwrap().trim(), "null");
    }

    #[test]
    fn weights_round_trip_bit_exact() {
        let w = he_init(&NetworkConfig::new(3, vec![5, 4], 9).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_weights(&w, &mut buf).unwrap();
        assert_eq!(read_weights(buf.as_slice()).unwrap(), w);
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_weights(buf.as_slice()), Err(Error::Format(_))));
        assert!(read_weights(&b"nope"[..]).is_err());
    }
}
