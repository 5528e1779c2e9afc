//! `DGSQ` frame sequences (f32 payload in [-1, 1]) and `DGMK` visibility
//! masks (one byte per value). Both share the header
//! `magic, version, T, H, W, C` with u32 fields.

use std::path::Path;

use super::bin::{ByteReader, ByteWriter};
use crate::data::{FrameSequence, FrameShape, VisibilityMask};
use crate::error::{Error, Result};

const SEQ_MAGIC: &[u8; 4] = b"DGSQ";
const MASK_MAGIC: &[u8; 4] = b"DGMK";
const VERSION: u32 = 1;

fn header(w: &mut ByteWriter, magic: &[u8; 4], frames: usize, shape: FrameShape) -> Result<()> {
    w.magic(magic);
    w.u32(VERSION);
    for v in [frames, shape.height, shape.width, shape.channels] {
        w.usize(v)?;
    }
    Ok(())
}

fn read_header(
    r: &mut ByteReader,
    magic: &[u8; 4],
    width: usize,
) -> Result<(usize, FrameShape, usize)> {
    r.expect_magic(magic)?;
    r.expect_version(VERSION)?;
    let (t, h, w, c) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?);
    let n = [t, h, w, c]
        .iter()
        .try_fold(1usize, |acc, &x| acc.checked_mul(x))
        .ok_or_else(|| r.error("dimensions overflow"))?;
    if n.checked_mul(width) != Some(r.remaining()) {
        return Err(r.error(format!(
            "header says {t}x{h}x{w}x{c} values, payload has {} bytes",
            r.remaining()
        )));
    }
    Ok((t, FrameShape::new(h, w, c), n))
}

/// Serializes a sequence. Values are stored as f32 and must lie in [-1, 1].
pub fn encode_sequence(x: &FrameSequence) -> Result<Vec<u8>> {
    if !x.in_unit_range() {
        return Err(Error::Data(
            "frame values must be finite and within [-1, 1]".into(),
        ));
    }
    let mut w = ByteWriter::default();
    header(&mut w, SEQ_MAGIC, x.frames(), x.shape())?;
    w.buf.reserve(x.data().len() * 4);
    for &v in x.data() {
        w.f32(v as f32);
    }
    Ok(w.buf)
}

pub fn decode_sequence(path: &Path, bytes: &[u8]) -> Result<FrameSequence> {
    let mut r = ByteReader::new(path, bytes);
    let (t, shape, n) = read_header(&mut r, SEQ_MAGIC, 4)?;
    let data = (0..n)
        .map(|_| r.f32().map(f64::from))
        .collect::<Result<Vec<_>>>()?;
    if !data.iter().all(|v| (-1.0..=1.0).contains(v)) {
        return Err(r.error("values outside [-1, 1]"));
    }
    FrameSequence::new(shape, t, data)
}

pub fn write_sequence(path: &Path, x: &FrameSequence) -> Result<()> {
    std::fs::write(path, encode_sequence(x)?)?;
    Ok(())
}

pub fn read_sequence(path: &Path) -> Result<FrameSequence> {
    decode_sequence(path, &std::fs::read(path)?)
}

pub fn encode_mask(m: &VisibilityMask) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    header(&mut w, MASK_MAGIC, m.frames(), m.shape())?;
    w.buf.extend(m.data().iter().map(|&v| u8::from(v)));
    Ok(w.buf)
}

pub fn decode_mask(path: &Path, bytes: &[u8]) -> Result<VisibilityMask> {
    let mut r = ByteReader::new(path, bytes);
    let (t, shape, n) = read_header(&mut r, MASK_MAGIC, 1)?;
    let raw = r.bytes(n)?;
    if let Some(b) = raw.iter().find(|&&b| b > 1) {
        return Err(r.error(format!("mask byte {b} is neither 0 nor 1")));
    }
    VisibilityMask::new(shape, t, raw.iter().map(|&b| b == 1).collect())
}

pub fn write_mask(path: &Path, m: &VisibilityMask) -> Result<()> {
    std::fs::write(path, encode_mask(m)?)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<VisibilityMask> {
    decode_mask(path, &std::fs::read(path)?)
}
