//! `DGMD` model files: architecture descriptor followed by every parameter
//! value as f64 little-endian in declaration order.

use std::path::Path;

use super::{ConvSpec, DecoderKind, EncoderKind, Model, ModelConfig};
use crate::data::FrameShape;
use crate::error::Result;
use crate::io::bin::{ByteReader, ByteWriter};

const MAGIC: &[u8; 4] = b"DGMD";
const VERSION: u32 = 1;

fn write_list(w: &mut ByteWriter, v: &[usize]) -> Result<()> {
    w.usize(v.len())?;
    for &x in v {
        w.usize(x)?;
    }
    Ok(())
}

fn read_list(r: &mut ByteReader) -> Result<Vec<usize>> {
    let n = r.usize()?;
    if n > r.remaining() / 4 {
        return Err(r.error("list length exceeds file size"));
    }
    (0..n).map(|_| r.usize()).collect()
}

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let c = model.config();
    let mut w = ByteWriter::default();
    w.magic(MAGIC);
    w.u32(VERSION);
    for v in [c.d, c.d_noise, c.d_appearance, c.d_motion] {
        w.usize(v)?;
    }
    for v in [c.frame.height, c.frame.width, c.frame.channels] {
        w.usize(v)?;
    }
    w.u8(c.linear_mode as u8);
    write_list(&mut w, &c.transition_hidden)?;
    match &c.decoder {
        DecoderKind::Mlp { hidden } => {
            w.u8(0);
            write_list(&mut w, hidden)?;
        }
        DecoderKind::Deconv { channels } => {
            w.u8(1);
            write_list(&mut w, channels)?;
        }
    }
    match &c.encoder {
        None => w.u8(0),
        Some(EncoderKind::Mlp { hidden }) => {
            w.u8(1);
            write_list(&mut w, hidden)?;
        }
        Some(EncoderKind::Conv { layers }) => {
            w.u8(2);
            w.usize(layers.len())?;
            for l in layers {
                w.usize(l.channels)?;
                w.usize(l.kernel)?;
                w.usize(l.stride)?;
            }
        }
    }
    let flat = model.params().flatten();
    w.usize(flat.len())?;
    w.f64s(&flat);
    Ok(w.buf)
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Model> {
    let mut r = ByteReader::new(path, bytes);
    r.expect_magic(MAGIC)?;
    r.expect_version(VERSION)?;
    let (d, d_noise, d_appearance, d_motion) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?);
    let frame = FrameShape::new(r.usize()?, r.usize()?, r.usize()?);
    let linear_mode = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(r.error(format!("bad linear-mode flag {v}"))),
    };
    let transition_hidden = read_list(&mut r)?;
    let decoder = match r.u8()? {
        0 => DecoderKind::Mlp {
            hidden: read_list(&mut r)?,
        },
        1 => DecoderKind::Deconv {
            channels: read_list(&mut r)?,
        },
        v => return Err(r.error(format!("unknown decoder kind {v}"))),
    };
    let encoder = match r.u8()? {
        0 => None,
        1 => Some(EncoderKind::Mlp {
            hidden: read_list(&mut r)?,
        }),
        2 => {
            let n = r.usize()?;
            if n > r.remaining() / 12 {
                return Err(r.error("encoder layer count exceeds file size"));
            }
            let mut layers = Vec::with_capacity(n);
            for _ in 0..n {
                layers.push(ConvSpec {
                    channels: r.usize()?,
                    kernel: r.usize()?,
                    stride: r.usize()?,
                });
            }
            Some(EncoderKind::Conv { layers })
        }
        v => return Err(r.error(format!("unknown encoder kind {v}"))),
    };
    let config = ModelConfig {
        d,
        d_noise,
        d_appearance,
        d_motion,
        frame,
        transition_hidden,
        decoder,
        encoder,
        linear_mode,
    };
    let mut model = Model::zeros(config).map_err(|e| r.error(e.to_string()))?;
    let n = r.usize()?;
    if n != model.params().num_scalars() {
        return Err(r.error(format!(
            "architecture has {} parameters, file stores {}",
            model.params().num_scalars(),
            n
        )));
    }
    if r.remaining() != n * 8 {
        return Err(r.error(format!(
            "expected {} parameter bytes, found {}",
            n * 8,
            r.remaining()
        )));
    }
    let values = r.f64s(n)?;
    r.finish()?;
    model.params_mut().assign_flat(&values)?;
    Ok(model)
}

pub fn write_checkpoint(path: &Path, model: &Model) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(path, &bytes)
}
