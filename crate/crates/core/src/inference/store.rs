//! `DGLT` latent files, so warm starts survive restarts.

use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::Result;
use crate::io::bin::{ByteReader, ByteWriter};
use crate::model::LatentTrajectory;

const MAGIC: &[u8; 4] = b"DGLT";
const VERSION: u32 = 1;

pub fn encode_latents(latents: &[LatentTrajectory]) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    w.magic(MAGIC);
    w.u32(VERSION);
    w.usize(latents.len())?;
    for z in latents {
        let dims = z.dims();
        for v in [
            dims.d,
            z.frames(),
            dims.d_noise,
            dims.d_appearance,
            dims.d_motion,
        ] {
            w.usize(v)?;
        }
        for b in z.blocks() {
            w.f64s(b.data());
        }
    }
    Ok(w.buf)
}

pub fn decode_latents(path: &Path, bytes: &[u8]) -> Result<Vec<LatentTrajectory>> {
    let mut r = ByteReader::new(path, bytes);
    r.expect_magic(MAGIC)?;
    r.expect_version(VERSION)?;
    let n = r.usize()?;
    let mut out = Vec::new();
    for i in 0..n {
        let (d, t, dn, da, dm) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?, r.usize()?);
        let total = [d, t.saturating_mul(dn), da, dm]
            .iter()
            .try_fold(0usize, |acc, &x| acc.checked_add(x))
            .and_then(|s| s.checked_mul(8));
        if total.map_or(true, |b| b > r.remaining()) {
            return Err(r.error(format!("sequence {i} is truncated")));
        }
        let s0 = Tensor::vector(r.f64s(d)?);
        let xi = Tensor::new(&[t, dn], r.f64s(t * dn)?)?;
        let a = if da > 0 {
            Some(Tensor::vector(r.f64s(da)?))
        } else {
            None
        };
        let m = if dm > 0 {
            Some(Tensor::vector(r.f64s(dm)?))
        } else {
            None
        };
        out.push(LatentTrajectory { s0, xi, a, m });
    }
    r.finish()?;
    Ok(out)
}

pub fn write_latents(path: &Path, latents: &[LatentTrajectory]) -> Result<()> {
    std::fs::write(path, encode_latents(latents)?)?;
    Ok(())
}

pub fn read_latents(path: &Path) -> Result<Vec<LatentTrajectory>> {
    let bytes = std::fs::read(path)?;
    decode_latents(path, &bytes)
}
