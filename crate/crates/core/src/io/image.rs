//! Binary PGM (P5) and PPM (P6) frames with maxval 255.

use std::path::{Path, PathBuf};

use crate::data::{FrameSequence, FrameShape, INTENSITY_SCALE};
use crate::error::{Error, Result};

/// Maps [-1, 1] to [0, 255], rounding half to even.
pub fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * INTENSITY_SCALE)
        .round_ties_even()
        .clamp(0.0, 255.0) as u8
}

pub fn from_byte(p: u8) -> f64 {
    f64::from(p) / INTENSITY_SCALE - 1.0
}

/// Encodes one frame; one channel gives P5, three give P6.
pub fn encode_image(shape: FrameShape, frame: &[f64]) -> Result<Vec<u8>> {
    let kind = match shape.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::Data(format!(
                "images need 1 or 3 channels, frames have {c}"
            )))
        }
    };
    let mut out = format!("{kind}\n{} {}\n255\n", shape.width, shape.height).into_bytes();
    out.extend(frame.iter().map(|&v| to_byte(v)));
    Ok(out)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Option<&[u8]> {
        self.skip_space();
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| !b.is_ascii_whitespace())
        {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Option<usize> {
        std::str::from_utf8(self.token()?).ok()?.parse().ok()
    }
}

/// Decodes a P5 or P6 image into its shape and [-1, 1] values.
pub fn decode_image(path: &Path, bytes: &[u8]) -> Result<(FrameShape, Vec<f64>)> {
    let err = |msg: &str| Error::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    };
    let mut h = Header { bytes, pos: 0 };
    let channels = match h.token() {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(err("not a binary PGM (P5) or PPM (P6) file")),
    };
    let (w, ht, max) = match (h.number(), h.number(), h.number()) {
        (Some(w), Some(ht), Some(m)) => (w, ht, m),
        _ => return Err(err("malformed header")),
    };
    if max != 255 {
        return Err(err("only maxval 255 is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(err("malformed header"));
    }
    let raster = &bytes[h.pos + 1..];
    let shape = FrameShape::new(ht, w, channels);
    if raster.len() != shape.len() {
        return Err(err(&format!(
            "expected {} raster bytes, found {}",
            shape.len(),
            raster.len()
        )));
    }
    Ok((shape, raster.iter().map(|&p| from_byte(p)).collect()))
}

/// Writes one image per frame into `dir` as `frame_0000.pgm` (or `.ppm`).
pub fn export_frames(dir: &Path, x: &FrameSequence) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let ext = if x.shape().channels == 3 {
        "ppm"
    } else {
        "pgm"
    };
    let mut paths = Vec::with_capacity(x.frames());
    for t in 0..x.frames() {
        let p = dir.join(format!("frame_{t:04}.{ext}"));
        std::fs::write(&p, encode_image(x.shape(), x.frame(t))?)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Reads every `.pgm`/`.ppm` file in `dir`, in name order, as one sequence.
pub fn convert_frames(dir: &Path) -> Result<FrameSequence> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| {
        p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("pgm") || e.eq_ignore_ascii_case("ppm"))
    });
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no PGM or PPM files in {}",
            dir.display()
        )));
    }
    let mut shape = None;
    let mut data = Vec::new();
    for p in &files {
        let (s, values) = decode_image(p, &std::fs::read(p)?)?;
        match shape {
            None => shape = Some(s),
            Some(first) if first != s => {
                return Err(Error::Data(format!(
                    "{} is {}, earlier frames are {}",
                    p.display(),
                    s,
                    first
                )))
            }
            _ => {}
        }
        data.extend(values);
    }
    FrameSequence::new(shape.expect("at least one file"), files.len(), data)
}
