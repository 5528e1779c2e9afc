use crate::data::{FrameSequence, FrameShape, VisibilityMask};
use crate::error::{Error, Result};

/// One training sequence. Occluded entries of `frames` are zeroed on
/// construction, so nothing downstream can read them.
#[derive(Clone, Debug)]
pub struct Sequence {
    frames: FrameSequence,
    mask: Option<VisibilityMask>,
    truth: Option<FrameSequence>,
}

impl Sequence {
    pub fn new(mut frames: FrameSequence, mask: Option<VisibilityMask>) -> Result<Self> {
        if frames.frames() == 0 {
            return Err(Error::Data("sequence has no frames".into()));
        }
        if let Some(m) = &mask {
            if !m.matches(&frames) {
                return Err(Error::Data(format!(
                    "mask is {} frames of {}, sequence is {} frames of {}",
                    m.frames(),
                    m.shape(),
                    frames.frames(),
                    frames.shape()
                )));
            }
            if m.visible_count() == 0 {
                return Err(Error::Data("mask hides every pixel of the sequence".into()));
            }
            for (v, &vis) in frames.data_mut().iter_mut().zip(m.data()) {
                if !vis {
                    *v = 0.0;
                }
            }
        }
        if !frames.data().iter().all(|v| v.is_finite()) {
            return Err(Error::Data("sequence has non-finite visible values".into()));
        }
        Ok(Sequence {
            frames,
            mask,
            truth: None,
        })
    }

    /// Attaches unoccluded frames used only to score occluded pixels.
    pub fn with_truth(mut self, truth: FrameSequence) -> Result<Self> {
        if truth.shape() != self.frames.shape() || truth.frames() != self.frames.frames() {
            return Err(Error::Data(
                "ground truth differs in shape from the sequence".into(),
            ));
        }
        self.truth = Some(truth);
        Ok(self)
    }

    pub fn frames(&self) -> &FrameSequence {
        &self.frames
    }

    pub fn mask(&self) -> Option<&VisibilityMask> {
        self.mask.as_ref()
    }

    pub fn truth(&self) -> Option<&FrameSequence> {
        self.truth.as_ref()
    }

    pub fn len(&self) -> usize {
        self.frames.frames()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_visible(&self, t: usize) -> bool {
        self.mask
            .as_ref()
            .map_or(true, |m| m.window(t, t + 1).iter().all(|&v| v))
    }
}

/// Sequences sharing one frame shape.
#[derive(Clone, Debug)]
pub struct Dataset {
    shape: FrameShape,
    sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn new(sequences: Vec<Sequence>) -> Result<Self> {
        let first = sequences
            .first()
            .ok_or_else(|| Error::Data("dataset is empty".into()))?;
        let shape = first.frames().shape();
        if let Some((i, s)) = sequences
            .iter()
            .enumerate()
            .find(|(_, s)| s.frames().shape() != shape)
        {
            return Err(Error::Data(format!(
                "sequence {} has frames of {}, sequence 0 has {}",
                i,
                s.frames().shape(),
                shape
            )));
        }
        Ok(Dataset { shape, sequences })
    }

    /// Fully visible sequences.
    pub fn from_frames(frames: Vec<FrameSequence>) -> Result<Self> {
        Self::new(
            frames
                .into_iter()
                .map(|f| Sequence::new(f, None))
                .collect::<Result<_>>()?,
        )
    }

    pub fn shape(&self) -> FrameShape {
        self.shape
    }

    pub fn sequences(&self) -> &[Sequence] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}
