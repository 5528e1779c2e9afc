use crate::data::FrameShape;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    /// Fully connected decoder with tanh hidden layers of the given widths.
    Mlp { hidden: Vec<usize> },
    /// Stack of 4x4, stride 2, pad 1 transposed convolutions starting from a
    /// 1x1 map. `channels` lists the output channels of each layer; the last
    /// entry must equal the frame channel count.
    Deconv { channels: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    /// Fully connected encoder with tanh hidden layers.
    Mlp { hidden: Vec<usize> },
    /// ReLU convolutions (padding `kernel / 2`) followed by one linear layer.
    Conv { layers: Vec<ConvSpec> },
}

/// Architecture of a dynamic generator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub d: usize,
    pub d_noise: usize,
    pub d_appearance: usize,
    pub d_motion: usize,
    pub frame: FrameShape,
    /// Hidden widths of the transition MLP; its output layer has width `d`.
    pub transition_hidden: Vec<usize>,
    pub decoder: DecoderKind,
    pub encoder: Option<EncoderKind>,
    /// Identity activations everywhere, no residual tanh and no output tanh.
    /// Used to make the model coincide with a linear-Gaussian state space
    /// model for oracle comparisons.
    pub linear_mode: bool,
}

impl ModelConfig {
    /// Small configuration that trains in seconds.
    pub fn desk() -> Self {
        ModelConfig {
            d: 10,
            d_noise: 5,
            d_appearance: 0,
            d_motion: 0,
            frame: FrameShape::new(16, 16, 1),
            transition_hidden: vec![20, 20],
            decoder: DecoderKind::Mlp { hidden: vec![32] },
            encoder: None,
            linear_mode: false,
        }
    }

    /// 100-dimensional state and noise, 64x64x3 frames from six deconvolutions.
    pub fn paper() -> Self {
        ModelConfig {
            d: 100,
            d_noise: 100,
            d_appearance: 0,
            d_motion: 0,
            frame: FrameShape::new(64, 64, 3),
            transition_hidden: vec![20, 20],
            decoder: DecoderKind::Deconv {
                channels: vec![512, 512, 256, 128, 64, 3],
            },
            encoder: None,
            linear_mode: false,
        }
    }

    pub fn desk_encoder() -> EncoderKind {
        EncoderKind::Mlp { hidden: vec![32] }
    }

    pub fn paper_encoder() -> EncoderKind {
        EncoderKind::Conv {
            layers: vec![
                ConvSpec {
                    channels: 64,
                    kernel: 5,
                    stride: 2,
                },
                ConvSpec {
                    channels: 128,
                    kernel: 3,
                    stride: 2,
                },
                ConvSpec {
                    channels: 256,
                    kernel: 3,
                    stride: 1,
                },
            ],
        }
    }

    pub fn frame_len(&self) -> usize {
        self.frame.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d == 0 {
            return bad("state dimension must be positive".into());
        }
        if self.frame.is_empty() {
            return bad(format!("frame shape {} is empty", self.frame));
        }
        if self.transition_hidden.contains(&0) {
            return bad("transition hidden widths must be positive".into());
        }
        match &self.decoder {
            DecoderKind::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return bad("decoder hidden widths must be positive".into());
                }
            }
            DecoderKind::Deconv { channels } => {
                let side = 1usize.checked_shl(channels.len() as u32).unwrap_or(0);
                if channels.is_empty() || channels.contains(&0) {
                    return bad("deconv decoder needs positive channel counts".into());
                }
                if self.frame.height != side || self.frame.width != side {
                    return bad(format!(
                        "{} deconv layers produce {}x{} frames, configured {}",
                        channels.len(),
                        side,
                        side,
                        self.frame
                    ));
                }
                if *channels.last().unwrap() != self.frame.channels {
                    return bad(format!(
                        "last deconv layer has {} channels, frames have {}",
                        channels.last().unwrap(),
                        self.frame.channels
                    ));
                }
            }
        }
        match &self.encoder {
            Some(EncoderKind::Mlp { hidden }) if hidden.contains(&0) => {
                return bad("encoder hidden widths must be positive".into())
            }
            Some(EncoderKind::Conv { layers }) => {
                let (mut h, mut w) = (self.frame.height, self.frame.width);
                for l in layers {
                    if l.channels == 0 || l.kernel == 0 || l.stride == 0 {
                        return bad("encoder conv layers need positive sizes".into());
                    }
                    let pad = l.kernel / 2;
                    if h + 2 * pad < l.kernel || w + 2 * pad < l.kernel {
                        return bad(format!(
                            "encoder kernel {} too large for {}x{}",
                            l.kernel, h, w
                        ));
                    }
                    h = (h + 2 * pad - l.kernel) / l.stride + 1;
                    w = (w + 2 * pad - l.kernel) / l.stride + 1;
                }
            }
            _ => {}
        }
        Ok(())
    }
}
