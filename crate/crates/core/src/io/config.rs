//! `key = value` run configuration files.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::data::FrameShape;
use crate::error::{Error, Result};
use crate::inference::LangevinConfig;
use crate::model::{DecoderKind, ModelConfig};
use crate::trainer::{TrainConfig, Variant};

pub const KEYS: &[&str] = &[
    "model.preset",
    "model.d",
    "model.d_noise",
    "model.d_appearance",
    "model.d_motion",
    "model.decoder",
    "model.frame_shape",
    "langevin.delta",
    "langevin.steps",
    "langevin.sigma",
    "langevin.mh",
    "train.iterations",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.chunk",
    "train.seed",
    "train.variant",
    "train.checkpoint_every",
    "synth.burn_in",
    "synth.length",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Includes an encoder exactly when the variant is conditional.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub variant: Variant,
    pub synth_burn_in: usize,
    pub synth_length: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            variant: Variant::Plain,
            synth_burn_in: 60,
            synth_length: 60,
        }
    }
}

struct Entry {
    line: usize,
    value: String,
}

fn parse_value<T: FromStr>(key: &str, e: &Entry) -> Result<T> {
    e.value.parse().map_err(|_| Error::Config {
        line: e.line,
        msg: format!("cannot parse `{}` as the value of {key}", e.value),
    })
}

fn parse_list(s: &str) -> Option<Vec<usize>> {
    if s.trim().is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(|v| v.trim().parse().ok()).collect()
}

fn parse_decoder(s: &str) -> Option<DecoderKind> {
    let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
    match kind.trim() {
        "mlp" => Some(DecoderKind::Mlp {
            hidden: parse_list(rest)?,
        }),
        "deconv" => Some(DecoderKind::Deconv {
            channels: parse_list(rest)?,
        }),
        _ => None,
    }
}

fn parse_frame_shape(s: &str) -> Option<FrameShape> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|v| v.trim().parse().ok())
        .collect::<Option<_>>()?;
    match dims[..] {
        [h, w, c] => Some(FrameShape::new(h, w, c)),
        _ => None,
    }
}

fn parse_bool(key: &str, e: &Entry) -> Result<bool> {
    match e.value.as_str() {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config {
            line: e.line,
            msg: format!("{key} must be true or false, got `{}`", e.value),
        }),
    }
}

impl RunConfig {
    /// Parses configuration text. Every line is blank, a `#` comment, or
    /// `key = value` (trailing `#` comments allowed). Keys may appear in any
    /// order but at most once; the preset is applied before other model keys.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<&str, Entry> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split_once('#').map_or(raw, |(c, _)| c).trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Config {
                    line,
                    msg: format!("expected `key = value`, got `{content}`"),
                });
            };
            let key = key.trim();
            let Some(&known) = KEYS.iter().find(|&&k| k == key) else {
                return Err(Error::Config {
                    line,
                    msg: format!("unknown key `{key}`"),
                });
            };
            if let Some(prev) = entries.get(known) {
                return Err(Error::Config {
                    line,
                    msg: format!("duplicate key `{key}` (first set on line {})", prev.line),
                });
            }
            entries.insert(
                known,
                Entry {
                    line,
                    value: value.trim().to_string(),
                },
            );
        }

        let mut cfg = RunConfig::default();
        let mut paper = false;
        if let Some(e) = entries.get("model.preset") {
            match e.value.as_str() {
                "desk" => {}
                "paper" => {
                    paper = true;
                    cfg.model = ModelConfig::paper();
                }
                other => {
                    return Err(Error::Config {
                        line: e.line,
                        msg: format!("model.preset must be desk or paper, got `{other}`"),
                    })
                }
            }
        }
        for (&key, e) in &entries {
            let m = &mut cfg.model;
            let t = &mut cfg.train;
            let l: &mut LangevinConfig = &mut t.langevin;
            match key {
                "model.preset" => {}
                "model.d" => m.d = parse_value(key, e)?,
                "model.d_noise" => m.d_noise = parse_value(key, e)?,
                "model.d_appearance" => m.d_appearance = parse_value(key, e)?,
                "model.d_motion" => m.d_motion = parse_value(key, e)?,
                "model.decoder" => {
                    m.decoder = parse_decoder(&e.value).ok_or_else(|| Error::Config {
                        line: e.line,
                        msg: format!("model.decoder must be mlp:<widths> or deconv:<channels>, got `{}`", e.value),
                    })?
                }
                "model.frame_shape" => {
                    m.frame = parse_frame_shape(&e.value).ok_or_else(|| Error::Config {
                        line: e.line,
                        msg: format!("model.frame_shape must be HxWxC, got `{}`", e.value),
                    })?
                }
                "langevin.delta" => l.delta = parse_value(key, e)?,
                "langevin.steps" => l.steps = parse_value(key, e)?,
                "langevin.sigma" => l.sigma = parse_value(key, e)?,
                "langevin.mh" => l.mh_correct = parse_bool(key, e)?,
                "train.iterations" => t.iterations = parse_value(key, e)?,
                "train.lr" => t.learning_rate = parse_value(key, e)?,
                "train.beta1" => t.adam_beta1 = parse_value(key, e)?,
                "train.beta2" => t.adam_beta2 = parse_value(key, e)?,
                "train.chunk" => t.chunk_length = parse_value(key, e)?,
                "train.seed" => t.seed = parse_value(key, e)?,
                "train.checkpoint_every" => t.checkpoint_every = parse_value(key, e)?,
                "train.variant" => {
                    cfg.variant = Variant::parse(&e.value).ok_or_else(|| Error::Config {
                        line: e.line,
                        msg: format!(
                            "train.variant must be plain, appearance, appearance+motion or conditional, got `{}`",
                            e.value
                        ),
                    })?
                }
                "synth.burn_in" => cfg.synth_burn_in = parse_value(key, e)?,
                "synth.length" => cfg.synth_length = parse_value(key, e)?,
                _ => unreachable!("key list and match arms agree"),
            }
        }
        if cfg.variant == Variant::Conditional {
            cfg.model.encoder = Some(if paper {
                ModelConfig::paper_encoder()
            } else {
                ModelConfig::desk_encoder()
            });
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.variant.check(&cfg.model)?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }
}
