//! Transition, emission and encoder networks and the deterministic rollout.

mod checkpoint;
mod config;
mod latents;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use config::{ConvSpec, DecoderKind, EncoderKind, ModelConfig};
pub use latents::{LatentDims, LatentTrajectory};

use crate::data::{FrameSequence, FrameShape};
use crate::diffcore::{Activation, Graph, ParamId, ParamStore, SeededRng, Tensor, Var};
use crate::error::{Error, Result};

/// Weight initialization. Biases and shifts start at 0, scales at 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightInit {
    /// Weights ~ N(0, std^2).
    Normal(f64),
    /// Weights ~ N(0, gain^2 / fan_in).
    FanIn(f64),
    /// Every parameter, including scales, is zero.
    Zero,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct DeconvLayer {
    k: ParamId,
    b: ParamId,
    // scale/shift then ReLU after every layer except the last
    norm: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
enum Emission {
    Mlp(Vec<Dense>),
    Deconv(Vec<DeconvLayer>),
}

#[derive(Clone, Debug)]
enum Encoder {
    Mlp(Vec<Dense>),
    Conv {
        convs: Vec<(ParamId, ParamId, ConvSpec)>,
        flat: usize,
        fc: Dense,
    },
}

/// A dynamic generator: parameters plus the wiring that uses them.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    transition: Vec<Dense>,
    emission: Emission,
    encoder: Option<Encoder>,
}

struct Builder<'r> {
    params: ParamStore,
    init: WeightInit,
    rng: Option<&'r mut SeededRng>,
}

impl Builder<'_> {
    fn weights(&mut self, name: String, shape: &[usize], fan_in: usize) -> ParamId {
        let mut t = Tensor::zeros(shape);
        let std = match self.init {
            WeightInit::Normal(s) => s,
            WeightInit::FanIn(g) => g / (fan_in.max(1) as f64).sqrt(),
            WeightInit::Zero => 0.0,
        };
        if std != 0.0 {
            let rng = self.rng.as_mut().expect("random init needs a generator");
            for v in t.data_mut() {
                *v = std * rng.normal();
            }
        }
        self.params.add(name, t)
    }

    fn constant(&mut self, name: String, n: usize, value: f64) -> ParamId {
        let v = if self.init == WeightInit::Zero {
            0.0
        } else {
            value
        };
        self.params.add(name, Tensor::full(&[n], v))
    }

    fn dense(&mut self, prefix: &str, i: usize, n_in: usize, n_out: usize) -> Dense {
        let w = self.weights(format!("{prefix}.{i}.w"), &[n_out, n_in], n_in);
        let b = self.constant(format!("{prefix}.{i}.b"), n_out, 0.0);
        Dense { w, b }
    }

    fn mlp(&mut self, prefix: &str, n_in: usize, hidden: &[usize], n_out: usize) -> Vec<Dense> {
        let mut widths = vec![n_in];
        widths.extend_from_slice(hidden);
        widths.push(n_out);
        widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| self.dense(prefix, i, w[0], w[1]))
            .collect()
    }
}

impl Model {
    /// Fresh model with weights ~ N(0, 0.02^2).
    pub fn new(config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        Self::with_init(config, WeightInit::Normal(0.02), Some(rng))
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        Self::with_init(config, WeightInit::Zero, None)
    }

    pub fn with_init(
        config: ModelConfig,
        init: WeightInit,
        rng: Option<&mut SeededRng>,
    ) -> Result<Self> {
        config.validate()?;
        if init != WeightInit::Zero && rng.is_none() {
            return Err(Error::InvalidConfig(
                "random initialization needs a seed".into(),
            ));
        }
        let mut b = Builder {
            params: ParamStore::new(),
            init,
            rng,
        };
        let c = &config;
        let transition = b.mlp(
            "transition",
            c.d + c.d_noise + c.d_motion,
            &c.transition_hidden,
            c.d,
        );
        let emit_in = c.d + c.d_appearance;
        let emission = match &c.decoder {
            DecoderKind::Mlp { hidden } => {
                Emission::Mlp(b.mlp("emission", emit_in, hidden, c.frame_len()))
            }
            DecoderKind::Deconv { channels } => {
                let mut layers = Vec::with_capacity(channels.len());
                let mut cin = emit_in;
                for (i, &cout) in channels.iter().enumerate() {
                    let k = b.weights(format!("emission.{i}.k"), &[4, 4, cin, cout], cin * 4);
                    let bias = b.constant(format!("emission.{i}.b"), cout, 0.0);
                    let norm = (i + 1 < channels.len()).then(|| {
                        (
                            b.constant(format!("emission.{i}.scale"), cout, 1.0),
                            b.constant(format!("emission.{i}.shift"), cout, 0.0),
                        )
                    });
                    layers.push(DeconvLayer { k, b: bias, norm });
                    cin = cout;
                }
                Emission::Deconv(layers)
            }
        };
        let enc_out = c.d + c.d_appearance;
        let encoder = match &c.encoder {
            None => None,
            Some(EncoderKind::Mlp { hidden }) => Some(Encoder::Mlp(b.mlp(
                "encoder",
                c.frame_len(),
                hidden,
                enc_out,
            ))),
            Some(EncoderKind::Conv { layers }) => {
                let (mut h, mut w, mut cin) = (c.frame.height, c.frame.width, c.frame.channels);
                let mut convs = Vec::with_capacity(layers.len());
                for (i, l) in layers.iter().enumerate() {
                    let fan = l.kernel * l.kernel * cin;
                    let k = b.weights(
                        format!("encoder.{i}.k"),
                        &[l.kernel, l.kernel, cin, l.channels],
                        fan,
                    );
                    let bias = b.constant(format!("encoder.{i}.b"), l.channels, 0.0);
                    convs.push((k, bias, *l));
                    let pad = l.kernel / 2;
                    h = (h + 2 * pad - l.kernel) / l.stride + 1;
                    w = (w + 2 * pad - l.kernel) / l.stride + 1;
                    cin = l.channels;
                }
                let flat = h * w * cin;
                let fc = b.dense("encoder", layers.len(), flat, enc_out);
                Some(Encoder::Conv { convs, flat, fc })
            }
        };
        Ok(Model {
            config,
            params: b.params,
            transition,
            emission,
            encoder,
        })
    }

    /// Linear-mode model realizing `s_t = A s_{t-1} + B xi_t`, `x_t = C s_t`.
    pub fn linear(a: &Tensor, b: &Tensor, c: &Tensor, frame: FrameShape) -> Result<Self> {
        let d = a.shape().first().copied().unwrap_or(0);
        let ok = a.shape() == [d, d]
            && b.shape().len() == 2
            && b.shape()[0] == d
            && c.shape() == [frame.len(), d];
        if !ok {
            return Err(Error::dim(
                "linear model",
                format!(
                    "A {:?}, B {:?}, C {:?}, frame {}",
                    a.shape(),
                    b.shape(),
                    c.shape(),
                    frame
                ),
            ));
        }
        let dn = b.shape()[1];
        let config = ModelConfig {
            d,
            d_noise: dn,
            d_appearance: 0,
            d_motion: 0,
            frame,
            transition_hidden: Vec::new(),
            decoder: DecoderKind::Mlp { hidden: Vec::new() },
            encoder: None,
            linear_mode: true,
        };
        let mut model = Self::zeros(config)?;
        let mut w = Vec::with_capacity(d * (d + dn));
        for i in 0..d {
            w.extend_from_slice(a.row(i));
            w.extend_from_slice(b.row(i));
        }
        let tw = model.transition[0].w;
        model.params.get_mut(tw).value = Tensor::new(&[d, d + dn], w)?;
        let Emission::Mlp(layers) = &model.emission else {
            unreachable!()
        };
        let ew = layers[0].w;
        model.params.get_mut(ew).value = c.clone();
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn has_encoder(&self) -> bool {
        self.encoder.is_some()
    }

    pub fn latent_dims(&self) -> LatentDims {
        LatentDims {
            d: self.config.d,
            d_noise: self.config.d_noise,
            d_appearance: self.config.d_appearance,
            d_motion: self.config.d_motion,
        }
    }

    fn hidden_act(&self) -> Activation {
        if self.config.linear_mode {
            Activation::Identity
        } else {
            Activation::Tanh
        }
    }

    fn mlp_graph(&self, g: &mut Graph, layers: &[Dense], mut x: Var) -> Result<Var> {
        let act = self.hidden_act();
        for (i, l) in layers.iter().enumerate() {
            x = g.affine(x, l.w, l.b)?;
            if i + 1 < layers.len() {
                x = g.activation(x, act);
            }
        }
        Ok(x)
    }

    fn expect_width(&self, op: &'static str, g: &Graph, v: Var, width: usize) -> Result<()> {
        let t = g.value(v);
        if t.shape() != [width] {
            return Err(Error::dim(
                op,
                format!("expected [{}], got {:?}", width, t.shape()),
            ));
        }
        Ok(())
    }

    /// `s_t = tanh(s_prev + MLP(s_prev, xi_t, m))` on 1-D nodes.
    pub fn transition_graph(
        &self,
        g: &mut Graph,
        s_prev: Var,
        xi_t: Var,
        m: Option<Var>,
    ) -> Result<Var> {
        let c = &self.config;
        self.expect_width("transition_step: s_prev", g, s_prev, c.d)?;
        self.expect_width("transition_step: xi_t", g, xi_t, c.d_noise)?;
        let mut parts = [s_prev, xi_t, s_prev];
        let mut n_parts = 2;
        match m {
            Some(m) => {
                self.expect_width("transition_step: m", g, m, c.d_motion)?;
                parts[2] = m;
                n_parts = 3;
            }
            None if c.d_motion > 0 => {
                return Err(Error::dim(
                    "transition_step",
                    "model expects a motion vector",
                ))
            }
            None => {}
        }
        let x = g.concat(&parts[..n_parts])?;
        let r = self.mlp_graph(g, &self.transition, x)?;
        if c.linear_mode {
            return Ok(r);
        }
        let sum = g.add(s_prev, r)?;
        Ok(g.tanh(sum))
    }

    /// States `s_1..s_T` from `s0` and innovations `xi` (`[T, d_noise]`).
    pub fn unroll_graph(
        &self,
        g: &mut Graph,
        s0: Var,
        xi: Var,
        m: Option<Var>,
    ) -> Result<Vec<Var>> {
        let t_len = match g.value(xi).shape() {
            [t, n] if *n == self.config.d_noise => *t,
            s => {
                return Err(Error::dim(
                    "rollout: xi",
                    format!("expected [T, {}], got {:?}", self.config.d_noise, s),
                ))
            }
        };
        let mut states = Vec::with_capacity(t_len);
        let mut s = s0;
        for t in 0..t_len {
            let xt = g.row(xi, t)?;
            s = self.transition_graph(g, s, xt, m)?;
            states.push(s);
        }
        Ok(states)
    }

    /// Frames for `states` (`[d]` or `[T, d]`); output is `[D]` or `[T, D]`.
    pub fn emit_graph(&self, g: &mut Graph, states: Var, a: Option<Var>) -> Result<Var> {
        let c = &self.config;
        let st = g.value(states).shape().to_vec();
        let (rows, single) = match st.as_slice() {
            [n] if *n == c.d => (1, true),
            [t, n] if *n == c.d => (*t, false),
            s => {
                return Err(Error::dim(
                    "emit: state",
                    format!("expected [.., {}], got {:?}", c.d, s),
                ))
            }
        };
        let x = match a {
            Some(a) => {
                self.expect_width("emit: appearance", g, a, c.d_appearance)?;
                g.concat(&[states, a])?
            }
            None if c.d_appearance > 0 => {
                return Err(Error::dim("emit", "model expects an appearance vector"))
            }
            None => states,
        };
        let out = match &self.emission {
            Emission::Mlp(layers) => self.mlp_graph(g, layers, x)?,
            Emission::Deconv(layers) => {
                let width = c.d + c.d_appearance;
                let mut h = g.reshape(x, &[rows, 1, 1, width])?;
                for l in layers {
                    h = g.conv_transpose2d(h, l.k, l.b, 2, 1)?;
                    if let Some((scale, shift)) = l.norm {
                        h = g.scale_shift(h, scale, shift)?;
                        let act = if c.linear_mode {
                            Activation::Identity
                        } else {
                            Activation::Relu
                        };
                        h = g.activation(h, act);
                    }
                }
                if single {
                    g.reshape(h, &[c.frame_len()])?
                } else {
                    g.reshape(h, &[rows, c.frame_len()])?
                }
            }
        };
        Ok(if c.linear_mode { out } else { g.tanh(out) })
    }

    /// `(s0, a)` from a first frame given as a `[D]` node.
    pub fn encode_graph(&self, g: &mut Graph, x0: Var) -> Result<(Var, Option<Var>)> {
        let c = &self.config;
        let enc = self
            .encoder
            .as_ref()
            .ok_or_else(|| Error::State("model has no encoder".into()))?;
        if g.value(x0).len() != c.frame_len() {
            return Err(Error::dim(
                "encode",
                format!(
                    "frame has {} values, model expects {}",
                    g.value(x0).len(),
                    c.frame_len()
                ),
            ));
        }
        let out = match enc {
            Encoder::Mlp(layers) => {
                let x = g.reshape(x0, &[c.frame_len()])?;
                self.mlp_graph(g, layers, x)?
            }
            Encoder::Conv { convs, flat, fc } => {
                let f = c.frame;
                let mut h = g.reshape(x0, &[f.height, f.width, f.channels])?;
                let act = if c.linear_mode {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                for &(k, b, spec) in convs {
                    h = g.conv2d(h, k, b, spec.stride, spec.kernel / 2)?;
                    h = g.activation(h, act);
                }
                let h = g.reshape(h, &[*flat])?;
                g.affine(h, fc.w, fc.b)?
            }
        };
        let s0 = g.slice_last(out, 0, c.d)?;
        let a = if c.d_appearance > 0 {
            Some(g.slice_last(out, c.d, c.d_appearance)?)
        } else {
            None
        };
        Ok((s0, a))
    }

    /// Frames `[T, D]` for a full latent trajectory, or `None` when `T = 0`.
    pub fn rollout_graph(
        &self,
        g: &mut Graph,
        s0: Var,
        xi: Var,
        a: Option<Var>,
        m: Option<Var>,
    ) -> Result<Option<Var>> {
        let states = self.unroll_graph(g, s0, xi, m)?;
        if states.is_empty() {
            return Ok(None);
        }
        let stacked = g.stack(&states)?;
        Ok(Some(self.emit_graph(g, stacked, a)?))
    }

    pub fn transition_step(
        &self,
        s_prev: &Tensor,
        xi_t: &Tensor,
        m: Option<&Tensor>,
    ) -> Result<Tensor> {
        let mut g = Graph::without_param_grads(&self.params);
        let s = g.constant(s_prev.clone());
        let x = g.constant(xi_t.clone());
        let m = m.map(|m| g.constant(m.clone()));
        let out = self.transition_graph(&mut g, s, x, m)?;
        Ok(g.value(out).clone())
    }

    /// One frame, shaped `[H, W, C]`.
    pub fn emit(&self, s: &Tensor, a: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::without_param_grads(&self.params);
        let sv = g.constant(s.clone());
        let av = a.map(|a| g.constant(a.clone()));
        let out = self.emit_graph(&mut g, sv, av)?;
        let f = self.config.frame;
        g.value(out)
            .clone()
            .reshape(&[f.height, f.width, f.channels])
    }

    pub fn encode(&self, x0: &[f64]) -> Result<(Tensor, Option<Tensor>)> {
        let mut g = Graph::without_param_grads(&self.params);
        let x = g.constant(Tensor::vector(x0.to_vec()));
        let (s0, a) = self.encode_graph(&mut g, x)?;
        Ok((g.value(s0).clone(), a.map(|a| g.value(a).clone())))
    }

    pub fn rollout(&self, z: &LatentTrajectory) -> Result<FrameSequence> {
        z.check_dims(self.latent_dims(), z.frames())?;
        let mut g = Graph::without_param_grads(&self.params);
        let s0 = g.constant(z.s0.clone());
        let xi = g.constant(z.xi.clone());
        let a = z.a.as_ref().map(|a| g.constant(a.clone()));
        let m = z.m.as_ref().map(|m| g.constant(m.clone()));
        let frames = self.rollout_graph(&mut g, s0, xi, a, m)?;
        let data = frames.map_or_else(Vec::new, |f| g.value(f).data().to_vec());
        FrameSequence::new(self.config.frame, z.frames(), data)
    }

    /// Samples `s0` and `burn_in + T` innovations from N(0, I) (then `a` and
    /// `m` when not given) and keeps the last `T` frames.
    pub fn synthesize(
        &self,
        rng: &mut SeededRng,
        frames: usize,
        burn_in: usize,
        a: Option<&Tensor>,
        m: Option<&Tensor>,
    ) -> Result<FrameSequence> {
        let dims = self.latent_dims();
        let mut z = LatentTrajectory::sample_prior(
            LatentDims {
                d_appearance: if a.is_some() { 0 } else { dims.d_appearance },
                d_motion: if m.is_some() { 0 } else { dims.d_motion },
                ..dims
            },
            burn_in + frames,
            rng,
        );
        if let Some(a) = a {
            z.a = Some(a.clone());
        }
        if let Some(m) = m {
            z.m = Some(m.clone());
        }
        self.synthesize_from(&z, burn_in)
    }

    /// Rolls `z` forward and drops the first `burn_in` frames.
    pub fn synthesize_from(&self, z: &LatentTrajectory, burn_in: usize) -> Result<FrameSequence> {
        let full = self.rollout(z)?;
        if burn_in > full.frames() {
            return Err(Error::dim(
                "synthesize",
                "burn-in longer than the trajectory",
            ));
        }
        Ok(full.slice(burn_in, full.frames()))
    }
}
