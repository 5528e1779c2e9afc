use crate::diffcore::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{LatentTrajectory, Model};

/// Where the initial state (and, for the encoded variants, the appearance vector) of a
/// window comes from.
#[derive(Clone, Copy, Debug)]
pub enum StateSource<'a> {
    /// `s0` is a latent with an N(0, I) prior.
    Latent,
    /// `s0` is a constant, e.g. the state carried over a chunk boundary.
    Fixed(&'a Tensor),
    /// `s0` and `a` are produced by the encoder from this frame; neither is
    /// latent and neither carries a prior term.
    Encoded(&'a [f64]),
    /// Constant `s0` (a carried chunk-boundary state) with `a` produced by
    /// the encoder from the given frame.
    FixedEncoded(&'a Tensor, &'a [f64]),
}

/// Complete-data log-likelihood of one window of one sequence:
/// `-(1/(2 sigma^2)) sum mask*(x - G(s_t))^2 - 0.5 (|xi|^2 + |s0|^2 + |a|^2 + |m|^2)`,
/// where the `s0` and `a` terms are present only when those blocks are latent.
#[derive(Clone, Copy, Debug)]
pub struct Objective<'a> {
    pub model: &'a Model,
    /// `T * D` observed values for the frames driven by `xi`.
    pub target: &'a [f64],
    pub mask: Option<&'a [bool]>,
    pub sigma: f64,
    pub state: StateSource<'a>,
}

/// Latent blocks that Langevin dynamics moves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActiveBlocks {
    pub s0: bool,
    pub a: bool,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub log_joint: f64,
    /// Gradient of the log joint with respect to each latent block; blocks
    /// that are not latent get zeros.
    pub latent_grads: Option<LatentTrajectory>,
    pub param_grads: Option<Gradients>,
    /// Reconstruction `G(s_t)` for every frame of the window, `T * D` values.
    pub reconstruction: Vec<f64>,
    /// `s_T`, or the initial state when the window is empty.
    pub final_state: Tensor,
}

/// What a call to [`Objective::evaluate`] should differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Want {
    Value,
    Latents,
    LatentsAndParams,
}

impl Objective<'_> {
    pub fn active(&self) -> ActiveBlocks {
        ActiveBlocks {
            s0: matches!(self.state, StateSource::Latent),
            a: matches!(self.state, StateSource::Latent | StateSource::Fixed(_))
                && self.model.config().d_appearance > 0,
        }
    }

    fn check(&self, z: &LatentTrajectory) -> Result<()> {
        let dims = self.model.latent_dims();
        let d = self.model.config().frame_len();
        z.check_dims(dims, z.frames())?;
        if self.target.len() != z.frames() * d {
            return Err(Error::dim(
                "log_joint",
                format!(
                    "{} innovation rows need {} observed values, got {}",
                    z.frames(),
                    z.frames() * d,
                    self.target.len()
                ),
            ));
        }
        if self.mask.is_some_and(|m| m.len() != self.target.len()) {
            return Err(Error::dim(
                "log_joint",
                "mask and observations differ in length",
            ));
        }
        if let StateSource::Fixed(s) | StateSource::FixedEncoded(s, _) = self.state {
            if s.shape() != [dims.d] {
                return Err(Error::dim(
                    "log_joint",
                    format!("fixed state {:?}", s.shape()),
                ));
            }
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    pub fn evaluate(&self, z: &LatentTrajectory, want: Want) -> Result<Evaluation> {
        self.check(z)?;
        let model = self.model;
        let mut g = if want == Want::LatentsAndParams {
            Graph::new(model.params())
        } else {
            Graph::without_param_grads(model.params())
        };
        let active = self.active();
        let xi = g.input(z.xi.clone());
        let (s0, a) = match self.state {
            StateSource::Latent => (g.input(z.s0.clone()), None),
            StateSource::Fixed(s) => (g.constant(s.clone()), None),
            StateSource::Encoded(x0) => {
                let x = g.constant(Tensor::vector(x0.to_vec()));
                let (s0, a) = model.encode_graph(&mut g, x)?;
                (s0, Some(a))
            }
            StateSource::FixedEncoded(s, x0) => {
                let x = g.constant(Tensor::vector(x0.to_vec()));
                let (_, a) = model.encode_graph(&mut g, x)?;
                (g.constant(s.clone()), Some(a))
            }
        };
        let a: Option<Var> = match a {
            Some(a) => a,
            None => z.a.as_ref().map(|a| g.input(a.clone())),
        };
        let m = z.m.as_ref().map(|m| g.input(m.clone()));

        let states = model.unroll_graph(&mut g, s0, xi, m)?;
        let final_state = g.value(*states.last().unwrap_or(&s0)).clone();
        let mut terms: Vec<Var> = Vec::new();
        let mut reconstruction = Vec::new();
        if !states.is_empty() {
            let stacked = g.stack(&states)?;
            let frames = model.emit_graph(&mut g, stacked, a)?;
            reconstruction = g.value(frames).data().to_vec();
            let sse = g.masked_sse(frames, self.target, self.mask)?;
            terms.push(g.scale(sse, -0.5 / (self.sigma * self.sigma)));
        }
        let mut prior = vec![xi];
        if active.s0 {
            prior.push(s0);
        }
        if active.a {
            prior.extend(a);
        }
        prior.extend(m);
        for p in prior {
            let sq = g.sum_squares(p);
            terms.push(g.scale(sq, -0.5));
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t)?;
        }
        let log_joint = g.value(total).data()[0];
        let mut eval = Evaluation {
            log_joint,
            latent_grads: None,
            param_grads: None,
            reconstruction,
            final_state,
        };
        if want == Want::Value {
            return Ok(eval);
        }
        let mut grads = g.backward(total)?;
        let mut take = |v: Var, like: &Tensor| {
            grads
                .take_wrt(v)
                .unwrap_or_else(|| Tensor::zeros(like.shape()))
        };
        let lg = LatentTrajectory {
            s0: if active.s0 {
                take(s0, &z.s0)
            } else {
                Tensor::zeros(z.s0.shape())
            },
            xi: take(xi, &z.xi),
            a: z.a.as_ref().map(|za| match (active.a, a) {
                (true, Some(av)) => take(av, za),
                _ => Tensor::zeros(za.shape()),
            }),
            m: z.m.as_ref().map(|zm| take(m.unwrap(), zm)),
        };
        eval.latent_grads = Some(lg);
        if want == Want::LatentsAndParams {
            eval.param_grads = Some(grads);
        }
        Ok(eval)
    }
}
