use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::time::Instant;

use rayon::prelude::*;

use super::adam::Adam;
use super::dataset::{Dataset, Sequence};
use crate::data::{FrameSequence, PixelError};
use crate::diffcore::{Gradients, SeededRng, Tensor};
use crate::error::{Error, Result};
use crate::inference::{langevin_run, Evaluation, LangevinConfig, Objective, StateSource, Want};
use crate::model::{LatentTrajectory, Model, ModelConfig};

/// Which latent blocks a training run infers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// `s0` and `xi` only.
    Plain,
    /// Adds one appearance vector per sequence.
    Appearance,
    /// Appearance plus one motion vector per sequence.
    AppearanceMotion,
    /// `s0` and `a` come from encoding frame 0; only `xi` is inferred and
    /// frames `1..T` are modeled.
    Conditional,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "plain" => Variant::Plain,
            "appearance" => Variant::Appearance,
            "appearance+motion" => Variant::AppearanceMotion,
            "conditional" => Variant::Conditional,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::Appearance => "appearance",
            Variant::AppearanceMotion => "appearance+motion",
            Variant::Conditional => "conditional",
        }
    }

    /// Checks that the model has exactly the blocks this variant uses.
    pub fn check(self, cfg: &ModelConfig) -> Result<()> {
        let (da, dm, enc) = (cfg.d_appearance, cfg.d_motion, cfg.encoder.is_some());
        let ok = match self {
            Variant::Plain => da == 0 && dm == 0,
            Variant::Appearance => da > 0 && dm == 0,
            Variant::AppearanceMotion => da > 0 && dm > 0,
            Variant::Conditional => enc && dm == 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "variant {} does not fit a model with d_appearance={}, d_motion={}, encoder={}",
                self.name(),
                da,
                dm,
                enc
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub langevin: LangevinConfig,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub chunk_length: usize,
    pub seed: u64,
    /// Checkpoint period in iterations; 0 disables checkpoints.
    pub checkpoint_every: usize,
    /// Fill the wallclock column of the metrics.
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            langevin: LangevinConfig::default(),
            learning_rate: 0.002,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            chunk_length: 30,
            seed: 0,
            checkpoint_every: 0,
            timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.iterations == 0 {
            return bad("at least one training iteration is required");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning rate must be finite and non-negative");
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return bad("Adam betas must lie in [0, 1)");
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("Adam epsilon must be positive");
        }
        if self.chunk_length == 0 {
            return bad("chunk length must be at least 1");
        }
        self.langevin.validate()
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    /// 1-based iteration number.
    pub iter: usize,
    /// Sum over sequences and chunks of the log joint at the inferred latents.
    pub log_joint: f64,
    /// Mean absolute error on the [0, 255] scale over visible pixels.
    pub recon_err_visible: Option<f64>,
    /// Same over occluded pixels, against attached ground truth.
    pub recon_err_occluded: Option<f64>,
    pub wallclock_ms: Option<f64>,
}

pub const METRICS_HEADER: &str = "iter,log_joint,recon_err_visible,recon_err_occluded,wallclock_ms";

/// Metrics as CSV text with [`METRICS_HEADER`].
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.iter,
            r.log_joint,
            opt(r.recon_err_visible),
            opt(r.recon_err_occluded),
            opt(r.wallclock_ms)
        ));
    }
    out
}

/// Totals from the learning phase of one chunk.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ChunkReport {
    pub log_joint: f64,
    pub visible: PixelError,
    pub occluded: PixelError,
}

const INIT_STREAM: u64 = 1;
const INFER_STREAM: u64 = 2;

/// State of an alternating inference/learning run.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: Model,
    data: Dataset,
    cfg: TrainConfig,
    variant: Variant,
    adam: Adam,
    latents: Vec<LatentTrajectory>,
    // state at the end of each sequence's latest learned chunk
    carried: Vec<Option<Tensor>>,
    iteration: usize,
    metrics: Vec<MetricsRow>,
    started: Option<Instant>,
}

impl Trainer {
    pub fn new(model: Model, data: Dataset, cfg: TrainConfig, variant: Variant) -> Result<Self> {
        cfg.validate()?;
        variant.check(model.config())?;
        if data.shape() != model.config().frame {
            return Err(Error::Data(format!(
                "frames are {}, model emits {}",
                data.shape(),
                model.config().frame
            )));
        }
        let conditional = variant == Variant::Conditional;
        for (i, s) in data.sequences().iter().enumerate() {
            if conditional && (s.len() < 2 || !s.frame_visible(0)) {
                return Err(Error::Data(format!(
                    "sequence {i}: the conditional variant needs two or more frames with frame 0 fully visible"
                )));
            }
        }
        let dims = model.latent_dims();
        let base = SeededRng::with_stream(cfg.seed, INIT_STREAM);
        let latents = data
            .sequences()
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rng = base.fork(i as u64);
                if conditional {
                    let mut z = LatentTrajectory::zeros(dims, s.len() - 1);
                    rng.fill_normal(z.xi.data_mut());
                    z
                } else {
                    LatentTrajectory::sample_prior(dims, s.len(), &mut rng)
                }
            })
            .collect();
        let adam = Adam::new(
            model.params(),
            cfg.learning_rate,
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_eps,
        );
        Ok(Trainer {
            carried: vec![None; data.len()],
            model,
            data,
            cfg,
            variant,
            adam,
            latents,
            iteration: 0,
            metrics: Vec::new(),
            started: None,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    /// Warm-start latents per sequence. In the conditional variant only `xi`
    /// is meaningful.
    pub fn latents(&self) -> &[LatentTrajectory] {
        &self.latents
    }

    /// Replaces the warm-start latents, e.g. with ones saved by an earlier run.
    pub fn set_latents(&mut self, latents: Vec<LatentTrajectory>) -> Result<()> {
        if latents.len() != self.latents.len() {
            return Err(Error::Data(format!(
                "{} latent trajectories for {} sequences",
                latents.len(),
                self.latents.len()
            )));
        }
        let dims = self.model.latent_dims();
        for (new, old) in latents.iter().zip(&self.latents) {
            new.check_dims(dims, old.frames())?;
        }
        self.latents = latents;
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn set_carried(&mut self, i: usize, state: Tensor) {
        self.carried[i] = Some(state);
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    /// Completed iterations.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Frame offset of the first modeled frame.
    fn offset(&self) -> usize {
        usize::from(self.variant == Variant::Conditional)
    }

    /// Frames of sequence `i` covered by its innovations.
    fn modeled(&self, i: usize) -> usize {
        self.latents[i].frames()
    }

    /// Innovation rows `[start, end)` of chunk `c` of sequence `i`, if it exists.
    pub fn chunk_bounds(&self, i: usize, c: usize) -> Option<(usize, usize)> {
        let start = c.checked_mul(self.cfg.chunk_length)?;
        let n = self.modeled(i);
        (start < n).then(|| (start, (start + self.cfg.chunk_length).min(n)))
    }

    /// Largest chunk count over the sequences.
    pub fn num_chunks(&self) -> usize {
        (0..self.data.len())
            .map(|i| self.modeled(i).div_ceil(self.cfg.chunk_length))
            .max()
            .unwrap_or(0)
    }

    fn objective(&self, i: usize, c: usize) -> Result<Objective<'_>> {
        let (s, e) = self.chunk_bounds(i, c).expect("chunk exists");
        let seq = &self.data.sequences()[i];
        let off = self.offset();
        let carried = || {
            self.carried[i].as_ref().ok_or_else(|| {
                Error::State(format!("chunk {c} of sequence {i} has no carried state"))
            })
        };
        let state = match (self.variant == Variant::Conditional, c) {
            (false, 0) => StateSource::Latent,
            (false, _) => StateSource::Fixed(carried()?),
            (true, 0) => StateSource::Encoded(seq.frames().frame(0)),
            (true, _) => StateSource::FixedEncoded(carried()?, seq.frames().frame(0)),
        };
        Ok(Objective {
            model: &self.model,
            target: seq.frames().window(off + s, off + e),
            mask: seq.mask().map(|m| m.window(off + s, off + e)),
            sigma: self.cfg.langevin.sigma,
            state,
        })
    }

    fn chunk_latents(&self, i: usize, c: usize) -> LatentTrajectory {
        let (s, e) = self.chunk_bounds(i, c).expect("chunk exists");
        let z = &self.latents[i];
        LatentTrajectory {
            s0: z.s0.clone(),
            xi: z.xi_window(s, e),
            a: z.a.clone(),
            m: z.m.clone(),
        }
    }

    fn active_sequences(&self, c: usize) -> Vec<usize> {
        (0..self.data.len())
            .filter(|&i| self.chunk_bounds(i, c).is_some())
            .collect()
    }

    /// Inference phase for chunk `c`: Langevin dynamics on every sequence's
    /// latents for that chunk, warm-started from the stored values. Parameters
    /// are not touched.
    pub fn infer_chunk(&mut self, c: usize) -> Result<()> {
        let base = SeededRng::with_stream(self.cfg.seed, INFER_STREAM)
            .fork(self.iteration as u64)
            .fork(c as u64);
        let active = self.active_sequences(c);
        let this = &*self;
        let samples: Vec<LatentTrajectory> = active
            .par_iter()
            .map(|&i| {
                let obj = this.objective(i, c)?;
                let z = this.chunk_latents(i, c);
                let mut rng = base.fork(i as u64);
                Ok(langevin_run(&z, &obj, &this.cfg.langevin, &mut rng)?.latents)
            })
            .collect::<Result<_>>()?;
        for (&i, zc) in active.iter().zip(samples) {
            let (s, _) = self.chunk_bounds(i, c).expect("chunk exists");
            let z = &mut self.latents[i];
            if c == 0 {
                z.s0 = zc.s0;
            }
            z.set_xi_window(s, &zc.xi);
            z.a = zc.a;
            z.m = zc.m;
        }
        Ok(())
    }

    /// Learning phase for chunk `c`: parameter gradients of the log joint at
    /// the current latents, summed over sequences in index order, then one
    /// Adam step. Latents are not touched.
    pub fn learn_chunk(&mut self, c: usize) -> Result<ChunkReport> {
        let grads = self.chunk_gradients(c)?;
        let mut total: Option<Gradients> = None;
        let mut report = ChunkReport::default();
        for (i, eval) in grads {
            if !eval.log_joint.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("log joint of sequence {i} in the learning phase"),
                    iteration: self.iteration,
                });
            }
            report.log_joint += eval.log_joint;
            self.score(i, c, &eval.reconstruction, &mut report);
            let g = eval.param_grads.expect("parameter gradients requested");
            match total.as_mut() {
                Some(t) => t.add_params(&g),
                None => total = Some(g),
            }
            self.carried[i] = Some(eval.final_state);
        }
        if let Some(total) = total {
            self.adam.step(self.model.params_mut(), &total)?;
        }
        Ok(report)
    }

    /// Per-sequence evaluations with parameter gradients for chunk `c`, in
    /// sequence order.
    pub fn chunk_gradients(&self, c: usize) -> Result<Vec<(usize, Evaluation)>> {
        self.active_sequences(c)
            .par_iter()
            .map(|&i| {
                let obj = self.objective(i, c)?;
                let z = self.chunk_latents(i, c);
                Ok((i, obj.evaluate(&z, Want::LatentsAndParams)?))
            })
            .collect()
    }

    fn score(&self, i: usize, c: usize, recon: &[f64], report: &mut ChunkReport) {
        let (s, e) = self.chunk_bounds(i, c).expect("chunk exists");
        let off = self.offset();
        let seq: &Sequence = &self.data.sequences()[i];
        let observed = seq.frames().window(off + s, off + e);
        let mask = seq.mask().map(|m| m.window(off + s, off + e));
        let truth = seq.truth().map(|t| t.window(off + s, off + e));
        for (j, &r) in recon.iter().enumerate() {
            if mask.map_or(true, |m| m[j]) {
                report.visible.add(r, observed[j]);
            } else if let Some(t) = truth {
                report.occluded.add(r, t[j]);
            }
        }
    }

    /// One full iteration over all chunks.
    pub fn step(&mut self) -> Result<&MetricsRow> {
        let started = *self.started.get_or_insert_with(Instant::now);
        let mut total = ChunkReport::default();
        for c in 0..self.num_chunks() {
            self.infer_chunk(c)?;
            let r = self.learn_chunk(c)?;
            total.log_joint += r.log_joint;
            total.visible.merge(r.visible);
            total.occluded.merge(r.occluded);
        }
        self.iteration += 1;
        self.metrics.push(MetricsRow {
            iter: self.iteration,
            log_joint: total.log_joint,
            recon_err_visible: total.visible.mean(),
            recon_err_occluded: total.occluded.mean(),
            wallclock_ms: self
                .cfg
                .timing
                .then(|| started.elapsed().as_secs_f64() * 1e3),
        });
        Ok(self.metrics.last().expect("just pushed"))
    }

    /// Runs the remaining iterations.
    pub fn run(&mut self) -> Result<()> {
        self.run_with(|_| Ok(()))
    }

    /// Runs the remaining iterations, calling `after_step` after each one.
    pub fn run_with(&mut self, mut after_step: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        while self.iteration < self.cfg.iterations {
            self.step()?;
            after_step(self)?;
        }
        Ok(())
    }

    /// Hash of every parameter value's bits.
    pub fn param_checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for v in self.model.params().flatten() {
            h.write_u64(v.to_bits());
        }
        h.finish()
    }

    /// Hash of every latent value's bits.
    pub fn latent_checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for z in &self.latents {
            for v in z.flatten() {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    /// Latents with `s0` and `a` filled from the encoder in the conditional
    /// variant; the stored latents otherwise.
    pub fn resolved_latents(&self) -> Result<Vec<LatentTrajectory>> {
        if self.variant != Variant::Conditional {
            return Ok(self.latents.clone());
        }
        self.latents
            .iter()
            .zip(self.data.sequences())
            .map(|(z, s)| {
                let (s0, a) = self.model.encode(s.frames().frame(0))?;
                Ok(LatentTrajectory {
                    s0,
                    xi: z.xi.clone(),
                    a,
                    m: None,
                })
            })
            .collect()
    }

    /// Model output for every sequence at the current latents, rolled out
    /// without chunk boundaries. In the conditional variant frame 0 is the
    /// observed first frame.
    pub fn reconstructions(&self) -> Result<Vec<FrameSequence>> {
        let resolved = self.resolved_latents()?;
        resolved
            .iter()
            .zip(self.data.sequences())
            .map(|(z, s)| {
                let out = self.model.rollout(z)?;
                if self.variant != Variant::Conditional {
                    return Ok(out);
                }
                let mut data = s.frames().frame(0).to_vec();
                data.extend_from_slice(out.data());
                FrameSequence::new(out.shape(), out.frames() + 1, data)
            })
            .collect()
    }
}
