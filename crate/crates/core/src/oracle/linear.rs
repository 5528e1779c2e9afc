//! Exact posterior for the linear-Gaussian special case.

use nalgebra::{DMatrix, DVector};

use crate::data::{FrameSequence, FrameShape};
use crate::diffcore::{SeededRng, Tensor};
use crate::error::{Error, Result};
use crate::model::{LatentTrajectory, Model};

/// `s_t = A s_{t-1} + B xi_t`, `x_t = C s_t + sigma e_t`, with `s0`, `xi_t`,
/// `e_t` all standard normal.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSSM {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub sigma: f64,
}

/// Gaussian posterior over `(s0, xi_1..T)`.
#[derive(Clone, Debug)]
pub struct LatentPosterior {
    pub mean: LatentTrajectory,
    pub cov_s0: DMatrix<f64>,
    /// Marginal covariance of each `xi_t`.
    pub cov_xi: Vec<DMatrix<f64>>,
}

impl LatentPosterior {
    /// Marginal variances in the flattened order s0, xi_1, ..., xi_T.
    pub fn variances(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.cov_s0.diagonal().iter().copied().collect();
        for c in &self.cov_xi {
            v.extend(c.diagonal().iter());
        }
        v
    }
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor {
    let mut data = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        data.extend(m.row(i).iter());
    }
    Tensor::new(&[m.nrows(), m.ncols()], data).expect("matrix shape")
}

fn random_orthonormal(rows: usize, cols: usize, rng: &mut SeededRng) -> DMatrix<f64> {
    if rows >= cols {
        DMatrix::from_fn(rows, cols, |_, _| rng.normal()).qr().q()
    } else {
        DMatrix::from_fn(cols, rows, |_, _| rng.normal())
            .qr()
            .q()
            .transpose()
    }
}

impl LinearSSM {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, sigma: f64) -> Result<Self> {
        let d = a.nrows();
        if a.ncols() != d || b.nrows() != d || c.ncols() != d {
            return Err(Error::dim(
                "linear model",
                format!("A {:?}, B {:?}, C {:?}", a.shape(), b.shape(), c.shape()),
            ));
        }
        let finite = a
            .iter()
            .chain(b.iter())
            .chain(c.iter())
            .all(|v| v.is_finite());
        if !finite || !(sigma > 0.0) {
            return Err(Error::InvalidConfig(
                "linear model needs finite entries and sigma > 0".into(),
            ));
        }
        Ok(LinearSSM { a, b, c, sigma })
    }

    /// Random model whose `A` has spectral norm `radius`.
    pub fn random_stable(
        d: usize,
        d_noise: usize,
        obs: usize,
        sigma: f64,
        radius: f64,
        rng: &mut SeededRng,
    ) -> Self {
        let mut draw = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.normal());
        let a = draw(d, d);
        let b = draw(d, d_noise).scale(0.5);
        let c = draw(obs, d).scale(1.0 / (d as f64).sqrt());
        let norm = a.clone().svd(false, false).singular_values.max();
        let a = if norm > 0.0 {
            a.scale(radius / norm)
        } else {
            a
        };
        LinearSSM { a, b, c, sigma }
    }

    /// Random model with orthonormal `B` and `C` (columns or rows, whichever
    /// is shorter) scaled by `gain`, and `A` of spectral norm `radius`. Every
    /// latent direction the observations see is then informed at a rate set
    /// by `gain / sigma`.
    pub fn random_conditioned(
        d: usize,
        d_noise: usize,
        obs: usize,
        sigma: f64,
        radius: f64,
        gain: f64,
        rng: &mut SeededRng,
    ) -> Self {
        let a = DMatrix::from_fn(d, d, |_, _| rng.normal());
        let norm = a.clone().svd(false, false).singular_values.max();
        let a = if norm > 0.0 {
            a.scale(radius / norm)
        } else {
            a
        };
        let b = random_orthonormal(d, d_noise, rng);
        let c = random_orthonormal(obs, d, rng).scale(gain);
        LinearSSM { a, b, c, sigma }
    }

    pub fn d(&self) -> usize {
        self.a.nrows()
    }

    pub fn d_noise(&self) -> usize {
        self.b.ncols()
    }

    pub fn obs_dim(&self) -> usize {
        self.c.nrows()
    }

    /// Equivalent linear-mode dynamic generator emitting `1 x D x 1` frames.
    pub fn to_model(&self) -> Result<Model> {
        Model::linear(
            &to_tensor(&self.a),
            &to_tensor(&self.b),
            &to_tensor(&self.c),
            FrameShape::new(1, self.obs_dim(), 1),
        )
    }

    /// Draws latents from the prior and noisy observations of `T` frames.
    pub fn sample(&self, frames: usize, rng: &mut SeededRng) -> (LatentTrajectory, FrameSequence) {
        let (d, dn, obs) = (self.d(), self.d_noise(), self.obs_dim());
        let z = LatentTrajectory::sample_prior(
            crate::model::LatentDims {
                d,
                d_noise: dn,
                d_appearance: 0,
                d_motion: 0,
            },
            frames,
            rng,
        );
        let mut s = DVector::from_column_slice(z.s0.data());
        let mut data = Vec::with_capacity(frames * obs);
        for t in 0..frames {
            s = &self.a * s + &self.b * DVector::from_column_slice(z.xi.row(t));
            let x = &self.c * &s;
            data.extend(x.iter().map(|v| v + self.sigma * rng.normal()));
        }
        let seq =
            FrameSequence::new(FrameShape::new(1, obs, 1), frames, data).expect("sizes agree");
        (z, seq)
    }

    fn check_obs(&self, x: &FrameSequence) -> Result<()> {
        if x.shape().len() != self.obs_dim() {
            return Err(Error::dim(
                "kalman_smoother",
                format!(
                    "frames have {} values, C has {} rows",
                    x.shape().len(),
                    self.obs_dim()
                ),
            ));
        }
        if x.frames() == 0 {
            return Err(Error::Data("smoothing needs at least one frame".into()));
        }
        Ok(())
    }
}

/// Forward filter plus Rauch–Tung–Striebel smoother on the augmented state
/// `w_t = [s_t; xi_t]` with `w_t = F w_{t-1} + G e_t`, `F = [[A, 0], [0, 0]]`,
/// `G = [B; I]`, observed through `[C, 0]`. The `xi` half of `w_0` is a dummy
/// standard normal that never touches the observations.
pub fn kalman_smoother(model: &LinearSSM, x: &FrameSequence) -> Result<LatentPosterior> {
    model.check_obs(x)?;
    let (d, dn, obs) = (model.d(), model.d_noise(), model.obs_dim());
    let n = d + dn;
    let t_len = x.frames();

    let mut f = DMatrix::zeros(n, n);
    f.view_mut((0, 0), (d, d)).copy_from(&model.a);
    let mut g = DMatrix::zeros(n, dn);
    g.view_mut((0, 0), (d, dn)).copy_from(&model.b);
    g.view_mut((d, 0), (dn, dn)).fill_with_identity();
    let q = &g * g.transpose();
    let mut h = DMatrix::zeros(obs, n);
    h.view_mut((0, 0), (obs, d)).copy_from(&model.c);
    let r = DMatrix::identity(obs, obs) * (model.sigma * model.sigma);

    // filtered (index 0 = prior on w_0) and one-step predicted moments
    let mut m_f = vec![DVector::zeros(n)];
    let mut p_f = vec![DMatrix::identity(n, n)];
    let mut m_p = Vec::with_capacity(t_len);
    let mut p_p = Vec::with_capacity(t_len);
    for t in 1..=t_len {
        let mp = &f * &m_f[t - 1];
        let pp = &f * &p_f[t - 1] * f.transpose() + &q;
        let s = &h * &pp * h.transpose() + &r;
        let chol = s.clone().cholesky().ok_or_else(|| {
            Error::Numerical(format!(
                "innovation covariance at step {t} is not positive definite"
            ))
        })?;
        let k = (chol.solve(&(&h * &pp))).transpose();
        let y = DVector::from_column_slice(x.frame(t - 1));
        let innov = y - &h * &mp;
        let mf = &mp + &k * innov;
        let i_kh = DMatrix::identity(n, n) - &k * &h;
        // Joseph form keeps the covariance symmetric
        let pf = &i_kh * &pp * i_kh.transpose() + &k * &r * k.transpose();
        m_p.push(mp);
        p_p.push(pp);
        m_f.push(mf);
        p_f.push(pf);
    }

    let mut m_s = m_f.clone();
    let mut p_s = p_f.clone();
    for t in (0..t_len).rev() {
        let pp = &p_p[t];
        let pinv = pp
            .clone()
            .pseudo_inverse(1e-12 * pp.norm().max(1.0))
            .map_err(|e| {
                Error::Numerical(format!("predicted covariance at step {}: {e}", t + 1))
            })?;
        let j = &p_f[t] * f.transpose() * pinv;
        let dm = &m_s[t + 1] - &m_p[t];
        m_s[t] = &m_f[t] + &j * dm;
        let dp = &p_s[t + 1] - pp;
        p_s[t] = &p_f[t] + &j * dp * j.transpose();
    }

    let mut mean = LatentTrajectory {
        s0: Tensor::vector(m_s[0].rows(0, d).iter().copied().collect()),
        xi: Tensor::zeros(&[t_len, dn]),
        a: None,
        m: None,
    };
    let mut cov_xi = Vec::with_capacity(t_len);
    for t in 1..=t_len {
        let row: Vec<f64> = m_s[t].rows(d, dn).iter().copied().collect();
        mean.xi.data_mut()[(t - 1) * dn..t * dn].copy_from_slice(&row);
        cov_xi.push(p_s[t].view((d, d), (dn, dn)).into_owned());
    }
    Ok(LatentPosterior {
        mean,
        cov_s0: p_s[0].view((0, 0), (d, d)).into_owned(),
        cov_xi,
    })
}

/// Largest latent dimension the dense solve accepts.
pub const DENSE_LATENT_CAP: usize = 60;

/// Stacked linear map from `u = [s0; xi_1; ...; xi_T]` to all observations.
pub fn stacked_design(model: &LinearSSM, frames: usize) -> DMatrix<f64> {
    let (d, dn, obs) = (model.d(), model.d_noise(), model.obs_dim());
    let n = d + frames * dn;
    // ds[t] = d s_t / d u, a d x n matrix
    let mut ds = DMatrix::zeros(d, n);
    ds.view_mut((0, 0), (d, d)).fill_with_identity();
    let mut j = DMatrix::zeros(frames * obs, n);
    for t in 0..frames {
        ds = &model.a * ds;
        let cols = d + t * dn;
        let mut inj = ds.view_mut((0, cols), (d, dn));
        inj += &model.b;
        j.view_mut((t * obs, 0), (obs, n))
            .copy_from(&(&model.c * &ds));
    }
    j
}

/// Posterior from the dense `(d + T d_noise)`-dimensional Gaussian:
/// precision `I + J^T J / sigma^2`, mean `precision^-1 J^T x / sigma^2`.
pub fn dense_posterior(model: &LinearSSM, x: &FrameSequence) -> Result<LatentPosterior> {
    model.check_obs(x)?;
    let (d, dn) = (model.d(), model.d_noise());
    let t_len = x.frames();
    let n = d + t_len * dn;
    if n > DENSE_LATENT_CAP {
        return Err(Error::InvalidConfig(format!(
            "dense posterior limited to {DENSE_LATENT_CAP} latent dimensions, got {n}"
        )));
    }
    let j = stacked_design(model, t_len);
    let s2 = model.sigma * model.sigma;
    let precision = DMatrix::identity(n, n) + j.transpose() * &j / s2;
    let chol = precision
        .cholesky()
        .ok_or_else(|| Error::Numerical("posterior precision is not positive definite".into()))?;
    let y = DVector::from_column_slice(x.data());
    let mean = chol.solve(&(j.transpose() * y / s2));
    let cov = chol.inverse();
    let mut out = LatentPosterior {
        mean: LatentTrajectory {
            s0: Tensor::vector(mean.rows(0, d).iter().copied().collect()),
            xi: Tensor::new(
                &[t_len, dn],
                mean.rows(d, t_len * dn).iter().copied().collect(),
            )?,
            a: None,
            m: None,
        },
        cov_s0: cov.view((0, 0), (d, d)).into_owned(),
        cov_xi: Vec::with_capacity(t_len),
    };
    for t in 0..t_len {
        let o = d + t * dn;
        out.cov_xi.push(cov.view((o, o), (dn, dn)).into_owned());
    }
    Ok(out)
}
