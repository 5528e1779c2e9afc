//! Classical dynamic-texture baseline: PCA of the frames followed by a
//! first-order autoregression on the projected states.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::{FrameSequence, FrameShape};
use crate::diffcore::SeededRng;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct LdsModel {
    pub shape: FrameShape,
    pub mean: DVector<f64>,
    /// `D x d`, orthonormal columns.
    pub c: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub innovation_cov: DMatrix<f64>,
    /// Projected training states, `d x T`.
    pub states: DMatrix<f64>,
    /// AR(1) residuals `s_{t+1} - A s_t`, `d x (T - 1)`.
    pub residuals: DMatrix<f64>,
    /// All singular values of the centered frame matrix, descending.
    pub singular_values: Vec<f64>,
}

fn frame_matrix(x: &FrameSequence) -> DMatrix<f64> {
    let dim = x.shape().len();
    DMatrix::from_fn(dim, x.frames(), |i, t| x.frame(t)[i])
}

pub fn lds_fit(x: &FrameSequence, d: usize) -> Result<LdsModel> {
    let (dim, t_len) = (x.shape().len(), x.frames());
    if t_len <= d {
        return Err(Error::Rank(format!(
            "{t_len} frames cannot support a {d}-dimensional state"
        )));
    }
    if d > dim {
        return Err(Error::Rank(format!(
            "{dim} values per frame cannot support a {d}-dimensional state"
        )));
    }
    let y = frame_matrix(x);
    let mean = y.column_mean();
    let mut centered = y;
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let svd = centered.clone().svd(true, false);
    let u = svd.u.expect("left vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let singular_values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let c = DMatrix::from_fn(dim, d, |r, k| u[(r, order[k])]);
    let states = c.transpose() * &centered;

    let s1 = states.columns(0, t_len - 1).into_owned();
    let s2 = states.columns(1, t_len - 1).into_owned();
    let scale = singular_values.first().copied().unwrap_or(0.0);
    let a = if scale <= 1e-12 {
        log::warn!("frames are constant; the autoregression is degenerate and A is set to zero");
        DMatrix::zeros(d, d)
    } else {
        let pinv = s1
            .clone()
            .pseudo_inverse(1e-12 * scale)
            .map_err(|e| Error::Numerical(format!("AR(1) fit: {e}")))?;
        &s2 * pinv
    };
    let residuals = &s2 - &a * &s1;
    let innovation_cov = &residuals * residuals.transpose() / (t_len - 1) as f64;
    Ok(LdsModel {
        shape: x.shape(),
        mean,
        c,
        a,
        innovation_cov,
        states,
        residuals,
        singular_values,
    })
}

impl LdsModel {
    pub fn d(&self) -> usize {
        self.a.nrows()
    }

    fn emit(&self, s: &DVector<f64>) -> Vec<f64> {
        (&self.c * s + &self.mean).iter().copied().collect()
    }

    /// Frames rebuilt from the projected training states (`C C^T` applied to
    /// the centered frames, plus the mean).
    pub fn reconstruction(&self) -> FrameSequence {
        let mut data = Vec::with_capacity(self.states.ncols() * self.shape.len());
        for col in self.states.column_iter() {
            data.extend(self.emit(&col.into_owned()));
        }
        FrameSequence::new(self.shape, self.states.ncols(), data).expect("sizes agree")
    }

    /// Runs the AR(1) recursion from `first` with the given innovations
    /// (`d x (T - 1)`) and emits every state.
    pub fn rollout(&self, first: &DVector<f64>, innovations: &DMatrix<f64>) -> FrameSequence {
        let mut s = first.clone();
        let mut data = self.emit(&s);
        for v in innovations.column_iter() {
            s = &self.a * s + v;
            data.extend(self.emit(&s));
        }
        FrameSequence::new(self.shape, innovations.ncols() + 1, data).expect("sizes agree")
    }

    /// Symmetric square root of the innovation covariance, negative
    /// eigenvalues clamped to zero.
    pub fn innovation_sqrt(&self) -> DMatrix<f64> {
        let eig = SymmetricEigen::new(self.innovation_cov.clone());
        let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
    }
}

/// Samples `T` frames starting from the zero state: `s_t = A s_{t-1} + Q^{1/2} z_t`.
pub fn lds_synthesize(model: &LdsModel, frames: usize, rng: &mut SeededRng) -> FrameSequence {
    let d = model.d();
    let root = model.innovation_sqrt();
    let mut s = DVector::zeros(d);
    let mut data = Vec::with_capacity(frames * model.shape.len());
    for _ in 0..frames {
        let z = DVector::from_fn(d, |_, _| rng.normal());
        s = &model.a * s + &root * z;
        data.extend(model.emit(&s));
    }
    FrameSequence::new(model.shape, frames, data).expect("sizes agree")
}
