use crate::diffcore::{SeededRng, Tensor};
use crate::error::{Error, Result};

/// Per-sequence latent variables: initial state, innovations, and optional
/// appearance and motion vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTrajectory {
    pub s0: Tensor,
    /// `[T, d_noise]`, row `t - 1` drives the transition into `s_t`.
    pub xi: Tensor,
    pub a: Option<Tensor>,
    pub m: Option<Tensor>,
}

/// Which latent blocks exist and how large they are.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentDims {
    pub d: usize,
    pub d_noise: usize,
    pub d_appearance: usize,
    pub d_motion: usize,
}

impl LatentTrajectory {
    pub fn zeros(dims: LatentDims, frames: usize) -> Self {
        let opt = |n: usize| (n > 0).then(|| Tensor::zeros(&[n]));
        LatentTrajectory {
            s0: Tensor::zeros(&[dims.d]),
            xi: Tensor::zeros(&[frames, dims.d_noise]),
            a: opt(dims.d_appearance),
            m: opt(dims.d_motion),
        }
    }

    /// Draws every block from N(0, I) in the order s0, xi, a, m.
    pub fn sample_prior(dims: LatentDims, frames: usize, rng: &mut SeededRng) -> Self {
        let mut z = Self::zeros(dims, frames);
        for block in z.blocks_mut() {
            rng.fill_normal(block.data_mut());
        }
        z
    }

    pub fn frames(&self) -> usize {
        self.xi.shape()[0]
    }

    pub fn dims(&self) -> LatentDims {
        LatentDims {
            d: self.s0.len(),
            d_noise: self.xi.shape()[1],
            d_appearance: self.a.as_ref().map_or(0, Tensor::len),
            d_motion: self.m.as_ref().map_or(0, Tensor::len),
        }
    }

    /// Blocks in canonical order s0, xi, a, m (absent blocks skipped).
    pub fn blocks(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.s0, &self.xi];
        v.extend(self.a.as_ref());
        v.extend(self.m.as_ref());
        v
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.s0, &mut self.xi];
        v.extend(self.a.as_mut());
        v.extend(self.m.as_mut());
        v
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for b in self.blocks() {
            out.extend_from_slice(b.data());
        }
        out
    }

    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_scalars() {
            return Err(Error::dim(
                "latents",
                format!(
                    "expected {} values, got {}",
                    self.num_scalars(),
                    values.len()
                ),
            ));
        }
        let mut offset = 0;
        for b in self.blocks_mut() {
            let n = b.len();
            b.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.all_finite())
    }

    /// Innovations for frames `start..end` as a `[end - start, d_noise]` tensor.
    pub fn xi_window(&self, start: usize, end: usize) -> Tensor {
        let dn = self.xi.shape()[1];
        Tensor::new(
            &[end - start, dn],
            self.xi.data()[start * dn..end * dn].to_vec(),
        )
        .expect("window within bounds")
    }

    pub fn set_xi_window(&mut self, start: usize, values: &Tensor) {
        let dn = self.xi.shape()[1];
        let n = values.len();
        self.xi.data_mut()[start * dn..start * dn + n].copy_from_slice(values.data());
    }

    pub fn check_dims(&self, dims: LatentDims, frames: usize) -> Result<()> {
        if self.dims() != dims || self.frames() != frames {
            return Err(Error::dim(
                "latents",
                format!(
                    "latents have {:?} over {} frames, expected {:?} over {}",
                    self.dims(),
                    self.frames(),
                    dims,
                    frames
                ),
            ));
        }
        Ok(())
    }
}
