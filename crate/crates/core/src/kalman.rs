//! Kalman–Bucy filter with correlated signal and observation noise.
//!
//! For `dX = F X dt + G dV + Ḡ dW`, `dY = H X dt + K dW` with `H = K H₂`:
//!
//! ```text
//! L  = (P Hᵀ + Ḡ Kᵀ)(K Kᵀ)⁻¹
//! dm = F m dt + L (dY − H m dt)
//! dP = [F P + P Fᵀ + G Gᵀ + Ḡ Ḡᵀ − L (K Kᵀ) Lᵀ] dt
//! ```
//!
//! The covariance ODE is integrated with classical RK4, the mean with an
//! Euler step driven by the observed increments.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::LinearGaussian;
use crate::sde::{ObservationPath, Series};

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanPath {
    pub mean: Series,
    pub cov: Vec<Matrix>,
}

struct Parts {
    f: Matrix,
    h: Matrix,
    q: Matrix,
    cross: Matrix,
    r: Matrix,
    r_inv: Matrix,
}

impl Parts {
    fn gain(&self, p: &Matrix) -> Matrix {
        p.matmul(&self.h.transpose()).add(&self.cross).matmul(&self.r_inv)
    }

    fn riccati(&self, p: &Matrix) -> Matrix {
        let l = self.gain(p);
        self.f
            .matmul(p)
            .add(&p.matmul(&self.f.transpose()))
            .add(&self.q)
            .sub(&l.matmul(&self.r).matmul(&l.transpose()))
    }
}

pub fn kalman_bucy(model: &LinearGaussian, obs: &ObservationPath) -> Result<KalmanPath> {
    let h = model.k.matmul(&model.h2);
    let r = model.k.matmul(&model.k.transpose());
    let r_inv = r
        .inverse()
        .ok_or_else(|| Error::Unsupported("Kalman–Bucy reference needs k kᵀ invertible".into()))?;
    let parts = Parts {
        f: model.drift.clone(),
        q: model
            .g
            .matmul(&model.g.transpose())
            .add(&model.g_bar.matmul(&model.g_bar.transpose())),
        cross: model.g_bar.matmul(&model.k.transpose()),
        h,
        r,
        r_inv,
    };
    let d = model.mean0.len();
    if obs.d_obs() != parts.h.rows() {
        return Err(Error::DimensionMismatch("observation path does not match the model".into()));
    }
    let grid = obs.grid;
    let dt = grid.dt;
    let mut mean = Series::zeros(grid.n_steps + 1, d);
    mean.row_mut(0).copy_from_slice(&model.mean0);
    let mut cov = Vec::with_capacity(grid.n_steps + 1);
    cov.push(model.cov0.clone());
    let mut m = model.mean0.clone();
    let mut p = model.cov0.clone();
    for n in 0..grid.n_steps {
        let l = parts.gain(&p);
        let dy: Vec<f64> = obs.at(n + 1).iter().zip(obs.at(n)).map(|(a, b)| a - b).collect();
        let hm = parts.h.matvec(&m);
        let innov: Vec<f64> = dy.iter().zip(&hm).map(|(a, b)| a - b * dt).collect();
        let fm = parts.f.matvec(&m);
        let li = l.matvec(&innov);
        for i in 0..d {
            m[i] += fm[i] * dt + li[i];
        }

        let k1 = parts.riccati(&p);
        let k2 = parts.riccati(&p.add(&k1.scale(0.5 * dt)));
        let k3 = parts.riccati(&p.add(&k2.scale(0.5 * dt)));
        let k4 = parts.riccati(&p.add(&k3.scale(dt)));
        p = p.add(&k1.add(&k2.scale(2.0)).add(&k3.scale(2.0)).add(&k4).scale(dt / 6.0));

        mean.row_mut(n + 1).copy_from_slice(&m);
        cov.push(p.clone());
    }
    Ok(KalmanPath { mean, cov })
}
