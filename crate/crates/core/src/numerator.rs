//! Low-rank strictly causal numerator.
//!
//! Tokens are projected to a latent `φ_t = Vᵀ x_t ∈ R^{r_f}`. The previous `r` latents form
//! the zero-padded window `Φ_t = [φ_{t-1}, …, φ_{t-r}]`, mixed and gated by the current token:
//!
//! ```text
//! α_t = W_α x_t        γ_t = σ(W_γ x_t)
//! ψ_t = Φ_t α_t        η_t = U (γ_t ⊙ ψ_t)
//! ```
//!
//! which equals `Σ_i B_{t,i} x_{t-i}` with `B_{t,i} = α_{t,i} U Diag(γ_t) Vᵀ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::{dot, Mat};
use crate::pole_bank::sigmoid;
use crate::sequence::TokenSequence;
use crate::tensor_io::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumeratorParams {
    /// `[E, r_f]` up-projection.
    #[serde(rename = "U")]
    pub u: Mat,
    /// `[E, r_f]` down-projection.
    #[serde(rename = "V")]
    pub v: Mat,
    /// `[r, E]`
    #[serde(rename = "W_alpha")]
    pub w_alpha: Mat,
    /// `[r_f, E]`
    #[serde(rename = "W_gamma")]
    pub w_gamma: Mat,
    pub r_f: usize,
}

impl NumeratorParams {
    /// `U`, `V` with N(0, 1/E) entries; silent mixing (`W_α = 0`) and neutral gates.
    pub fn init(channels: usize, order: usize, r_f: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (channels as f64).sqrt();
        Self {
            u: Mat::randn(channels, r_f, std, rng),
            v: Mat::randn(channels, r_f, std, rng),
            w_alpha: Mat::zeros(order, channels),
            w_gamma: Mat::zeros(r_f, channels),
            r_f,
        }
    }

    pub fn order(&self) -> usize {
        self.w_alpha.rows()
    }

    /// Validates shapes; returns a warning when `r_f ≥ E`.
    pub fn validate(&self, channels: usize, order: usize) -> Result<Option<String>> {
        let rf = self.r_f;
        if rf == 0 {
            return Err(Error::Config("r_f must be at least 1".into()));
        }
        for (name, m, want) in [
            ("U", &self.u, (channels, rf)),
            ("V", &self.v, (channels, rf)),
            ("W_alpha", &self.w_alpha, (order, channels)),
            ("W_gamma", &self.w_gamma, (rf, channels)),
        ] {
            if m.shape() != want {
                return Err(Error::ShapeMismatch(format!(
                    "{name} is {:?}, expected {want:?}",
                    m.shape()
                )));
            }
            if !m.is_finite() {
                return Err(Error::Config(format!("{name} contains non-finite values")));
            }
        }
        Ok((rf >= channels).then(|| {
            format!("r_f = {rf} is not below E = {channels}; the numerator is not low-rank")
        }))
    }

    /// `φ_t = Vᵀ x_t`
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.v.matvec_t(x)
    }
}

/// `Φ_t`, an `[r_f, r]` matrix whose column `j` holds `φ_{t-1-j}` (zero before the start).
#[derive(Debug, Clone, PartialEq)]
pub struct CausalWindow {
    pub phi: Mat,
}

impl CausalWindow {
    /// Builds the window at position `t` from the full latent sequence.
    pub fn at(latents: &[Vec<f64>], t: usize, r_f: usize, order: usize) -> Self {
        let mut phi = Mat::zeros(r_f, order);
        for j in 0..order {
            if let Some(s) = t.checked_sub(j + 1) {
                for k in 0..r_f {
                    phi.set(k, j, latents[s][k]);
                }
            }
        }
        Self { phi }
    }
}

/// `φ` for every token, `[B, M, r_f]` flattened.
pub fn project_tokens(x: &TokenSequence, v: &Mat) -> Result<Vec<f64>> {
    if v.rows() != x.channels {
        return Err(Error::ShapeMismatch(format!(
            "V has {} rows but tokens have {} channels",
            v.rows(),
            x.channels
        )));
    }
    let mut out = Vec::with_capacity(x.batch * x.len * v.cols());
    for b in 0..x.batch {
        for t in 0..x.len {
            out.extend(v.matvec_t(x.token(b, t)));
        }
    }
    Ok(out)
}

/// `(α_t, γ_t)` for one token.
pub fn mixing_and_gates(x: &[f64], p: &NumeratorParams) -> (Vec<f64>, Vec<f64>) {
    let alpha = p.w_alpha.matvec(x);
    let gamma = (0..p.w_gamma.rows())
        .map(|k| sigmoid(dot(p.w_gamma.row(k), x)))
        .collect();
    (alpha, gamma)
}

/// `η_t = U (γ_t ⊙ Φ_t α_t)`
pub fn driving_signal(window: &CausalWindow, alpha: &[f64], gamma: &[f64], u: &Mat) -> Vec<f64> {
    let psi = window.phi.matvec(alpha);
    let gated: Vec<f64> = psi.iter().zip(gamma).map(|(p, g)| p * g).collect();
    u.matvec(&gated)
}

/// Dense `B_{t,i} = α_{t,i} U Diag(γ_t) Vᵀ`, `i = 1..r`. Test oracle only.
pub fn dense_equivalent_b(alpha: &[f64], gamma: &[f64], u: &Mat, v: &Mat) -> Vec<Mat> {
    let e = u.rows();
    let ug = Mat::from_fn(e, gamma.len(), |i, k| u.get(i, k) * gamma[k]);
    let core = ug.matmul(&v.transpose());
    alpha
        .iter()
        .map(|&a| Mat::from_fn(e, e, |i, j| a * core.get(i, j)))
        .collect()
}

/// Rolling buffer of the last `r` latents, newest first.
#[derive(Debug, Clone)]
pub(crate) struct LatentHistory<T> {
    buf: Vec<T>,
    r_f: usize,
    order: usize,
    head: usize,
}

impl<T: Copy + Default> LatentHistory<T> {
    pub fn new(r_f: usize, order: usize) -> Self {
        Self {
            buf: vec![T::default(); r_f * order],
            r_f,
            order,
            head: 0,
        }
    }

    /// Latent `φ_{t-lag}` for `lag = 1..=r` (zeros before the sequence start).
    #[inline]
    pub fn lag(&self, lag: usize) -> &[T] {
        let slot = (self.head + self.order - lag) % self.order;
        &self.buf[slot * self.r_f..(slot + 1) * self.r_f]
    }

    #[inline]
    pub fn push(&mut self, phi: &[T]) {
        let slot = self.head;
        self.buf[slot * self.r_f..(slot + 1) * self.r_f].copy_from_slice(phi);
        self.head = (self.head + 1) % self.order;
    }
}
