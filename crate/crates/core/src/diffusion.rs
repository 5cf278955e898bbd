//! DDPM noise schedule, forward corruption, epsilon loss and the reverse
//! sampling chain.
//!
//! Steps are 1-based throughout: `k` ranges over `1..=K` and `beta(k)` is the
//! variance added by the `k`-th corruption step.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::error::{input, Result, UstdError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleShape {
    Linear,
    Quadratic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub shape: ScheduleShape,
    pub beta: Vec<f64>,
    pub alpha_hat: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, beta_start: f64, beta_end: f64, shape: ScheduleShape) -> Result<Self> {
        if steps == 0 {
            return Err(input("diffusion needs at least one step"));
        }
        let range_ok = beta_start > 0.0 && beta_end < 1.0 && (beta_start < beta_end || steps == 1 && beta_start == beta_end);
        if !range_ok {
            return Err(input(format!(
                "beta range must satisfy 0 < start < end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let frac = |k: usize| if steps == 1 { 0.0 } else { k as f64 / (steps - 1) as f64 };
        let beta: Vec<f64> = (0..steps)
            .map(|k| match shape {
                _ if k == 0 => beta_start,
                _ if k == steps - 1 => beta_end,
                ScheduleShape::Linear => beta_start + frac(k) * (beta_end - beta_start),
                ScheduleShape::Quadratic => {
                    let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
                    (a + frac(k) * (b - a)).powi(2)
                }
            })
            .collect();
        let schedule = Self::from_betas(shape, beta)?;
        Ok(schedule)
    }

    /// Builds a schedule from explicit betas, checking every invariant.
    pub fn from_betas(shape: ScheduleShape, beta: Vec<f64>) -> Result<Self> {
        if beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(input("every beta must lie in (0,1)"));
        }
        if beta.windows(2).any(|w| w[1] <= w[0]) {
            return Err(input("betas must be strictly increasing"));
        }
        let alpha_hat: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for &a in &alpha_hat {
            acc *= a;
            alpha.push(acc);
        }
        let s = Self {
            shape,
            beta,
            alpha_hat,
            alpha,
        };
        s.check_invariants()?;
        Ok(s)
    }

    /// Default: 50 quadratic steps over `[1e-4, 0.5]`.
    pub fn default_ddpm() -> Self {
        Self::new(50, 1e-4, 0.5, ScheduleShape::Quadratic).expect("default schedule is valid")
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn idx(&self, k: usize) -> Result<usize> {
        if k == 0 || k > self.steps() {
            return Err(input(format!("diffusion step {k} outside 1..={}", self.steps())));
        }
        Ok(k - 1)
    }

    pub fn beta(&self, k: usize) -> Result<f64> {
        Ok(self.beta[self.idx(k)?])
    }

    pub fn alpha_hat(&self, k: usize) -> Result<f64> {
        Ok(self.alpha_hat[self.idx(k)?])
    }

    pub fn alpha(&self, k: usize) -> Result<f64> {
        Ok(self.alpha[self.idx(k)?])
    }

    pub fn check_invariants(&self) -> Result<()> {
        let bad = |m: &str| Err(UstdError::Contract(format!("noise schedule: {m}")));
        let k = self.beta.len();
        if self.alpha_hat.len() != k || self.alpha.len() != k {
            return bad("length mismatch");
        }
        if self.beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) || self.beta.windows(2).any(|w| w[1] <= w[0]) {
            return bad("beta must be strictly increasing in (0,1)");
        }
        for i in 0..k {
            if self.alpha_hat[i] != 1.0 - self.beta[i] {
                return bad("alpha_hat != 1 - beta");
            }
            let prev = if i == 0 { 1.0 } else { self.alpha[i - 1] };
            if self.alpha[i] != prev * self.alpha_hat[i] {
                return bad("alpha is not the running product of alpha_hat");
            }
            if !(self.alpha[i] > 0.0 && self.alpha[i] < prev) {
                return bad("alpha must decrease strictly inside (0,1)");
            }
        }
        Ok(())
    }
}

/// `y_k = sqrt(alpha_k) y0 + sqrt(1 - alpha_k) eps`.
pub fn q_sample(y0: &Mat, k: usize, eps: &Mat, schedule: &NoiseSchedule) -> Result<Mat> {
    if y0.dim() != eps.dim() {
        return Err(UstdError::Shape(format!("noise {:?} does not match target {:?}", eps.dim(), y0.dim())));
    }
    let a = schedule.alpha(k)?;
    Ok(y0 * a.sqrt() + eps * (1.0 - a).sqrt())
}

/// Row-grouped forward corruption: rows `g*rows_per_k .. (g+1)*rows_per_k`
/// use step `ks[g]`. Lets each batch element carry its own step.
pub fn q_sample_grouped(y0: &Mat, ks: &[usize], eps: &Mat, schedule: &NoiseSchedule) -> Result<Mat> {
    if y0.dim() != eps.dim() {
        return Err(UstdError::Shape(format!("noise {:?} does not match target {:?}", eps.dim(), y0.dim())));
    }
    if ks.is_empty() || y0.nrows() % ks.len() != 0 {
        return Err(UstdError::Shape(format!("{} rows cannot be split into {} step groups", y0.nrows(), ks.len())));
    }
    let per = y0.nrows() / ks.len();
    let mut out = Mat::zeros(y0.dim());
    for (g, &k) in ks.iter().enumerate() {
        let a = schedule.alpha(k)?;
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        for r in g * per..(g + 1) * per {
            for c in 0..y0.ncols() {
                out[[r, c]] = sa * y0[[r, c]] + sn * eps[[r, c]];
            }
        }
    }
    Ok(out)
}

/// Mean squared error between the predicted and the true noise.
pub fn epsilon_loss(t: &Tape, eps_hat: Var, eps: &Mat) -> Result<Var> {
    let shape = t.shape(eps_hat);
    if shape != eps.dim() {
        return Err(UstdError::Contract(format!(
            "denoiser returned {shape:?} but the noise is {:?}",
            eps.dim()
        )));
    }
    let diff = t.sub(eps_hat, t.constant(eps.clone()));
    let sq = t.mul(diff, diff);
    Ok(t.mean(sq))
}

/// One ancestral step from `y_k` to `y_{k-1}`; `z` is ignored at `k = 1`.
pub fn reverse_step(y_k: &Mat, k: usize, eps_hat: &Mat, z: &Mat, schedule: &NoiseSchedule) -> Result<Mat> {
    if eps_hat.dim() != y_k.dim() || z.dim() != y_k.dim() {
        return Err(UstdError::Shape("reverse step operands differ in shape".into()));
    }
    let beta = schedule.beta(k)?;
    let ah = schedule.alpha_hat(k)?;
    let a = schedule.alpha(k)?;
    let coef = beta / (1.0 - a).sqrt();
    let mut out = (y_k - &(eps_hat * coef)) / ah.sqrt();
    if k > 1 {
        out.scaled_add(beta.sqrt(), z);
    }
    Ok(out)
}

/// Runs the reverse chain from pure noise.
///
/// `eps_fn(y_k, k)` predicts the noise for the whole stacked state; stacking
/// several samples into one state lets a single call serve every chain.
pub fn sample_chain<R, F>(rows: usize, cols: usize, schedule: &NoiseSchedule, rng: &mut R, mut eps_fn: F) -> Result<Mat>
where
    R: Rng + ?Sized,
    F: FnMut(&Mat, usize) -> Result<Mat>,
{
    let mut y = standard_normal(rows, cols, rng);
    for k in (1..=schedule.steps()).rev() {
        let eps_hat = eps_fn(&y, k)?;
        if eps_hat.dim() != y.dim() {
            return Err(UstdError::Contract(format!(
                "noise prediction {:?} does not match state {:?}",
                eps_hat.dim(),
                y.dim()
            )));
        }
        let z = if k > 1 { standard_normal(rows, cols, rng) } else { Mat::zeros((rows, cols)) };
        y = reverse_step(&y, k, &eps_hat, &z, schedule)?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(UstdError::Numeric(format!("sampling chain produced non-finite values at step {k}")));
        }
    }
    Ok(y)
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}
