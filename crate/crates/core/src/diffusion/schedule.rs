//! Noise schedules and the closed-form forward process.

use super::DiffusionError;
use crate::tensor::Scalar;
use ndarray::ArrayD;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Build from explicit betas, validating monotonicity and range.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self, DiffusionError> {
        if beta.len() < 2 {
            return Err(DiffusionError::Config("need at least 2 steps".into()));
        }
        for pair in beta.windows(2) {
            if pair[1] < pair[0] {
                return Err(DiffusionError::Config("betas must be nondecreasing".into()));
            }
        }
        if beta.iter().any(|&b| b <= 0.0 || b >= 1.0) {
            return Err(DiffusionError::Config("betas must lie in (0, 1)".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        if alpha_bar.windows(2).any(|p| p[1] >= p[0]) {
            return Err(DiffusionError::Config(
                "alpha_bar must be strictly decreasing".into(),
            ));
        }
        Ok(NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }
}

/// A named schedule recipe; see [`schedule_registry`].
pub trait ScheduleBuilder: Sync {
    fn name(&self) -> &'static str;
    fn build(&self, t_count: usize) -> Result<NoiseSchedule, DiffusionError>;
}

/// Linear betas from 1e-4 to 2e-2.
pub struct LinearSchedule;

impl ScheduleBuilder for LinearSchedule {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn build(&self, t_count: usize) -> Result<NoiseSchedule, DiffusionError> {
        if t_count < 2 {
            return Err(DiffusionError::Config("need at least 2 steps".into()));
        }
        let (lo, hi) = (1e-4, 2e-2);
        let beta = (0..t_count)
            .map(|i| lo + (hi - lo) * i as f64 / (t_count - 1) as f64)
            .collect();
        NoiseSchedule::from_betas(beta)
    }
}

/// Squared-cosine alpha_bar profile with the usual small offset; betas are
/// clipped at 0.999 near the end where the profile collapses to zero.
pub struct CosineSchedule;

impl ScheduleBuilder for CosineSchedule {
    fn name(&self) -> &'static str {
        "cosine"
    }

    fn build(&self, t_count: usize) -> Result<NoiseSchedule, DiffusionError> {
        if t_count < 2 {
            return Err(DiffusionError::Config("need at least 2 steps".into()));
        }
        let s = 0.008;
        let f = |t: f64| {
            let x = (t / t_count as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let beta = (0..t_count)
            .map(|i| {
                let b = 1.0 - f((i + 1) as f64) / f(i as f64);
                b.clamp(1e-8, 0.999)
            })
            .collect();
        NoiseSchedule::from_betas(beta)
    }
}

pub fn schedule_registry() -> &'static [&'static dyn ScheduleBuilder] {
    &[&LinearSchedule, &CosineSchedule]
}

pub fn make_schedule(kind: &str, t_count: usize) -> Result<NoiseSchedule, DiffusionError> {
    schedule_registry()
        .iter()
        .find(|b| b.name() == kind)
        .ok_or_else(|| {
            let known: Vec<_> = schedule_registry().iter().map(|b| b.name()).collect();
            DiffusionError::Config(format!("unknown schedule `{kind}`; known: {known:?}"))
        })?
        .build(t_count)
}

/// Closed-form forward process `z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn q_sample<S: Scalar>(
    z0: &ArrayD<S>,
    t: usize,
    eps: &ArrayD<S>,
    sched: &NoiseSchedule,
) -> Result<ArrayD<S>, DiffusionError> {
    if z0.shape() != eps.shape() {
        return Err(DiffusionError::Shape(format!(
            "z0 {:?} vs eps {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    if t >= sched.len() {
        return Err(DiffusionError::Index(format!(
            "t = {t} outside schedule of length {}",
            sched.len()
        )));
    }
    let ab = sched.alpha_bar[t];
    let (a, b) = (S::lit(ab.sqrt()), S::lit((1.0 - ab).sqrt()));
    let mut out = z0.clone();
    out.zip_mut_with(eps, |z, &e| *z = a * *z + b * e);
    Ok(out)
}
