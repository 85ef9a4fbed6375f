//! Covariance functions for the treatment and outcome models.
//!
//! Three families live here: plain scalar kernels (constant, squared
//! exponential, periodic) used for mark models and outcome baselines, the
//! masked regressive treatment kernel acting on `RegressiveInput` vectors,
//! and the windowed causal response-shape kernel.
//!
//! Convention: the event kernels use `exp(-d^2 / s)` where `s` is the raw
//! lengthscale parameter (no factor 2), while the response kernel uses
//! `exp(-d^2 / l^2)`. Both call into [`se_d2`] so the exponent convention
//! is decided at the call site, once.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `exp(-d2 / denom)`, the shared squared-exponential core.
///
/// `d2` is an already-squared distance and `denom` the (positive) kernel
/// denominator in the same squared units.
#[inline]
pub fn se_d2(d2: f64, denom: f64) -> f64 {
    (-d2 / denom).exp()
}

/// Squared-exponential kernel value `variance * exp(-d^2 / lengthscale)`.
///
/// The denominator is the raw lengthscale parameter, matching the event
/// kernel convention used throughout the treatment model.
pub fn eval_se(d: f64, variance: f64, lengthscale: f64) -> Result<f64> {
    if !d.is_finite() || !variance.is_finite() || !lengthscale.is_finite() {
        return Err(Error::invalid_argument("eval_se: non-finite input"));
    }
    if lengthscale <= 0.0 {
        return Err(Error::invalid_argument("eval_se: lengthscale must be > 0"));
    }
    if variance < 0.0 {
        return Err(Error::invalid_argument("eval_se: variance must be >= 0"));
    }
    Ok(variance * se_d2(d * d, lengthscale))
}

/// Kernel specification as it appears in config files: a nested tagged record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KernelSpec {
    Constant {
        variance: f64,
    },
    SquaredExp {
        variance: f64,
        lengthscale: f64,
    },
    Periodic {
        variance: f64,
        lengthscale: f64,
        period_hours: f64,
    },
    /// Per-slot event kernel on (relative time, mark). `mark_lengthscale`
    /// of `None` means the mark dimension is ignored for this slot.
    RelTimeMarkSe {
        variance: f64,
        time_lengthscale: f64,
        mark_lengthscale: Option<f64>,
    },
    /// Response-shape kernel on clamped relative times, zero outside the
    /// per-treatment window.
    CausalResponseSe {
        lengthscale: f64,
        window_hours: f64,
    },
    Sum(Vec<KernelSpec>),
    Product(Vec<KernelSpec>),
}

impl KernelSpec {
    /// Checks the parameter invariants (non-negative variances, positive
    /// lengthscales and periods, non-empty composites), recursively.
    pub fn validate(&self) -> Result<()> {
        use KernelSpec::*;
        let bad = |msg: &str| Err(Error::invalid_argument(format!("kernel spec: {msg}")));
        match self {
            Constant { variance } => {
                if !variance.is_finite() || *variance < 0.0 {
                    return bad("variance must be finite and >= 0");
                }
            }
            SquaredExp {
                variance,
                lengthscale,
            } => {
                if !variance.is_finite() || *variance < 0.0 {
                    return bad("variance must be finite and >= 0");
                }
                if !lengthscale.is_finite() || *lengthscale <= 0.0 {
                    return bad("lengthscale must be finite and > 0");
                }
            }
            Periodic {
                variance,
                lengthscale,
                period_hours,
            } => {
                if !variance.is_finite() || *variance < 0.0 {
                    return bad("variance must be finite and >= 0");
                }
                if !lengthscale.is_finite() || *lengthscale <= 0.0 {
                    return bad("lengthscale must be finite and > 0");
                }
                if !period_hours.is_finite() || *period_hours <= 0.0 {
                    return bad("period_hours must be finite and > 0");
                }
            }
            RelTimeMarkSe {
                variance,
                time_lengthscale,
                mark_lengthscale,
            } => {
                if !variance.is_finite() || *variance < 0.0 {
                    return bad("variance must be finite and >= 0");
                }
                if !time_lengthscale.is_finite() || *time_lengthscale <= 0.0 {
                    return bad("time_lengthscale must be finite and > 0");
                }
                if let Some(m) = mark_lengthscale {
                    if !m.is_finite() || *m <= 0.0 {
                        return bad("mark_lengthscale must be finite and > 0");
                    }
                }
            }
            CausalResponseSe {
                lengthscale,
                window_hours,
            } => {
                if !lengthscale.is_finite() || *lengthscale <= 0.0 {
                    return bad("lengthscale must be finite and > 0");
                }
                if !window_hours.is_finite() || *window_hours <= 0.0 {
                    return bad("window_hours must be finite and > 0");
                }
            }
            Sum(children) | Product(children) => {
                if children.is_empty() {
                    return bad("sum/product children must be nonempty");
                }
                for c in children {
                    c.validate()?;
                }
            }
        }
        Ok(())
    }

    /// Evaluates a scalar-input kernel at `(x, y)`. Event and response
    /// kernels need richer inputs and are rejected here.
    pub fn eval_scalar(&self, x: f64, y: f64) -> Result<f64> {
        use KernelSpec::*;
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::invalid_argument("eval_scalar: non-finite input"));
        }
        match self {
            Constant { variance } => Ok(*variance),
            SquaredExp {
                variance,
                lengthscale,
            } => {
                let d = x - y;
                Ok(variance * se_d2(d * d, *lengthscale))
            }
            Periodic {
                variance,
                lengthscale,
                period_hours,
            } => {
                let s = (std::f64::consts::PI * (x - y).abs() / period_hours).sin();
                Ok(variance * (-2.0 * s * s / (lengthscale * lengthscale)).exp())
            }
            Sum(children) => {
                let mut acc = 0.0;
                for c in children {
                    acc += c.eval_scalar(x, y)?;
                }
                Ok(acc)
            }
            Product(children) => {
                let mut acc = 1.0;
                for c in children {
                    acc *= c.eval_scalar(x, y)?;
                }
                Ok(acc)
            }
            RelTimeMarkSe { .. } | CausalResponseSe { .. } => Err(Error::invalid_argument(
                "eval_scalar: kernel requires event-structured inputs",
            )),
        }
    }

    /// Kernel value at zero distance, `k(x, x)`, for scalar kernels.
    pub fn scalar_diag(&self) -> Result<f64> {
        self.eval_scalar(0.0, 0.0)
    }
}

/// One slot of a regressive input: the i-th most recent event of a stream,
/// or a placeholder when fewer events exist.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventSlot {
    Present { rel_time: f64, mark: f64 },
    Placeholder,
}

impl EventSlot {
    pub fn is_present(&self) -> bool {
        matches!(self, EventSlot::Present { .. })
    }
}

// Placeholders are serialized as the literal string "inf"; present slots as
// a two-element [rel_time, mark] array.
impl Serialize for EventSlot {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            EventSlot::Present { rel_time, mark } => [*rel_time, *mark].serialize(ser),
            EventSlot::Placeholder => ["inf", "inf"].serialize(ser),
        }
    }
}

impl<'de> Deserialize<'de> for EventSlot {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Nums([f64; 2]),
            Strs([String; 2]),
        }
        match Raw::deserialize(de)? {
            Raw::Nums([rel_time, mark]) => Ok(EventSlot::Present { rel_time, mark }),
            Raw::Strs([a, b]) => {
                if a == "inf" && b == "inf" {
                    Ok(EventSlot::Placeholder)
                } else {
                    Err(serde::de::Error::custom("expected [\"inf\", \"inf\"]"))
                }
            }
        }
    }
}

/// Input vector of the regressive treatment kernel: absolute time plus the
/// last `Q_a` treatments and last `Q_o` outcomes as (relative time, mark)
/// slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressiveInput {
    pub absolute_time: f64,
    pub last_treatments: Vec<EventSlot>,
    pub last_outcomes: Vec<EventSlot>,
}

impl RegressiveInput {
    pub fn all_placeholder(absolute_time: f64, q_treatments: usize, q_outcomes: usize) -> Self {
        RegressiveInput {
            absolute_time,
            last_treatments: vec![EventSlot::Placeholder; q_treatments],
            last_outcomes: vec![EventSlot::Placeholder; q_outcomes],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.absolute_time.is_finite() {
            return Err(Error::invalid_argument(
                "regressive input: non-finite absolute time",
            ));
        }
        for slot in self.last_treatments.iter().chain(self.last_outcomes.iter()) {
            if let EventSlot::Present { rel_time, mark } = slot {
                if !rel_time.is_finite() || !mark.is_finite() {
                    return Err(Error::invalid_argument(
                        "regressive input: non-finite slot value",
                    ));
                }
                if *rel_time < 0.0 {
                    return Err(Error::invalid_argument(
                        "regressive input: negative relative time",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Parameters of one event slot's kernel. `mark_lengthscale = None` makes
/// the slot a relative-time-only kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotParams {
    pub variance: f64,
    pub time_lengthscale: f64,
    pub mark_lengthscale: Option<f64>,
}

impl SlotParams {
    /// Kernel value between two populated slots; the indicator masking for
    /// placeholders is applied by the caller.
    fn eval(&self, rel_a: f64, mark_a: f64, rel_b: f64, mark_b: f64) -> f64 {
        let dt = rel_a - rel_b;
        let mut v = self.variance * se_d2(dt * dt, self.time_lengthscale);
        if let Some(ml) = self.mark_lengthscale {
            let dm = mark_a - mark_b;
            v *= se_d2(dm * dm, ml);
        }
        v
    }
}

/// The full masked regressive treatment kernel:
/// baseline SE on absolute time plus one kernel per event slot, where any
/// slot that is a placeholder on either side contributes exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentKernel {
    /// `(variance, lengthscale)` of the baseline kernel, absent when the
    /// baseline component is disabled.
    pub baseline: Option<(f64, f64)>,
    pub treatment_slots: Vec<SlotParams>,
    pub outcome_slots: Vec<SlotParams>,
}

impl TreatmentKernel {
    pub fn q_treatments(&self) -> usize {
        self.treatment_slots.len()
    }

    pub fn q_outcomes(&self) -> usize {
        self.outcome_slots.len()
    }

    /// Pointwise kernel evaluation `K(v, v')`.
    pub fn eval(&self, v: &RegressiveInput, w: &RegressiveInput) -> Result<f64> {
        if v.last_treatments.len() != self.treatment_slots.len()
            || w.last_treatments.len() != self.treatment_slots.len()
            || v.last_outcomes.len() != self.outcome_slots.len()
            || w.last_outcomes.len() != self.outcome_slots.len()
        {
            return Err(Error::invalid_argument(
                "treatment kernel: input slot counts do not match Q_a/Q_o",
            ));
        }
        v.validate()?;
        w.validate()?;
        let mut acc = 0.0;
        if let Some((var, ls)) = self.baseline {
            let d = v.absolute_time - w.absolute_time;
            acc += var * se_d2(d * d, ls);
        }
        for (params, (sa, sb)) in self.treatment_slots.iter().zip(
            v.last_treatments.iter().zip(w.last_treatments.iter()),
        ) {
            acc += masked_slot(params, sa, sb);
        }
        for (params, (sa, sb)) in self
            .outcome_slots
            .iter()
            .zip(v.last_outcomes.iter().zip(w.last_outcomes.iter()))
        {
            acc += masked_slot(params, sa, sb);
        }
        Ok(acc)
    }

    /// Diagonal value `K(v, v)`: the sum of variances of the baseline and
    /// every populated slot.
    pub fn diag(&self, v: &RegressiveInput) -> f64 {
        let mut acc = self.baseline.map_or(0.0, |(var, _)| var);
        for (params, slot) in self.treatment_slots.iter().zip(&v.last_treatments) {
            if slot.is_present() {
                acc += params.variance;
            }
        }
        for (params, slot) in self.outcome_slots.iter().zip(&v.last_outcomes) {
            if slot.is_present() {
                acc += params.variance;
            }
        }
        acc
    }
}

fn masked_slot(params: &SlotParams, a: &EventSlot, b: &EventSlot) -> f64 {
    match (a, b) {
        (
            EventSlot::Present {
                rel_time: ra,
                mark: ma,
            },
            EventSlot::Present {
                rel_time: rb,
                mark: mb,
            },
        ) => params.eval(*ra, *ma, *rb, *mb),
        _ => 0.0,
    }
}

/// Response-shape kernel between `(tau, t_i)` and `(tau', t_i')`:
/// SE on clamped relative times, zero whenever either query time falls
/// outside its treatment's `[t_i, t_i + window]` interval.
pub fn eval_response_kernel(
    tau: f64,
    tau2: f64,
    t_i: f64,
    t_i2: f64,
    shape_lengthscale: f64,
    window_hours: f64,
) -> f64 {
    if tau < t_i || tau > t_i + window_hours || tau2 < t_i2 || tau2 > t_i2 + window_hours {
        return 0.0;
    }
    let d = (tau - t_i) - (tau2 - t_i2);
    se_d2(d * d, shape_lengthscale * shape_lengthscale)
}

/// Gram matrix of a kernel closure over `inputs`, with `jitter` added to the
/// diagonal.
pub fn gram_with<T, F>(inputs: &[T], kernel: F, jitter: f64) -> DMatrix<f64>
where
    F: Fn(&T, &T) -> f64,
{
    let n = inputs.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel(&inputs[i], &inputs[j]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        m[(i, i)] += jitter;
    }
    m
}

/// Default diagonal jitter for gram matrices.
pub const DEFAULT_JITTER: f64 = 1e-6;

/// Gram matrix of a scalar kernel spec.
pub fn gram(inputs: &[f64], spec: &KernelSpec, jitter: f64) -> Result<DMatrix<f64>> {
    if inputs.is_empty() {
        return Err(Error::invalid_argument("gram: inputs must be nonempty"));
    }
    if jitter < 0.0 {
        return Err(Error::invalid_argument("gram: jitter must be >= 0"));
    }
    spec.validate()?;
    let n = inputs.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = spec.eval_scalar(inputs[i], inputs[j])?;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        m[(i, i)] += jitter;
    }
    Ok(m)
}
