//! Loss functions, their pointwise scores in basis directions, and empirical risk.
//!
//! Every empirical mean is taken with respect to the frequency weights of the
//! dataset: `P_n f = sum_i f_i w_i / sum_i w_i`. The observation weight of a
//! loss (the treatment indicator for an outcome regression among the treated)
//! multiplies the pointwise loss but does not enter the normalizer, so rows it
//! switches off contribute zero rather than shrinking `n`.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{HalError, Result};

/// Bound on the logit-scale predictor before `expit`.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// `½ (y - q)²` on the identity scale.
    SquaredError,
    /// Bernoulli log-likelihood with `q = logit(mean)`.
    BinomialLoglik,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationWeight {
    None,
    /// Restrict the loss to rows with `A = 1`.
    Treatment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LossKind {
    pub family: Family,
    pub observation_weight: ObservationWeight,
}

impl LossKind {
    pub fn squared_error() -> Self {
        Self {
            family: Family::SquaredError,
            observation_weight: ObservationWeight::None,
        }
    }

    pub fn binomial() -> Self {
        Self {
            family: Family::BinomialLoglik,
            observation_weight: ObservationWeight::None,
        }
    }

    pub fn among_treated(mut self) -> Self {
        self.observation_weight = ObservationWeight::Treatment;
        self
    }

    /// Maps a linear predictor to the mean scale.
    #[inline]
    pub fn mean(&self, q: f64) -> f64 {
        match self.family {
            Family::SquaredError => q,
            Family::BinomialLoglik => expit(q),
        }
    }

    /// Pointwise loss at outcome `y` and predictor `q`.
    #[inline]
    pub fn pointwise(&self, y: f64, q: f64) -> f64 {
        match self.family {
            Family::SquaredError => 0.5 * (y - q) * (y - q),
            Family::BinomialLoglik => {
                let q = clamp_logit(q);
                softplus(q) - y * q
            }
        }
    }
}

#[inline]
pub fn clamp_logit(q: f64) -> f64 {
    q.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

#[inline]
pub fn expit(q: f64) -> f64 {
    1.0 / (1.0 + (-clamp_logit(q)).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
fn softplus(q: f64) -> f64 {
    if q > 0.0 {
        q + (-q).exp().ln_1p()
    } else {
        q.exp().ln_1p()
    }
}

/// Observation weight `a_i` of every row (ones when the loss is unrestricted).
pub fn observation_weights(data: &Dataset, loss: &LossKind) -> Result<Vec<f64>> {
    match loss.observation_weight {
        ObservationWeight::None => Ok(vec![1.0; data.n()]),
        ObservationWeight::Treatment => data
            .treatment()
            .map(<[f64]>::to_vec)
            .ok_or_else(|| HalError::InvalidInput("loss restricted to treated rows but data has no treatment".into())),
    }
}

fn check(fit_values: &[f64], data: &Dataset, loss: &LossKind) -> Result<Vec<f64>> {
    if fit_values.len() != data.n() {
        return Err(HalError::Dimension(format!(
            "{} fitted values for {} rows",
            fit_values.len(),
            data.n()
        )));
    }
    if let Some((i, v)) = fit_values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(HalError::NonFinite(format!("fitted value {v} at row {i}")));
    }
    let a = observation_weights(data, loss)?;
    if loss.family == Family::BinomialLoglik {
        for i in 0..data.n() {
            let y = data.y()[i];
            if a[i] * data.weight(i) > 0.0 && !(0.0..=1.0).contains(&y) {
                return Err(HalError::InvalidInput(format!(
                    "binomial outcome {y} at row {i} is outside [0, 1]"
                )));
            }
        }
    }
    Ok(a)
}

/// Empirical risk `P_n L(Q)` at the linear predictor `fit_values`.
pub fn risk(fit_values: &[f64], data: &Dataset, loss: &LossKind) -> Result<f64> {
    let a = check(fit_values, data, loss)?;
    let y = data.y();
    let total: f64 = (0..data.n())
        .filter(|&i| a[i] != 0.0 && data.weight(i) != 0.0)
        .map(|i| data.weight(i) * a[i] * loss.pointwise(y[i], fit_values[i]))
        .sum();
    Ok(total / data.total_weight())
}

/// Residual factor `r_i` of the directional derivative: for any direction
/// `phi`, `d/de P_n L(Q + e phi) = P_n (r phi)`.
pub fn pointwise_score(fit_values: &[f64], data: &Dataset, loss: &LossKind) -> Result<Vec<f64>> {
    let a = check(fit_values, data, loss)?;
    Ok(fit_values
        .iter()
        .zip(data.y())
        .zip(&a)
        .map(|((&q, &y), &ai)| -ai * (y - loss.mean(q)))
        .collect())
}

/// `P_n v` under the dataset's frequency weights.
pub fn empirical_mean(data: &Dataset, v: &[f64]) -> f64 {
    let s: f64 = match data.weights() {
        None => v.iter().sum(),
        Some(w) => v.iter().zip(w).map(|(a, b)| a * b).sum(),
    };
    s / data.total_weight()
}

/// Largest absolute pointwise loss over the rows, after clamping; finite by
/// construction for bounded outcomes.
pub fn max_pointwise_loss(fit_values: &[f64], data: &Dataset, loss: &LossKind) -> Result<f64> {
    let a = check(fit_values, data, loss)?;
    Ok((0..data.n())
        .map(|i| (a[i] * loss.pointwise(data.y()[i], fit_values[i])).abs())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn data(y: Vec<f64>, a: Option<Vec<f64>>) -> Dataset {
        let n = y.len();
        Dataset::from_columns(vec![(0..n).map(|i| i as f64).collect()], y, a).unwrap()
    }

    #[test]
    fn risk_examples() {
        let d = data(vec![0.3, -1.0, 2.0], None);
        assert_eq!(risk(&[0.3, -1.0, 2.0], &d, &LossKind::squared_error()).unwrap(), 0.0);

        let d = data(vec![1.0], None);
        let r = risk(&[0.0], &d, &LossKind::binomial()).unwrap();
        assert!((r - std::f64::consts::LN_2).abs() < 1e-15);

        let d = data(vec![1.0, 5.0], Some(vec![1.0, 0.0]));
        let r = risk(&[0.0, 0.0], &d, &LossKind::squared_error().among_treated()).unwrap();
        assert_eq!(r, 0.5 * 1.0 / 2.0);
    }

    #[test]
    fn score_examples() {
        let d = data(vec![0.3, -1.0], None);
        assert_eq!(pointwise_score(&[0.3, -1.0], &d, &LossKind::squared_error()).unwrap(), vec![0.0, 0.0]);
        let d = data(vec![1.0], None);
        assert_eq!(pointwise_score(&[0.0], &d, &LossKind::binomial()).unwrap(), vec![-0.5]);
    }

    #[test]
    fn errors() {
        let d = data(vec![1.0, 0.0], None);
        assert!(matches!(risk(&[f64::NAN, 0.0], &d, &LossKind::binomial()), Err(HalError::NonFinite(_))));
        assert!(matches!(risk(&[0.0], &d, &LossKind::binomial()), Err(HalError::Dimension(_))));
        let d = data(vec![2.0, 0.0], None);
        assert!(risk(&[0.0, 0.0], &d, &LossKind::binomial()).is_err());
        assert!(risk(&[0.0, 0.0], &d, &LossKind::squared_error().among_treated()).is_err());
    }

    #[test]
    fn clamped_losses_are_finite() {
        let d = data(vec![1.0, 0.0], None);
        let m = max_pointwise_loss(&[-1e6, 1e6], &d, &LossKind::binomial()).unwrap();
        assert!(m.is_finite());
        assert!((m - LOGIT_CLAMP).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_difference(
            y in proptest::collection::vec(0.0f64..1.0, 8),
            q in proptest::collection::vec(-3.0f64..3.0, 8),
            phi in proptest::collection::vec(0.0f64..1.0, 8),
            a in proptest::collection::vec(prop_oneof![Just(0.0), Just(1.0)], 8),
            binomial in any::<bool>(),
        ) {
            prop_assume!(a.iter().any(|&v| v == 1.0));
            let d = data(y, Some(a));
            let base = if binomial { LossKind::binomial() } else { LossKind::squared_error() };
            let loss = base.among_treated();
            let eps = 1e-5;
            let plus: Vec<f64> = q.iter().zip(&phi).map(|(q, p)| q + eps * p).collect();
            let minus: Vec<f64> = q.iter().zip(&phi).map(|(q, p)| q - eps * p).collect();
            let fd = (risk(&plus, &d, &loss).unwrap() - risk(&minus, &d, &loss).unwrap()) / (2.0 * eps);
            let r = pointwise_score(&q, &d, &loss).unwrap();
            let prod: Vec<f64> = r.iter().zip(&phi).map(|(a, b)| a * b).collect();
            let analytic = empirical_mean(&d, &prod);
            let scale = analytic.abs().max(1e-3);
            prop_assert!((fd - analytic).abs() / scale <= 1e-5, "fd {} analytic {}", fd, analytic);
        }
    }
}
