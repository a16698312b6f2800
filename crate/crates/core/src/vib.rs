//! Stochastic Gaussian encoding of entity tokens.
//!
//! Entity embeddings `x` are mapped to `N(mu, sigma²)` by two single-layer
//! perceptrons (`sigma` through a softplus), sampled with the
//! reparameterization `z = mu + eps·sigma`, and mixed back into the entity
//! positions with weight `beta`. The compression term is the KL divergence
//! to a standard normal prior, averaged over entity tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Segment, Tape, Tensor, Var};

/// Per-token flags, true on entity tokens (markers excluded).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMask(Vec<bool>);

impl EntityMask {
    pub fn new(flags: Vec<bool>) -> Self {
        Self(flags)
    }

    pub fn from_spans(len: usize, spans: &[(usize, usize)]) -> Self {
        let mut flags = vec![false; len];
        for &(s, e) in spans {
            flags[s..=e].iter_mut().for_each(|f| *f = true);
        }
        Self(flags)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&m| m).count()
    }

    pub fn flags(&self) -> &[bool] {
        &self.0
    }

    pub fn concat<'a>(masks: impl IntoIterator<Item = &'a EntityMask>) -> Self {
        Self(masks.into_iter().flat_map(|m| m.0.iter().copied()).collect())
    }
}

/// Weights of the `mu` and raw-`sigma` perceptrons plus the blending factor.
/// `T` is [`Tensor`] for stored weights and [`Var`] once on a tape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VibParams<T = Tensor> {
    pub w_mu: T,
    pub b_mu: T,
    pub w_sigma: T,
    pub b_sigma: T,
    pub beta: f64,
}

/// Initial `b_sigma`. Codes start wider than the prior (sigma ≈ 1.31) so
/// the KL term has to pull trained tokens in; tokens never seen in training
/// keep the wide start.
pub const SIGMA_BIAS_INIT: f64 = 1.0;

/// [`VibParams`] registered on a tape.
pub type VibVars = VibParams<Var>;

impl VibParams {
    pub fn init<R: Rng + ?Sized>(d: usize, beta: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1], got {beta}")));
        }
        let std = 1.0 / (d as f64).sqrt();
        Ok(Self {
            w_mu: Tensor::randn(&[d, d], std, rng),
            b_mu: Tensor::zeros(&[d]),
            w_sigma: Tensor::randn(&[d, d], std, rng),
            b_sigma: Tensor::full(&[d], SIGMA_BIAS_INIT),
            beta,
        })
    }

    pub fn dim(&self) -> usize {
        self.b_mu.len()
    }
}

/// `mu = x·W_mu + b_mu`, `sigma = softplus(x·W_sigma + b_sigma)`, per row.
pub fn encode_gaussian(tape: &mut Tape, x: Var, p: &VibVars) -> Result<(Var, Var)> {
    let lin_mu = tape.matmul(x, p.w_mu)?;
    let mu = tape.add_row(lin_mu, p.b_mu)?;
    let lin_sigma = tape.matmul(x, p.w_sigma)?;
    let raw_sigma = tape.add_row(lin_sigma, p.b_sigma)?;
    Ok((mu, tape.softplus(raw_sigma)))
}

/// `z = mu + eps ⊙ sigma`. `eps = None` is the deterministic path `z = mu`.
/// The noise is a constant: gradients reach `mu` and `sigma` only.
pub fn sample_z(tape: &mut Tape, mu: Var, sigma: Var, eps: Option<&Tensor>) -> Result<Var> {
    match eps {
        None => Ok(mu),
        Some(eps) => {
            let noise = tape.mul_const(sigma, eps)?;
            tape.add(mu, noise)
        }
    }
}

/// Per-token `Σ_dims ½(mu² + sigma² − 1 − ln sigma²)`.
pub fn kl_to_standard_normal(tape: &mut Tape, mu: Var, sigma: Var) -> Result<Var> {
    tape.kl_standard_normal(mu, sigma)
}

/// Mean per-token KL over the entity positions of each sequence, averaged
/// over sequences. A sequence without entity tokens contributes 0.
pub fn vib_loss(
    tape: &mut Tape,
    mu: Var,
    sigma: Var,
    mask: &EntityMask,
    segments: &[Segment],
) -> Result<Var> {
    let kl = kl_to_standard_normal(tape, mu, sigma)?;
    let weights = entity_average_weights(mask, segments, tape.value(kl).len())?;
    tape.weighted_sum(kl, weights)
}

fn entity_average_weights(mask: &EntityMask, segments: &[Segment], rows: usize) -> Result<Vec<f64>> {
    if mask.len() != rows {
        return Err(Error::Dimension {
            op: "vib_loss",
            lhs: vec![rows],
            rhs: vec![mask.len()],
        });
    }
    let mut w = vec![0.0; rows];
    if segments.is_empty() {
        return Ok(w);
    }
    let batch = segments.len() as f64;
    for seg in segments {
        let flags = &mask.flags()[seg.start..seg.start + seg.len];
        let n = flags.iter().filter(|&&f| f).count();
        if n == 0 {
            continue;
        }
        for (j, &f) in flags.iter().enumerate() {
            if f {
                w[seg.start + j] = 1.0 / (n as f64 * batch);
            }
        }
    }
    Ok(w)
}

/// `x' = x·(1−M) + x·M·(1−beta) + z·M·beta`. Rows with `M = 0` are copied
/// from `x` unchanged.
pub fn blend(tape: &mut Tape, x: Var, z: Var, mask: &EntityMask, beta: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Domain(format!("beta must lie in [0, 1], got {beta}")));
    }
    tape.blend(x, z, mask.flags(), beta)
}

/// Closed-form KL of one token without a tape.
pub fn kl_value(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::Dimension {
            op: "kl_value",
            lhs: vec![mu.len()],
            rhs: vec![sigma.len()],
        });
    }
    mu.iter().zip(sigma).try_fold(0.0, |acc, (&m, &s)| {
        if s <= 0.0 || s.is_nan() {
            return Err(Error::Domain(format!("sigma must be positive, got {s}")));
        }
        Ok(acc + 0.5 * (m * m + s * s - 1.0) - s.ln())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softplus_scalar;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vars(tape: &mut Tape, p: &VibParams) -> VibVars {
        VibVars {
            w_mu: tape.param(p.w_mu.clone()),
            b_mu: tape.param(p.b_mu.clone()),
            w_sigma: tape.param(p.w_sigma.clone()),
            b_sigma: tape.param(p.b_sigma.clone()),
            beta: p.beta,
        }
    }

    #[test]
    fn identity_mu_and_zero_sigma_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 4;
        let p = VibParams {
            w_mu: Tensor::eye(d),
            b_mu: Tensor::zeros(&[d]),
            w_sigma: Tensor::zeros(&[d, d]),
            b_sigma: Tensor::zeros(&[d]),
            beta: 0.5,
        };
        let x = Tensor::randn(&[3, d], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pv = vars(&mut tape, &p);
        let (mu, sigma) = encode_gaussian(&mut tape, xv, &pv).unwrap();
        assert_eq!(tape.value(mu), &x);
        for &s in tape.value(sigma).data() {
            assert_eq!(s, std::f64::consts::LN_2);
        }
    }

    #[test]
    fn sigma_matches_composed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 5;
        let p = VibParams::init(d, 0.5, &mut rng).unwrap();
        let p = VibParams {
            b_sigma: Tensor::randn(&[d], 1.0, &mut rng),
            b_mu: Tensor::randn(&[d], 1.0, &mut rng),
            ..p
        };
        let x = Tensor::randn(&[4, d], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pv = vars(&mut tape, &p);
        let (mu, sigma) = encode_gaussian(&mut tape, xv, &pv).unwrap();
        for r in 0..4 {
            for c in 0..d {
                let mut lin_mu = p.b_mu.data()[c];
                let mut lin_s = p.b_sigma.data()[c];
                for k in 0..d {
                    lin_mu += x.at(r, k) * p.w_mu.at(k, c);
                    lin_s += x.at(r, k) * p.w_sigma.at(k, c);
                }
                let naive = (1.0 + lin_s.exp()).ln();
                assert!((tape.value(sigma).at(r, c) - naive).abs() < 1e-12);
                assert!((tape.value(mu).at(r, c) - lin_mu).abs() < 1e-12);
                assert!(tape.value(sigma).at(r, c) > 0.0);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = VibParams::init(4, 0.5, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let pv = vars(&mut tape, &p);
        assert!(matches!(
            encode_gaussian(&mut tape, x, &pv),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn sample_z_passthrough_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::zeros(&[3, 2]));
        let sigma = tape.constant(Tensor::ones(&[3, 2]));
        let z = sample_z(&mut tape, mu, sigma, Some(&e)).unwrap();
        assert_eq!(tape.value(z), &e);
        let z0 = sample_z(&mut tape, mu, sigma, None).unwrap();
        assert_eq!(tape.value(z0), tape.value(mu));
        let zeros = Tensor::zeros(&[3, 2]);
        let mu2 = tape.constant(e.clone());
        let z1 = sample_z(&mut tape, mu2, sigma, Some(&zeros)).unwrap();
        assert_eq!(tape.value(z1), &e);
    }

    #[test]
    fn sample_z_gradient_skips_noise() {
        let mut tape = Tape::new();
        let mu = tape.param(Tensor::full(&[1, 2], 0.3));
        let sigma = tape.param(Tensor::full(&[1, 2], 2.0));
        let eps = Tensor::new(vec![1, 2], vec![0.5, -1.5]).unwrap();
        let z = sample_z(&mut tape, mu, sigma, Some(&eps)).unwrap();
        let s = tape.sum(z);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(mu).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(tape.grad(sigma).unwrap().data(), &[0.5, -1.5]);
    }

    #[test]
    fn kl_point_values() {
        assert_eq!(kl_value(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!((kl_value(&[1.0], &[1.0]).unwrap() - 0.5).abs() < 1e-12);
        let expected = 0.5 * (4.0 - 1.0) - 2f64.ln();
        assert!((kl_value(&[0.0], &[2.0]).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.80685).abs() < 1e-5);
        assert!(matches!(kl_value(&[0.0], &[0.0]), Err(Error::Domain(_))));
        assert!(matches!(kl_value(&[0.0], &[-1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn kl_tape_rejects_nonpositive_sigma() {
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::zeros(&[1, 2]));
        let sigma = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(
            kl_to_standard_normal(&mut tape, mu, sigma),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn vib_loss_examples() {
        let seg = [Segment { start: 0, len: 3 }];
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::new(vec![3, 1], vec![1.0, 0.0, 5.0]).unwrap());
        let sigma = tape.constant(Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap());

        let none = EntityMask::new(vec![false; 3]);
        let l = vib_loss(&mut tape, mu, sigma, &none, &seg).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let one = EntityMask::new(vec![true, false, false]);
        let l = vib_loss(&mut tape, mu, sigma, &one, &seg).unwrap();
        assert!((tape.value(l).item() - 0.5).abs() < 1e-12);

        let two = EntityMask::new(vec![true, true, false]);
        let l = vib_loss(&mut tape, mu, sigma, &two, &seg).unwrap();
        let kl2 = 1.5 - 2f64.ln();
        assert!((tape.value(l).item() - (0.5 + kl2) / 2.0).abs() < 1e-12);
        assert!(((0.5 + kl2) / 2.0 - 0.653425).abs() < 1e-5);
    }

    #[test]
    fn vib_loss_averages_over_batch() {
        // Second sequence has no entities and contributes zero.
        let segs = [Segment { start: 0, len: 2 }, Segment { start: 2, len: 2 }];
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::new(vec![4, 1], vec![1.0, 1.0, 3.0, 3.0]).unwrap());
        let sigma = tape.constant(Tensor::ones(&[4, 1]));
        let mask = EntityMask::new(vec![true, true, false, false]);
        let l = vib_loss(&mut tape, mu, sigma, &mask, &segs).unwrap();
        assert!((tape.value(l).item() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn blend_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 1], 2.0));
        let z = tape.constant(Tensor::full(&[2, 1], 0.0));
        let mask = EntityMask::new(vec![true, false]);
        let out = blend(&mut tape, x, z, &mask, 0.5).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0]);
        let out = blend(&mut tape, x, z, &mask, 1.0).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 2.0]);
        let out = blend(&mut tape, x, z, &mask, 0.0).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 2.0]);
        assert!(blend(&mut tape, x, z, &mask, 1.5).is_err());
    }

    #[test]
    fn softplus_keeps_sigma_positive_for_extreme_inputs() {
        for x in [-700.0, -40.0, 0.0, 40.0, 700.0] {
            let s = softplus_scalar(x);
            assert!(s >= 0.0 && s.is_finite());
        }
        assert!(softplus_scalar(-30.0) > 0.0);
    }
}
