//! Non-learned down-sampling baselines: uniform decimation behind an FIR
//! anti-aliasing lowpass filter, and random (non-uniform) down-sampling at a
//! fixed rate. Both emit full-length sequences with zeros at suppressed
//! slots so the same downstream networks evaluate every method.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("decimation factor {d} must divide the window length {t_len}")]
    BadDecimation { d: usize, t_len: usize },
    #[error("decimation factor must be at least 1, got {0}")]
    ZeroDecimation(usize),
    #[error("rate must lie in (0, 1], got {0}")]
    BadRate(f64),
}

/// Linear-phase lowpass filter with unit DC gain.
#[derive(Debug, Clone, PartialEq)]
pub struct FirFilter {
    coefficients: Vec<f64>,
    pub cutoff: f64,
    pub design_order: usize,
}

impl FirFilter {
    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// Magnitude response at normalized frequency `f` (cycles/sample).
    pub fn magnitude_at(&self, f: f64) -> f64 {
        let m = (self.coefficients.len() - 1) as f64 / 2.0;
        let (mut re, mut im) = (0.0, 0.0);
        for (n, h) in self.coefficients.iter().enumerate() {
            let phase = -2.0 * std::f64::consts::PI * f * (n as f64 - m);
            re += h * phase.cos();
            im += h * phase.sin();
        }
        (re * re + im * im).sqrt()
    }

    /// Convolve with symmetric edge padding, preserving length.
    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        let half = (self.coefficients.len() - 1) / 2;
        let t_len = y.len();
        let pick = |idx: isize| -> f64 {
            // symmetric (half-sample) reflection at both edges
            let mut i = idx;
            loop {
                if i < 0 {
                    i = -i - 1;
                } else if i as usize >= t_len {
                    i = 2 * t_len as isize - 1 - i;
                } else {
                    return y[i as usize];
                }
            }
        };
        (0..t_len)
            .map(|t| {
                self.coefficients
                    .iter()
                    .enumerate()
                    .map(|(j, h)| h * pick(t as isize + j as isize - half as isize))
                    .sum()
            })
            .collect()
    }
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    for k in 1..64 {
        term *= (x / (2.0 * k as f64)) * (x / (2.0 * k as f64));
        sum += term;
        if term < 1e-18 * sum {
            break;
        }
    }
    sum
}

const KAISER_BETA: f64 = 5.0;

/// Kaiser-windowed sinc lowpass for decimation by `d`: cutoff `1/(2d)`
/// cycles/sample, `8d + 1` taps, normalized to unit DC gain.
pub fn fir_lowpass_design(d: usize) -> Result<FirFilter, BaselineError> {
    if d == 0 {
        return Err(BaselineError::ZeroDecimation(d));
    }
    let taps = 8 * d + 1;
    let cutoff = 1.0 / (2.0 * d as f64);
    let m = (taps - 1) as f64 / 2.0;
    let i0_beta = bessel_i0(KAISER_BETA);
    let mut h: Vec<f64> = (0..taps)
        .map(|n| {
            let t = n as f64 - m;
            let sinc = if t == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * std::f64::consts::PI * cutoff * t).sin() / (std::f64::consts::PI * t)
            };
            let w = bessel_i0(KAISER_BETA * (1.0 - (t / m) * (t / m)).max(0.0).sqrt()) / i0_beta;
            sinc * w
        })
        .collect();
    let gain: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= gain);
    Ok(FirFilter {
        coefficients: h,
        cutoff,
        design_order: taps - 1,
    })
}

/// Anti-alias filter `y`, then keep every `d`-th filtered sample (positions
/// `0, d, 2d, ...`) and zero the rest, preserving length.
pub fn uniform_downsample(y: &[f64], d: usize) -> Result<Vec<f64>, BaselineError> {
    if d == 0 {
        return Err(BaselineError::ZeroDecimation(d));
    }
    if y.len() % d != 0 {
        return Err(BaselineError::BadDecimation { d, t_len: y.len() });
    }
    let filter = fir_lowpass_design(d)?;
    let filtered = filter.apply(y);
    Ok(filtered
        .iter()
        .enumerate()
        .map(|(t, &v)| if t % d == 0 { v } else { 0.0 })
        .collect())
}

/// Keep `round(rate * T)` slots chosen uniformly at random, zero the rest.
pub fn random_downsample(
    y: &[f64],
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, BaselineError> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(BaselineError::BadRate(rate));
    }
    let t_len = y.len();
    let keep = ((rate * t_len as f64).round() as usize).clamp(1, t_len);
    let mut order: Vec<usize> = (0..t_len).collect();
    // partial Fisher-Yates: the first `keep` entries are the kept slots
    for i in 0..keep {
        let j = rng.gen_range(i..t_len);
        order.swap(i, j);
    }
    let mut z = vec![0.0; t_len];
    for &idx in &order[0..keep] {
        z[idx] = y[idx];
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn dc_gain_is_unity() {
        for d in [1, 2, 3, 4, 6, 8, 12] {
            let f = fir_lowpass_design(d).unwrap();
            let sum: f64 = f.coefficients().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "d={d}: {sum}");
            assert_eq!(f.coefficients().len(), 8 * d + 1);
        }
    }

    #[test]
    fn coefficients_are_symmetric() {
        for d in [2, 4, 6] {
            let f = fir_lowpass_design(d).unwrap();
            let h = f.coefficients();
            for i in 0..h.len() / 2 {
                assert!((h[i] - h[h.len() - 1 - i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn constant_signal_passes_unchanged() {
        let f = fir_lowpass_design(4).unwrap();
        let y = vec![3.7; 24];
        for v in f.apply(&y) {
            assert!((v - 3.7).abs() < 1e-9);
        }
    }

    #[test]
    fn stopband_attenuation_at_least_20db() {
        for d in [2, 3, 4, 6, 8, 12] {
            let f = fir_lowpass_design(d).unwrap();
            let mag = f.magnitude_at(1.5 * f.cutoff);
            assert!(
                mag < 0.1,
                "d={d}: |H(1.5 fc)| = {mag} ({} dB)",
                -20.0 * mag.log10()
            );
        }
    }

    #[test]
    fn uniform_d1_is_identity_filtering() {
        let y: Vec<f64> = (0..24).map(|i| (i as f64 * 0.7).sin() + 2.0).collect();
        let z = uniform_downsample(&y, 1).unwrap();
        // d=1 sinc is the unit impulse, so the signal passes through
        for (a, b) in z.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(z.iter().filter(|&&v| v != 0.0).count(), 24);
    }

    #[test]
    fn uniform_d4_keeps_six_aligned_slots() {
        let y = vec![5.0; 24];
        let z = uniform_downsample(&y, 4).unwrap();
        for (t, &v) in z.iter().enumerate() {
            if t % 4 == 0 {
                assert!((v - 5.0).abs() < 1e-9, "slot {t}: {v}");
            } else {
                assert_eq!(v, 0.0);
            }
        }
        assert_eq!(z.iter().filter(|&&v| v != 0.0).count(), 6);
    }

    #[test]
    fn uniform_rejects_non_dividing_factor() {
        let y = vec![1.0; 24];
        assert!(matches!(
            uniform_downsample(&y, 5),
            Err(BaselineError::BadDecimation { d: 5, t_len: 24 })
        ));
    }

    #[test]
    fn random_full_rate_is_identity() {
        let y: Vec<f64> = (1..=24).map(|i| i as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random_downsample(&y, 1.0, &mut rng).unwrap();
        assert_eq!(z, y);
    }

    #[test]
    fn random_quarter_rate_keeps_six() {
        let y = vec![1.0; 24];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let z = random_downsample(&y, 0.25, &mut rng).unwrap();
            assert_eq!(z.iter().filter(|&&v| v != 0.0).count(), 6);
        }
    }

    #[test]
    fn random_is_seed_deterministic() {
        let y: Vec<f64> = (0..24).map(|i| i as f64 + 1.0).collect();
        let mut a = ChaCha8Rng::seed_from_u64(33);
        let mut b = ChaCha8Rng::seed_from_u64(33);
        assert_eq!(
            random_downsample(&y, 0.5, &mut a).unwrap(),
            random_downsample(&y, 0.5, &mut b).unwrap()
        );
    }

    #[test]
    fn random_inclusion_is_uniform() {
        // 1e4 draws at rate 0.25 over T=24: inclusion count per slot is
        // Binomial(1e4, 0.25); check a 4-sigma band.
        let y = vec![1.0; 24];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = [0usize; 24];
        let draws = 10_000;
        for _ in 0..draws {
            let z = random_downsample(&y, 0.25, &mut rng).unwrap();
            for (t, &v) in z.iter().enumerate() {
                if v != 0.0 {
                    counts[t] += 1;
                }
            }
        }
        let mean = draws as f64 * 0.25;
        let sigma = (draws as f64 * 0.25 * 0.75).sqrt();
        for (t, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - mean).abs() < 4.0 * sigma,
                "slot {t}: {c} vs {mean} +- {sigma}"
            );
        }
    }

    #[test]
    fn bad_rate_rejected() {
        let y = vec![1.0; 24];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(random_downsample(&y, 0.0, &mut rng).is_err());
        assert!(random_downsample(&y, 1.5, &mut rng).is_err());
    }
}
