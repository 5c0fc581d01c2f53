//! Linear time-invariant structured state-space core with a diagonal state.
//!
//! A continuous system `h'(t) = A h(t) + B x(t)`, `y(t) = C h(t)` is
//! discretized with timescale `delta` and then evaluated either as a
//! sequential recurrence or as a causal convolution with a materialized
//! kernel. The two routes are algebraically identical and the tests hold them
//! to that.
//!
//! `A` is real diagonal throughout, matching how the selective path uses the
//! state; a dense-matrix oracle for small general `A` lives in the tests.

use num_traits::Float;
use rustfft::{num_complex::Complex, FftNum, FftPlanner};

use crate::error::{Result, SsamError};
use crate::tensor::Scalar;

/// Continuous-time parameters with diagonal `A`. Stability of the recurrence
/// requires every `a[i] < 0`; `delta` must be nonnegative.
#[derive(Debug, Clone)]
pub struct SsmParams<F> {
    pub a: Vec<F>,
    pub b: Vec<F>,
    pub c: Vec<F>,
    pub delta: F,
}

/// Discretized parameters. With `a[i] < 0` and `delta > 0`,
/// `0 < a_bar[i] < 1`.
#[derive(Debug, Clone)]
pub struct DiscretizedSsm<F> {
    pub a_bar: Vec<F>,
    pub b_bar: Vec<F>,
}

/// Truncated convolution kernel `k[j] = sum_i c[i] * a_bar[i]^j * b_bar[i]`.
#[derive(Debug, Clone)]
pub struct SsmKernel<F> {
    pub k: Vec<F>,
}

/// `(exp(x) - 1) / x`, continuous at 0. Below `|x| = 1e-4` the Taylor
/// polynomial `1 + x/2 + x^2/6 + x^3/24` is exact to double precision.
fn expm1_over_x<F: Float>(x: F) -> F {
    let half = F::from(0.5).unwrap();
    let sixth = F::from(1.0 / 6.0).unwrap();
    let twenty_fourth = F::from(1.0 / 24.0).unwrap();
    if x.abs() < F::from(1e-4).unwrap() {
        F::one() + x * (half + x * (sixth + x * twenty_fourth))
    } else {
        x.exp_m1() / x
    }
}

fn check_finite<F: Scalar>(name: &str, values: &[F]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(SsamError::Param(format!("non-finite entry in {name}")));
    }
    Ok(())
}

fn validate_params<F: Scalar>(p: &SsmParams<F>) -> Result<()> {
    if p.a.len() != p.b.len() || p.a.len() != p.c.len() {
        return Err(SsamError::Shape(format!(
            "state dims disagree: a={}, b={}, c={}",
            p.a.len(),
            p.b.len(),
            p.c.len()
        )));
    }
    check_finite("a", &p.a)?;
    check_finite("b", &p.b)?;
    check_finite("c", &p.c)?;
    if !p.delta.is_finite() || p.delta < F::zero() {
        return Err(SsamError::Param(format!("delta must be >= 0, got {}", p.delta)));
    }
    Ok(())
}

/// Zero-order-hold discretization:
/// `a_bar = exp(delta * a)` and `b_bar = (delta * a)^-1 (exp(delta * a) - 1) * delta * b`,
/// evaluated as `delta * b * expm1(delta * a) / (delta * a)` so `a = 0` takes
/// its limit `b_bar = delta * b`.
pub fn discretize_zoh<F: Scalar>(p: &SsmParams<F>) -> Result<DiscretizedSsm<F>> {
    validate_params(p)?;
    let mut a_bar = Vec::with_capacity(p.a.len());
    let mut b_bar = Vec::with_capacity(p.a.len());
    for (&a, &b) in p.a.iter().zip(&p.b) {
        let x = p.delta * a;
        a_bar.push(x.exp());
        b_bar.push(p.delta * b * expm1_over_x(x));
    }
    Ok(DiscretizedSsm { a_bar, b_bar })
}

/// Simplified (forward-Euler) rule for the input projection:
/// `a_bar = exp(delta * a)` as in ZOH, but `b_bar = delta * b`. This is the
/// rule the selective scan applies to its per-step inputs, so the reduction
/// test between the two paths uses it.
pub fn discretize_euler<F: Scalar>(p: &SsmParams<F>) -> Result<DiscretizedSsm<F>> {
    validate_params(p)?;
    let a_bar = p.a.iter().map(|&a| (p.delta * a).exp()).collect();
    let b_bar = p.b.iter().map(|&b| p.delta * b).collect();
    Ok(DiscretizedSsm { a_bar, b_bar })
}

/// Sequential evaluation of `h_t = a_bar ⊙ h_{t-1} + b_bar * x_t`,
/// `y_t = c · h_t`. `h0` defaults to the zero state.
pub fn ssm_recurrence<F: Scalar>(
    d: &DiscretizedSsm<F>,
    c: &[F],
    x: &[F],
    h0: Option<&[F]>,
) -> Result<Vec<F>> {
    let n = d.a_bar.len();
    if d.b_bar.len() != n || c.len() != n {
        return Err(SsamError::Shape(format!(
            "state dims disagree: a_bar={}, b_bar={}, c={}",
            n,
            d.b_bar.len(),
            c.len()
        )));
    }
    let mut h = match h0 {
        Some(h0) => {
            if h0.len() != n {
                return Err(SsamError::Shape(format!(
                    "initial state has {} entries, expected {n}",
                    h0.len()
                )));
            }
            h0.to_vec()
        }
        None => vec![F::zero(); n],
    };
    let mut y = Vec::with_capacity(x.len());
    for &xt in x {
        let mut acc = F::zero();
        for i in 0..n {
            h[i] = d.a_bar[i] * h[i] + d.b_bar[i] * xt;
            acc = acc + c[i] * h[i];
        }
        y.push(acc);
    }
    Ok(y)
}

/// Kernel of length `m` via iterated elementwise powers of the diagonal
/// `a_bar`; cost `O(m * n)`.
pub fn materialize_kernel<F: Scalar>(
    d: &DiscretizedSsm<F>,
    c: &[F],
    m: usize,
) -> Result<SsmKernel<F>> {
    if m == 0 {
        return Err(SsamError::Param("kernel length must be >= 1".into()));
    }
    let n = d.a_bar.len();
    if d.b_bar.len() != n || c.len() != n {
        return Err(SsamError::Shape(format!(
            "state dims disagree: a_bar={}, b_bar={}, c={}",
            n,
            d.b_bar.len(),
            c.len()
        )));
    }
    // p holds a_bar^j ⊙ b_bar; k[j] = c · p.
    let mut p = d.b_bar.clone();
    let mut k = Vec::with_capacity(m);
    for j in 0..m {
        let mut acc = F::zero();
        for i in 0..n {
            acc = acc + c[i] * p[i];
        }
        k.push(acc);
        if j + 1 < m {
            for i in 0..n {
                p[i] = p[i] * d.a_bar[i];
            }
        }
    }
    Ok(SsmKernel { k })
}

/// Direct causal convolution `y_t = sum_{j=0..t} k[j] * x_{t-j}` with a
/// kernel truncated to the input length.
pub fn causal_convolve<F: Scalar>(x: &[F], kernel: &SsmKernel<F>) -> Result<Vec<F>> {
    if kernel.k.len() != x.len() {
        return Err(SsamError::Shape(format!(
            "kernel length {} != input length {}",
            kernel.k.len(),
            x.len()
        )));
    }
    let m = x.len();
    let mut y = Vec::with_capacity(m);
    for t in 0..m {
        let mut acc = F::zero();
        for j in 0..=t {
            acc = acc + kernel.k[j] * x[t - j];
        }
        y.push(acc);
    }
    Ok(y)
}

/// FFT route for the same convolution. Optional fast path; the direct method
/// above is the contract and the tests pin this one to it.
pub fn causal_convolve_fft<F: Scalar + FftNum>(x: &[F], kernel: &SsmKernel<F>) -> Result<Vec<F>> {
    if kernel.k.len() != x.len() {
        return Err(SsamError::Shape(format!(
            "kernel length {} != input length {}",
            kernel.k.len(),
            x.len()
        )));
    }
    let m = x.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let size = (2 * m).next_power_of_two();
    let mut planner = FftPlanner::<F>::new();
    let fft = planner.plan_fft_forward(size);
    let ifft = planner.plan_fft_inverse(size);

    let lift = |src: &[F]| {
        let mut buf = vec![Complex::new(F::zero(), F::zero()); size];
        for (dst, &v) in buf.iter_mut().zip(src) {
            dst.re = v;
        }
        buf
    };
    let mut fx = lift(x);
    let mut fk = lift(&kernel.k);
    fft.process(&mut fx);
    fft.process(&mut fk);
    for (a, b) in fx.iter_mut().zip(&fk) {
        *a = *a * *b;
    }
    ifft.process(&mut fx);
    let scale = F::one() / F::from_usize(size).unwrap();
    Ok(fx[..m].iter().map(|v| v.re * scale).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn zoh_golden_values() {
        let ln2 = std::f64::consts::LN_2;
        let d = discretize_zoh(&SsmParams {
            a: vec![-1.0],
            b: vec![1.0],
            c: vec![1.0],
            delta: ln2,
        })
        .unwrap();
        assert!(close(d.a_bar[0], 0.5, 1e-12));
        assert!(close(d.b_bar[0], 0.5, 1e-12));
    }

    #[test]
    fn zoh_zero_delta() {
        let d = discretize_zoh(&SsmParams {
            a: vec![-3.0, 0.7],
            b: vec![2.0, -1.0],
            c: vec![1.0, 1.0],
            delta: 0.0,
        })
        .unwrap();
        assert_eq!(d.a_bar, vec![1.0, 1.0]);
        assert_eq!(d.b_bar, vec![0.0, 0.0]);
    }

    #[test]
    fn zoh_a_zero_limit() {
        let d = discretize_zoh(&SsmParams {
            a: vec![0.0],
            b: vec![2.0],
            c: vec![1.0],
            delta: 0.25,
        })
        .unwrap();
        assert!(close(d.a_bar[0], 1.0, 1e-12));
        assert!(close(d.b_bar[0], 0.5, 1e-12));
    }

    #[test]
    fn zoh_series_branch_matches_direct_form() {
        // Just above and below the series cutoff the two branches agree.
        for &a in &[-1.0001e-4, -0.9999e-4, 5e-5, 2e-4] {
            let p = SsmParams {
                a: vec![a],
                b: vec![1.3],
                c: vec![1.0],
                delta: 1.0,
            };
            let d = discretize_zoh(&p).unwrap();
            let exact = 1.3 * f64::exp_m1(a) / a;
            assert!(close(d.b_bar[0], exact, 1e-15), "a={a}");
        }
    }

    #[test]
    fn zoh_rejects_non_finite() {
        let p = SsmParams {
            a: vec![f64::NAN],
            b: vec![1.0],
            c: vec![1.0],
            delta: 0.1,
        };
        assert!(matches!(discretize_zoh(&p), Err(SsamError::Param(_))));
    }

    #[test]
    fn recurrence_hand_unrolled() {
        let d = DiscretizedSsm {
            a_bar: vec![0.5],
            b_bar: vec![1.0],
        };
        let y = ssm_recurrence(&d, &[1.0], &[1.0, 0.0, 0.0], None).unwrap();
        assert_eq!(y, vec![1.0, 0.5, 0.25]);
    }

    #[test]
    fn recurrence_zero_input_zero_state() {
        let d = DiscretizedSsm {
            a_bar: vec![0.9, 0.3],
            b_bar: vec![1.0, -2.0],
        };
        let y = ssm_recurrence(&d, &[1.0, 4.0], &[0.0; 16], None).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recurrence_single_step_definition() {
        let d = DiscretizedSsm {
            a_bar: vec![0.7, 0.2],
            b_bar: vec![0.4, 1.5],
        };
        let c = [2.0, -1.0];
        let h0 = [0.3, -0.6];
        let x1 = 1.25;
        let y = ssm_recurrence(&d, &c, &[x1], Some(&h0)).unwrap();
        let expected: f64 = (0..2)
            .map(|i| c[i] * (d.a_bar[i] * h0[i] + d.b_bar[i] * x1))
            .sum();
        assert!(close(y[0], expected, 1e-15));
    }

    #[test]
    fn kernel_hand_values() {
        let d = DiscretizedSsm {
            a_bar: vec![0.5],
            b_bar: vec![1.0],
        };
        let k = materialize_kernel(&d, &[1.0], 3).unwrap();
        assert_eq!(k.k, vec![1.0, 0.5, 0.25]);
        let k1 = materialize_kernel(&d, &[1.0], 1).unwrap();
        assert_eq!(k1.k, vec![1.0]);
        let kz = materialize_kernel(&d, &[0.0], 5).unwrap();
        assert!(kz.k.iter().all(|&v| v == 0.0));
        assert!(matches!(
            materialize_kernel(&d, &[1.0], 0),
            Err(SsamError::Param(_))
        ));
    }

    #[test]
    fn convolve_impulse_and_hand_case() {
        let mut k = vec![0.0; 4];
        k[0] = 1.0;
        let x = vec![3.0, -1.0, 2.0, 0.5];
        let y = causal_convolve(&x, &SsmKernel { k }).unwrap();
        assert_eq!(y, x);

        let y2 = causal_convolve(&[1.0, 1.0], &SsmKernel { k: vec![1.0, 0.5] }).unwrap();
        assert_eq!(y2, vec![1.0, 1.5]);
    }

    fn random_stable_case(rng: &mut Rng, max_n: usize, max_m: usize) -> (SsmParams<f64>, Vec<f64>) {
        let n = 1 + rng.below(max_n);
        let m = 1 + rng.below(max_m);
        let p = SsmParams {
            a: (0..n).map(|_| rng.uniform_range(-2.0, -0.01)).collect(),
            b: (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
            c: (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
            delta: rng.uniform_range(0.01, 1.0),
        };
        let x: Vec<f64> = (0..m).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        (p, x)
    }

    #[test]
    fn recurrence_matches_convolution_on_random_cases() {
        let mut rng = Rng::new(11, 0);
        for _ in 0..40 {
            let (p, x) = random_stable_case(&mut rng, 16, 256);
            let d = discretize_zoh(&p).unwrap();
            let y_rec = ssm_recurrence(&d, &p.c, &x, None).unwrap();
            let k = materialize_kernel(&d, &p.c, x.len()).unwrap();
            let y_conv = causal_convolve(&x, &k).unwrap();
            let max_diff = y_rec
                .iter()
                .zip(&y_conv)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_diff < 1e-10, "max diff {max_diff}");
        }
    }

    #[test]
    fn fft_convolution_matches_direct() {
        let mut rng = Rng::new(12, 0);
        for _ in 0..10 {
            let (p, x) = random_stable_case(&mut rng, 8, 200);
            let d = discretize_zoh(&p).unwrap();
            let k = materialize_kernel(&d, &p.c, x.len()).unwrap();
            let direct = causal_convolve(&x, &k).unwrap();
            let fft = causal_convolve_fft(&x, &k).unwrap();
            let max_diff = direct
                .iter()
                .zip(&fft)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_diff < 1e-10, "max diff {max_diff}");
        }
    }

    #[test]
    fn stability_bounded_outputs() {
        let mut rng = Rng::new(13, 0);
        let (p, _) = random_stable_case(&mut rng, 16, 1);
        let d = discretize_zoh(&p).unwrap();
        let m = 4096;
        let x: Vec<f64> = (0..m)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let y = ssm_recurrence(&d, &p.c, &x, None).unwrap();
        // Geometric-series bound: |y_t| <= sum_i |c_i| |b_bar_i| / (1 - a_bar_i).
        let bound: f64 = (0..p.a.len())
            .map(|i| (p.c[i] * d.b_bar[i]).abs() / (1.0 - d.a_bar[i]))
            .sum();
        assert!(y.iter().all(|v| v.is_finite() && v.abs() <= bound + 1e-9));
    }

    // Dense-matrix oracle: general A via matrix exponential of the augmented
    // system, reduced to the diagonal path when A is diagonal.
    mod dense_oracle {
        use super::*;

        fn mat_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for k in 0..n {
                    let v = a[i * n + k];
                    for j in 0..n {
                        out[i * n + j] += v * b[k * n + j];
                    }
                }
            }
            out
        }

        /// Scaling-and-squaring Taylor matrix exponential, ample for n <= 5.
        fn expm(m: &[f64], n: usize) -> Vec<f64> {
            let norm: f64 = m.iter().map(|v| v.abs()).fold(0.0, f64::max) * n as f64;
            let s = if norm > 0.5 {
                (norm / 0.5).log2().ceil() as u32
            } else {
                0
            };
            let scale = 1.0 / f64::powi(2.0, s as i32);
            let scaled: Vec<f64> = m.iter().map(|v| v * scale).collect();
            let mut result = vec![0.0; n * n];
            for i in 0..n {
                result[i * n + i] = 1.0;
            }
            let mut term = result.clone();
            for k in 1..30 {
                term = mat_mul(&term, &scaled, n);
                for v in term.iter_mut() {
                    *v /= k as f64;
                }
                for (r, &t) in result.iter_mut().zip(&term) {
                    *r += t;
                }
            }
            for _ in 0..s {
                result = mat_mul(&result, &result, n);
            }
            result
        }

        /// ZOH for general A via exp of the augmented matrix
        /// [[A, B], [0, 0]] * delta, whose top-right column is b_bar.
        fn discretize_dense(a: &[f64], b: &[f64], n: usize, delta: f64) -> (Vec<f64>, Vec<f64>) {
            let aug_n = n + 1;
            let mut aug = vec![0.0; aug_n * aug_n];
            for i in 0..n {
                for j in 0..n {
                    aug[i * aug_n + j] = a[i * n + j] * delta;
                }
                aug[i * aug_n + n] = b[i] * delta;
            }
            let e = expm(&aug, aug_n);
            let mut a_bar = vec![0.0; n * n];
            let mut b_bar = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    a_bar[i * n + j] = e[i * aug_n + j];
                }
                b_bar[i] = e[i * aug_n + n];
            }
            (a_bar, b_bar)
        }

        fn dense_recurrence(
            a_bar: &[f64],
            b_bar: &[f64],
            c: &[f64],
            x: &[f64],
            n: usize,
        ) -> Vec<f64> {
            let mut h = vec![0.0; n];
            let mut y = Vec::with_capacity(x.len());
            for &xt in x {
                let mut next = vec![0.0; n];
                for i in 0..n {
                    let mut acc = b_bar[i] * xt;
                    for j in 0..n {
                        acc += a_bar[i * n + j] * h[j];
                    }
                    next[i] = acc;
                }
                h = next;
                y.push(h.iter().zip(c).map(|(hi, ci)| hi * ci).sum());
            }
            y
        }

        #[test]
        fn dense_oracle_agrees_with_diagonal_path() {
            let mut rng = Rng::new(17, 0);
            for _ in 0..20 {
                let n = 1 + rng.below(4);
                let p = SsmParams {
                    a: (0..n).map(|_| rng.uniform_range(-2.0, -0.05)).collect(),
                    b: (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
                    c: (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
                    delta: rng.uniform_range(0.05, 0.8),
                };
                let x: Vec<f64> = (0..32).map(|_| rng.uniform_range(-1.0, 1.0)).collect();

                let diag = discretize_zoh(&p).unwrap();
                let y_diag = ssm_recurrence(&diag, &p.c, &x, None).unwrap();

                let mut a_dense = vec![0.0; n * n];
                for i in 0..n {
                    a_dense[i * n + i] = p.a[i];
                }
                let (a_bar, b_bar) = discretize_dense(&a_dense, &p.b, n, p.delta);
                for i in 0..n {
                    assert!((a_bar[i * n + i] - diag.a_bar[i]).abs() < 1e-12);
                    assert!((b_bar[i] - diag.b_bar[i]).abs() < 1e-12);
                }
                let y_dense = dense_recurrence(&a_bar, &b_bar, &p.c, &x, n);
                let max_diff = y_diag
                    .iter()
                    .zip(&y_dense)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(max_diff < 1e-10, "max diff {max_diff}");
            }
        }
    }
}
