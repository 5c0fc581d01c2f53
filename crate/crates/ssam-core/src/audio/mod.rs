//! Log-mel spectrogram extraction and patchification.
//!
//! Fixed recipe, chosen once so downstream artifacts are exactly
//! reproducible:
//!
//! * mono 16 kHz input, 25 ms (400-sample) periodic Hann window, 10 ms
//!   (160-sample) hop, 512-point transform (window left-aligned and
//!   zero-padded; the power spectrum is shift-invariant);
//! * frame `t` is centered at sample `t * hop` with reflect padding at the
//!   edges, and `T = round(duration_seconds * 100)`, so a 2-second clip
//!   yields exactly 200 frames;
//! * 80 triangular mel filters spanning 0..8000 Hz on the HTK mel scale
//!   `m = 2595 * log10(1 + f / 700)`, peak height 1, linear in Hz between
//!   mel-spaced corner frequencies;
//! * natural log of `energy + 1e-5`, then per-instance standardization to
//!   mean 0 / std 1 with a std floor of 1e-6 (inputs hitting the floor come
//!   back as all zeros with `degenerate` set).

pub mod wav;

use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Result, SsamError};
use crate::tensor::{Scalar, Tensor};

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW: usize = 400;
pub const HOP: usize = 160;
pub const N_FFT: usize = 512;
pub const N_MELS: usize = 80;
pub const FMAX: f64 = 8_000.0;
pub const LOG_OFFSET: f64 = 1e-5;
pub const STD_FLOOR: f64 = 1e-6;

/// Mono waveform at the required sample rate, samples in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(SsamError::Data(format!(
                "sample rate must be {SAMPLE_RATE} Hz, got {sample_rate}"
            )));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(SsamError::Data("non-finite audio samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// `[T, 80]` standardized log-mel energies.
#[derive(Debug, Clone)]
pub struct Spectrogram<F> {
    pub values: Tensor<F>,
    /// Set when standardization hit the std floor (e.g. all-zero input); the
    /// values are then all zeros.
    pub degenerate: bool,
}

impl<F: Scalar> Spectrogram<F> {
    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Flattened non-overlapping patches of a spectrogram with their geometry.
/// Patch `(gt, gf)` is row `gt * grid_f + gf` (time-major traversal), and
/// within a patch elements are laid out time-then-frequency.
#[derive(Debug, Clone)]
pub struct PatchGrid<F> {
    /// `[N_p, patch_t * patch_f]`.
    pub patches: Tensor<F>,
    pub patch_t: usize,
    pub patch_f: usize,
    pub grid_t: usize,
    pub grid_f: usize,
}

impl<F: Scalar> PatchGrid<F> {
    pub fn n_patches(&self) -> usize {
        self.grid_t * self.grid_f
    }

    pub fn patch_elems(&self) -> usize {
        self.patch_t * self.patch_f
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Corner frequencies of the mel filterbank: `N_MELS + 2` points uniformly
/// spaced on the mel scale from 0 to `FMAX`. Filter `i` rises from point `i`
/// to its center at point `i + 1` and falls to point `i + 2`.
pub fn mel_corner_frequencies() -> Vec<f64> {
    let hi = hz_to_mel(FMAX);
    (0..N_MELS + 2)
        .map(|i| mel_to_hz(hi * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

fn mel_filterbank() -> Vec<Vec<(usize, f64)>> {
    let corners = mel_corner_frequencies();
    let bin_hz = SAMPLE_RATE as f64 / N_FFT as f64;
    let n_bins = N_FFT / 2 + 1;
    (0..N_MELS)
        .map(|i| {
            let (lo, center, hi) = (corners[i], corners[i + 1], corners[i + 2]);
            let mut taps = Vec::new();
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f > lo && f < center {
                    (f - lo) / (center - lo)
                } else if (f - center).abs() < 1e-12 {
                    1.0
                } else if f > center && f < hi {
                    (hi - f) / (hi - center)
                } else {
                    0.0
                };
                if w > 0.0 {
                    taps.push((k, w));
                }
            }
            taps
        })
        .collect()
}

/// Reflect an out-of-range sample index back into `[0, n)` without repeating
/// the edge sample.
fn mirror(s: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = s % period;
    if m < 0 {
        m += period;
    }
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Extract the standardized log-mel spectrogram; see the module docs for the
/// exact recipe. Requires at least one hop of audio.
pub fn log_mel<F: Scalar>(w: &Waveform) -> Result<Spectrogram<F>> {
    let n = w.samples.len();
    if n < HOP {
        return Err(SsamError::Data(format!(
            "input too short: {n} samples, need at least {HOP}"
        )));
    }
    let frames = (n as f64 / HOP as f64).round() as usize;
    let window: Vec<f64> = (0..WINDOW)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / WINDOW as f64).cos()))
        .collect();
    let filters = mel_filterbank();
    let half = WINDOW as isize / 2;

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(N_FFT);

    let mut values = vec![0.0f64; frames * N_MELS];
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    for t in 0..frames {
        let center = (t * HOP) as isize;
        for (i, w_i) in window.iter().enumerate() {
            let src = mirror(center - half + i as isize, n);
            buf[i] = Complex::new(w.samples[src] as f64 * w_i, 0.0);
        }
        for slot in buf.iter_mut().skip(WINDOW) {
            *slot = Complex::new(0.0, 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..N_FFT / 2 + 1]
            .iter()
            .map(|c| c.re * c.re + c.im * c.im)
            .collect();
        for (m, taps) in filters.iter().enumerate() {
            let energy: f64 = taps.iter().map(|&(k, w)| power[k] * w).sum();
            values[t * N_MELS + m] = (energy + LOG_OFFSET).ln();
        }
    }

    // Per-instance standardization.
    let count = values.len() as f64;
    let mean = values.iter().sum::<f64>() / count;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
    let std = var.sqrt();
    let degenerate = std < STD_FLOOR;
    let out: Vec<F> = if degenerate {
        vec![F::zero(); values.len()]
    } else {
        values.iter().map(|&v| F::of_f64((v - mean) / std)).collect()
    };
    Ok(Spectrogram {
        values: Tensor::new([frames, N_MELS], out)?,
        degenerate,
    })
}

/// Cut a `[T, F]` spectrogram into non-overlapping `patch_t x patch_f` tiles.
/// Both extents must divide exactly.
pub fn patchify<F: Scalar>(
    s: &Spectrogram<F>,
    patch_t: usize,
    patch_f: usize,
) -> Result<PatchGrid<F>> {
    let (t, f) = s.values.dims2()?;
    if patch_t == 0 || patch_f == 0 {
        return Err(SsamError::Geometry("patch extents must be positive".into()));
    }
    if t % patch_t != 0 || f % patch_f != 0 {
        return Err(SsamError::Geometry(format!(
            "[{t}, {f}] is not tiled by ({patch_t}, {patch_f})"
        )));
    }
    let grid_t = t / patch_t;
    let grid_f = f / patch_f;
    let elems = patch_t * patch_f;
    let mut patches = Tensor::zeros([grid_t * grid_f, elems]);
    for gt in 0..grid_t {
        for gf in 0..grid_f {
            let p = gt * grid_f + gf;
            for it in 0..patch_t {
                for jf in 0..patch_f {
                    patches.data_mut()[p * elems + it * patch_f + jf] =
                        s.values.data()[(gt * patch_t + it) * f + gf * patch_f + jf];
                }
            }
        }
    }
    Ok(PatchGrid {
        patches,
        patch_t,
        patch_f,
        grid_t,
        grid_f,
    })
}

/// Exact inverse of [`patchify`]. Also reassembles arbitrary per-patch data
/// of the same geometry (e.g. reconstruction error heatmaps).
pub fn unpatchify<F: Scalar>(p: &PatchGrid<F>) -> Result<Spectrogram<F>> {
    let (n_p, elems) = p.patches.dims2()?;
    if n_p != p.grid_t * p.grid_f || elems != p.patch_t * p.patch_f {
        return Err(SsamError::Geometry(format!(
            "patch tensor [{n_p}, {elems}] inconsistent with grid {}x{} of ({}, {})",
            p.grid_t, p.grid_f, p.patch_t, p.patch_f
        )));
    }
    let t = p.grid_t * p.patch_t;
    let f = p.grid_f * p.patch_f;
    let mut values = Tensor::zeros([t, f]);
    for gt in 0..p.grid_t {
        for gf in 0..p.grid_f {
            let row = gt * p.grid_f + gf;
            for it in 0..p.patch_t {
                for jf in 0..p.patch_f {
                    values.data_mut()[(gt * p.patch_t + it) * f + gf * p.patch_f + jf] =
                        p.patches.data()[row * elems + it * p.patch_f + jf];
                }
            }
        }
    }
    Ok(Spectrogram {
        values,
        degenerate: false,
    })
}

/// Test-signal helpers used by the synthetic-dataset tests and the smoke
/// training pipeline.
pub mod synth {
    use super::{Waveform, SAMPLE_RATE};
    use crate::rng::Rng;

    pub fn tone(freq_hz: f64, seconds: f64, amplitude: f64) -> Waveform {
        let n = (seconds * SAMPLE_RATE as f64).round() as usize;
        let samples = (0..n)
            .map(|i| {
                (amplitude
                    * (2.0 * std::f64::consts::PI * freq_hz * i as f64 / SAMPLE_RATE as f64)
                        .sin()) as f32
            })
            .collect();
        Waveform {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    /// A few random tones with slow amplitude modulation and mild noise.
    pub fn clip(rng: &mut Rng, seconds: f64) -> Waveform {
        let n = (seconds * SAMPLE_RATE as f64).round() as usize;
        let n_tones = 2 + rng.below(3);
        let tones: Vec<(f64, f64, f64)> = (0..n_tones)
            .map(|_| {
                (
                    rng.uniform_range(100.0, 6000.0),
                    rng.uniform_range(0.05, 0.3),
                    rng.uniform_range(0.5, 3.0),
                )
            })
            .collect();
        let samples = (0..n)
            .map(|i| {
                let t = i as f64 / SAMPLE_RATE as f64;
                let mut v = 0.0;
                for &(freq, amp, am) in &tones {
                    let env = 0.6 + 0.4 * (2.0 * std::f64::consts::PI * am * t).sin();
                    v += amp * env * (2.0 * std::f64::consts::PI * freq * t).sin();
                }
                v += 0.01 * rng.uniform_range(-1.0, 1.0);
                v as f32
            })
            .collect();
        Waveform {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_seconds_gives_200_by_80() {
        let wav = synth::tone(440.0, 2.0, 0.5);
        let spec: Spectrogram<f32> = log_mel(&wav).unwrap();
        assert_eq!(spec.values.shape(), &[200, 80]);
        assert!(!spec.degenerate);
    }

    #[test]
    fn standardization_invariants() {
        let mut rng = crate::rng::Rng::new(31, 0);
        let wav = synth::clip(&mut rng, 1.3);
        let spec: Spectrogram<f64> = log_mel(&wav).unwrap();
        let mean = spec.values.mean();
        let var = spec
            .values
            .data()
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<f64>()
            / spec.values.numel() as f64;
        assert!(mean.abs() < 1e-5, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-4, "std {}", var.sqrt());
    }

    #[test]
    fn zero_waveform_is_degenerate() {
        let wav = Waveform::new(vec![0.0; 32_000], SAMPLE_RATE).unwrap();
        let spec: Spectrogram<f32> = log_mel(&wav).unwrap();
        assert!(spec.degenerate);
        assert!(spec.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn log_mel_is_deterministic() {
        let wav = synth::tone(523.25, 0.7, 0.3);
        let a: Spectrogram<f32> = log_mel(&wav).unwrap();
        let b: Spectrogram<f32> = log_mel(&wav).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn too_short_input_rejected() {
        let wav = Waveform::new(vec![0.1; HOP - 1], SAMPLE_RATE).unwrap();
        assert!(log_mel::<f32>(&wav).is_err());
    }

    #[test]
    fn pure_tone_peaks_at_nearest_mel_center() {
        let wav = synth::tone(1000.0, 1.0, 0.5);
        let spec: Spectrogram<f64> = log_mel(&wav).unwrap();
        // Mean energy per mel bin over all frames.
        let (t, f) = spec.values.dims2().unwrap();
        let mut mean = vec![0.0f64; f];
        for row in 0..t {
            for (m, acc) in mean.iter_mut().enumerate() {
                *acc += spec.values.data()[row * f + m];
            }
        }
        let argmax = mean
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;

        // Independent derivation: filter centers from the mel formula.
        let corners = mel_corner_frequencies();
        let expected = (0..N_MELS)
            .min_by(|&i, &j| {
                (corners[i + 1] - 1000.0)
                    .abs()
                    .partial_cmp(&(corners[j + 1] - 1000.0).abs())
                    .unwrap()
            })
            .unwrap();
        assert_eq!(argmax, expected, "centers near 1 kHz: {:?}", &corners[expected..expected + 3]);
    }

    #[test]
    fn patch_counts_match_published_table() {
        let wav = synth::tone(440.0, 2.0, 0.4);
        let spec: Spectrogram<f32> = log_mel(&wav).unwrap();
        for (pt, pf, expected) in [(8, 16, 125), (4, 16, 250), (4, 8, 500)] {
            let grid = patchify(&spec, pt, pf).unwrap();
            assert_eq!(grid.n_patches(), expected, "patch ({pt}, {pf})");
        }
    }

    #[test]
    fn patchify_roundtrip_is_exact() {
        let mut rng = crate::rng::Rng::new(32, 0);
        let values: Tensor<f32> = rng.sample_uniform([12, 8], -1.0, 1.0);
        let spec = Spectrogram {
            values: values.clone(),
            degenerate: false,
        };
        let grid = patchify(&spec, 4, 2).unwrap();
        assert_eq!(grid.n_patches(), 3 * 4);
        let back = unpatchify(&grid).unwrap();
        assert_eq!(back.values, values);
    }

    #[test]
    fn single_patch_grid_reshapes() {
        let values = Tensor::new([2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let spec = Spectrogram {
            values: values.clone(),
            degenerate: false,
        };
        let grid = patchify(&spec, 2, 3).unwrap();
        assert_eq!(grid.n_patches(), 1);
        assert_eq!(grid.patches.data(), values.data());
    }

    #[test]
    fn non_divisible_geometry_rejected() {
        let spec = Spectrogram {
            values: Tensor::<f32>::zeros([10, 8]),
            degenerate: false,
        };
        assert!(matches!(
            patchify(&spec, 3, 8),
            Err(SsamError::Geometry(_))
        ));
    }

    #[test]
    fn patch_traversal_is_time_major() {
        // 4x4 spectrogram, 2x2 patches: patch row order must be
        // (t0,f0), (t0,f1), (t1,f0), (t1,f1).
        let values = Tensor::new([4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let spec = Spectrogram {
            values,
            degenerate: false,
        };
        let grid = patchify(&spec, 2, 2).unwrap();
        assert_eq!(grid.patches.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(grid.patches.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(grid.patches.row(2), &[8.0, 9.0, 12.0, 13.0]);
        assert_eq!(grid.patches.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }
}
