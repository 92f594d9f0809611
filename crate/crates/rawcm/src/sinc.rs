//! Fixed sinc band-pass filterbank front-end.
//!
//! Each filter is an ideal band-pass (difference of two sinc low-passes)
//! truncated to an odd length, Hamming-windowed, and DC-nulled. Taps are
//! computed from the integer distance to the center tap, so every impulse
//! response is symmetric bit-for-bit: the bank is linear-phase by
//! construction. The bank is fixed — it never enters the trainable
//! parameter set.

use crate::error::{Error, Result};
use crate::tensor::{BnState, Mode, Scalar, Tape, Tensor, Var};
use rustfft::{num_complex::Complex, FftPlanner};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

/// Frequency warp used to place the band edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleKind {
    /// Mel-spaced bands: resolution concentrated at low frequencies.
    Mel,
    /// Mel warp mirrored about the band midpoint: resolution at high frequencies.
    InverseMel,
    /// Equal bandwidths in Hz.
    Linear,
}

impl fmt::Display for ScaleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ScaleKind::Mel => "mel",
            ScaleKind::InverseMel => "inverse_mel",
            ScaleKind::Linear => "linear",
        };
        f.write_str(s)
    }
}

impl FromStr for ScaleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mel" => Ok(ScaleKind::Mel),
            "inverse_mel" | "inverse-mel" | "imel" => Ok(ScaleKind::InverseMel),
            "linear" => Ok(ScaleKind::Linear),
            other => Err(Error::Config(format!(
                "unknown scale '{other}' (expected mel, inverse_mel or linear)"
            ))),
        }
    }
}

/// HTK Mel warp: m = 2595 log10(1 + f/700).
pub fn mel_from_hz(f: f64) -> Result<f64> {
    if f < 0.0 {
        return Err(Error::InvalidArg(format!("negative frequency {f} Hz")));
    }
    Ok(2595.0 * (1.0 + f / 700.0).log10())
}

/// Inverse of [`mel_from_hz`].
pub fn hz_from_mel(m: f64) -> Result<f64> {
    if m < 0.0 {
        return Err(Error::InvalidArg(format!("negative mel value {m}")));
    }
    Ok(700.0 * (10f64.powf(m / 2595.0) - 1.0))
}

/// Band edges for `n_filters` overlapping filters between `f_min` and `f_max`.
///
/// `n_filters + 2` points are placed equally in the warped domain; filter `i`
/// spans points `(i, i+2)`, so adjacent bands overlap by one edge.
pub fn make_band_edges(
    scale: ScaleKind,
    n_filters: usize,
    f_min: f64,
    f_max: f64,
) -> Result<Vec<(f64, f64)>> {
    let pts = edge_points(scale, n_filters, f_min, f_max)?;
    Ok((0..n_filters).map(|i| (pts[i], pts[i + 2])).collect())
}

/// The `n_filters + 2` edge points in Hz, equally spaced in the warped domain.
fn edge_points(scale: ScaleKind, n_filters: usize, f_min: f64, f_max: f64) -> Result<Vec<f64>> {
    if n_filters == 0 {
        return Err(Error::InvalidArg("n_filters must be >= 1".into()));
    }
    if !(0.0 < f_min && f_min < f_max) {
        return Err(Error::InvalidArg(format!(
            "invalid band range [{f_min}, {f_max}] Hz"
        )));
    }
    let n_pts = n_filters + 2;
    match scale {
        ScaleKind::Linear => Ok((0..n_pts)
            .map(|i| f_min + (f_max - f_min) * i as f64 / (n_pts - 1) as f64)
            .collect()),
        ScaleKind::Mel => {
            let m_lo = mel_from_hz(f_min)?;
            let m_hi = mel_from_hz(f_max)?;
            (0..n_pts)
                .map(|i| hz_from_mel(m_lo + (m_hi - m_lo) * i as f64 / (n_pts - 1) as f64))
                .collect()
        }
        ScaleKind::InverseMel => {
            // mirror the Mel points about the band midpoint
            let mel_pts = edge_points(ScaleKind::Mel, n_filters, f_min, f_max)?;
            Ok(mel_pts.iter().rev().map(|&p| f_min + f_max - p).collect())
        }
    }
}

/// One windowed band-pass impulse response of odd length.
///
/// h[n] = (2 f2 sinc(2 pi f2 t) - 2 f1 sinc(2 pi f1 t)) w[n], t centered on
/// zero, w Hamming. Residual DC from truncation is removed by subtracting a
/// scaled copy of the window, which keeps the response symmetric and leaves
/// the passband essentially untouched.
pub fn sinc_kernel(f_low: f64, f_high: f64, kernel_len: usize, sample_rate: f64) -> Result<Vec<f64>> {
    if kernel_len % 2 == 0 {
        return Err(Error::InvalidArg(format!(
            "kernel length must be odd, got {kernel_len}"
        )));
    }
    if !(f_low < f_high) {
        return Err(Error::InvalidArg(format!(
            "band requires f_low < f_high, got [{f_low}, {f_high}]"
        )));
    }
    if f_low <= 0.0 || f_high > sample_rate / 2.0 {
        return Err(Error::InvalidArg(format!(
            "band [{f_low}, {f_high}] outside (0, {}]",
            sample_rate / 2.0
        )));
    }
    let center = (kernel_len - 1) / 2;
    // taps indexed by distance from the center so the mirror halves are
    // computed with identical float ops
    let lowpass = |f: f64, d: usize| -> f64 {
        if d == 0 {
            2.0 * f
        } else {
            let x = 2.0 * PI * f * d as f64 / sample_rate;
            2.0 * f * x.sin() / x
        }
    };
    let window = |d: usize| 0.54 + 0.46 * (2.0 * PI * d as f64 / (kernel_len - 1) as f64).cos();
    let mut h = vec![0.0; kernel_len];
    let mut w = vec![0.0; kernel_len];
    for i in 0..kernel_len {
        let d = i.abs_diff(center);
        w[i] = window(d);
        h[i] = (lowpass(f_high, d) - lowpass(f_low, d)) * w[i];
    }
    let dc: f64 = h.iter().sum();
    let wsum: f64 = w.iter().sum();
    let c = dc / wsum;
    for (hi, wi) in h.iter_mut().zip(&w) {
        *hi -= c * *wi;
    }
    Ok(h)
}

/// A built bank of fixed band-pass filters.
#[derive(Debug, Clone)]
pub struct SincFilterbank {
    pub n_filters: usize,
    pub kernel_len: usize,
    pub sample_rate: f64,
    pub scale: ScaleKind,
    /// (f_low, f_high) per filter, Hz.
    pub cutoffs: Vec<(f64, f64)>,
    /// Impulse responses, shape [n_filters, 1, kernel_len].
    pub kernels: Tensor<f64>,
}

impl SincFilterbank {
    pub fn build(
        scale: ScaleKind,
        n_filters: usize,
        kernel_len: usize,
        sample_rate: f64,
        f_min: f64,
        f_max: f64,
    ) -> Result<Self> {
        if f_max > sample_rate / 2.0 {
            return Err(Error::InvalidArg(format!(
                "f_max {f_max} above Nyquist {}",
                sample_rate / 2.0
            )));
        }
        let cutoffs = make_band_edges(scale, n_filters, f_min, f_max)?;
        let mut data = Vec::with_capacity(n_filters * kernel_len);
        for &(lo, hi) in &cutoffs {
            data.extend(sinc_kernel(lo, hi, kernel_len, sample_rate)?);
        }
        let kernels = Tensor::new(vec![n_filters, 1, kernel_len], data)?;
        Ok(SincFilterbank {
            n_filters,
            kernel_len,
            sample_rate,
            scale,
            cutoffs,
            kernels,
        })
    }

    /// Kernels converted to the model dtype.
    pub fn kernels_as<F: Scalar>(&self) -> Tensor<F> {
        self.kernels.cast()
    }

    /// Magnitude of the `n_fft`-point DFT of filter `idx`, as (freq Hz, |H|)
    /// pairs over [0, Nyquist].
    pub fn magnitude_response(&self, idx: usize, n_fft: usize) -> Vec<(f64, f64)> {
        let taps = &self.kernels.data[idx * self.kernel_len..(idx + 1) * self.kernel_len];
        magnitude_response(taps, n_fft, self.sample_rate)
    }
}

/// |DFT| of `taps` zero-padded to `n_fft`, over the non-negative frequencies.
pub fn magnitude_response(taps: &[f64], n_fft: usize, sample_rate: f64) -> Vec<(f64, f64)> {
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut buf: Vec<Complex<f64>> = taps
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(n_fft)
        .collect();
    fft.process(&mut buf);
    buf.iter()
        .take(n_fft / 2 + 1)
        .enumerate()
        .map(|(k, c)| (k as f64 * sample_rate / n_fft as f64, c.norm()))
        .collect()
}

/// Front-end pipeline: sinc conv -> maxpool(3) -> batch norm -> leaky ReLU.
///
/// `waveform` must be a [1, expected_len] leaf on `tape`; the bank kernels are
/// registered as a non-trainable leaf. No input layer normalization is
/// applied.
#[allow(clippy::too_many_arguments)]
pub fn frontend_forward<F: Scalar>(
    tape: &mut Tape<F>,
    waveform: Var,
    bank: &SincFilterbank,
    expected_len: usize,
    gamma: Var,
    beta: Var,
    bn_state: &mut BnState<F>,
    mode: Mode,
    leaky_slope: F,
) -> Result<Var> {
    let shape = &tape.value(waveform).shape;
    if shape.len() != 2 || shape[0] != 1 || shape[1] != expected_len {
        return Err(Error::Shape(format!(
            "front-end expects input [1, {expected_len}], got {shape:?}"
        )));
    }
    let kernels = tape.leaf(bank.kernels_as::<F>(), false);
    let conv = tape.conv1d(waveform, kernels, 1)?;
    let pooled = tape.maxpool1d(conv, 3)?;
    let normed = tape.batch_norm(pooled, gamma, beta, bn_state, mode)?;
    Ok(tape.leaky_relu(normed, leaky_slope))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SR: f64 = 16000.0;

    #[test]
    fn mel_formula_known_values() {
        assert_eq!(mel_from_hz(0.0).unwrap(), 0.0);
        let m700 = mel_from_hz(700.0).unwrap();
        assert!((m700 - 2595.0 * 2f64.log10()).abs() < 1e-9, "{m700}");
        assert!((m700 - 781.17).abs() < 0.01);
        assert!(mel_from_hz(-1.0).is_err());
    }

    #[test]
    fn mel_round_trip() {
        for f in [1.0, 30.0, 700.0, 4000.0, 7900.0] {
            let back = hz_from_mel(mel_from_hz(f).unwrap()).unwrap();
            assert!((back - f).abs() < 1e-9, "{f} -> {back}");
        }
    }

    #[test]
    fn linear_edges_are_arithmetic() {
        let bands = make_band_edges(ScaleKind::Linear, 3, 100.0, 500.0).unwrap();
        let expect = [(100.0, 300.0), (200.0, 400.0), (300.0, 500.0)];
        for (b, e) in bands.iter().zip(expect) {
            assert!((b.0 - e.0).abs() < 1e-12 && (b.1 - e.1).abs() < 1e-12, "{b:?}");
        }
    }

    #[test]
    fn linear_bandwidths_equal() {
        let bands = make_band_edges(ScaleKind::Linear, 128, 30.0, SR / 2.0 - 100.0).unwrap();
        let bw0 = bands[0].1 - bands[0].0;
        for b in &bands {
            assert!((b.1 - b.0 - bw0).abs() < 1e-9);
        }
    }

    #[test]
    fn mel_is_denser_at_low_frequencies() {
        let bands = make_band_edges(ScaleKind::Mel, 128, 30.0, SR / 2.0 - 100.0).unwrap();
        for w in bands.windows(2) {
            let bw_lo = w[0].1 - w[0].0;
            let bw_hi = w[1].1 - w[1].0;
            assert!(bw_hi > bw_lo, "mel bandwidths must grow with frequency");
        }
    }

    #[test]
    fn inverse_mel_mirrors_mel_bandwidths() {
        let n = 64;
        let (f_min, f_max) = (30.0, SR / 2.0 - 100.0);
        let mel = make_band_edges(ScaleKind::Mel, n, f_min, f_max).unwrap();
        let imel = make_band_edges(ScaleKind::InverseMel, n, f_min, f_max).unwrap();
        for i in 0..n {
            let bw_i = imel[i].1 - imel[i].0;
            let bw_m = mel[n - 1 - i].1 - mel[n - 1 - i].0;
            assert!((bw_i - bw_m).abs() < 1e-9, "filter {i}: {bw_i} vs {bw_m}");
            // mirrored positions
            assert!((imel[i].0 - (f_min + f_max - mel[n - 1 - i].1)).abs() < 1e-9);
        }
        for w in imel.windows(2) {
            assert!(w[1].0 > w[0].0 && w[1].1 > w[0].1, "edges must increase");
        }
    }

    #[test]
    fn edges_strictly_increasing_and_in_range_for_all_scales() {
        for scale in [ScaleKind::Mel, ScaleKind::InverseMel, ScaleKind::Linear] {
            let bands = make_band_edges(scale, 128, 30.0, SR / 2.0 - 100.0).unwrap();
            for b in &bands {
                assert!(0.0 < b.0 && b.0 < b.1 && b.1 <= SR / 2.0, "{scale}: {b:?}");
            }
            for w in bands.windows(2) {
                assert!(w[1].0 > w[0].0 && w[1].1 > w[0].1, "{scale}");
            }
        }
        assert!(make_band_edges(ScaleKind::Mel, 4, 500.0, 100.0).is_err());
        assert!(make_band_edges(ScaleKind::Mel, 0, 100.0, 500.0).is_err());
    }

    #[test]
    fn kernels_are_exactly_symmetric() {
        let bank =
            SincFilterbank::build(ScaleKind::Mel, 128, 129, SR, 30.0, SR / 2.0 - 100.0).unwrap();
        for f in 0..bank.n_filters {
            let taps = &bank.kernels.data[f * 129..(f + 1) * 129];
            for n in 0..129 {
                assert_eq!(taps[n], taps[128 - n], "filter {f} tap {n}");
            }
        }
    }

    #[test]
    fn sinc_kernel_rejects_bad_bands() {
        assert!(sinc_kernel(300.0, 200.0, 129, SR).is_err());
        assert!(sinc_kernel(200.0, 200.0, 129, SR).is_err());
        assert!(sinc_kernel(200.0, 9000.0, 129, SR).is_err());
        assert!(sinc_kernel(200.0, 400.0, 128, SR).is_err());
    }

    #[test]
    fn dc_response_is_negligible_for_every_filter() {
        for scale in [ScaleKind::Mel, ScaleKind::InverseMel, ScaleKind::Linear] {
            let bank =
                SincFilterbank::build(scale, 128, 129, SR, 30.0, SR / 2.0 - 100.0).unwrap();
            for f in 0..bank.n_filters {
                let taps = &bank.kernels.data[f * 129..(f + 1) * 129];
                let dc: f64 = taps.iter().sum::<f64>().abs();
                let (lo, hi) = bank.cutoffs[f];
                let peak = bank
                    .magnitude_response(f, 8192)
                    .iter()
                    .filter(|(fr, _)| *fr >= lo && *fr <= hi)
                    .map(|(_, m)| *m)
                    .fold(0.0, f64::max);
                assert!(dc < 1e-3 * peak, "{scale} filter {f}: dc {dc} peak {peak}");
            }
        }
    }

    #[test]
    fn mid_band_filter_has_band_pass_shape() {
        let bank =
            SincFilterbank::build(ScaleKind::Mel, 128, 129, SR, 30.0, SR / 2.0 - 100.0).unwrap();
        let idx = 64;
        let (lo, hi) = bank.cutoffs[idx];
        let center = (lo + hi) / 2.0;
        let resp = bank.magnitude_response(idx, 4096);
        let at = |f: f64| {
            resp.iter()
                .min_by(|a, b| (a.0 - f).abs().partial_cmp(&(b.0 - f).abs()).unwrap())
                .unwrap()
                .1
        };
        let c = at(center);
        let z = resp[0].1.max(1e-300);
        let nyq = resp.last().unwrap().1.max(1e-300);
        assert!(20.0 * (c / z).log10() >= 20.0, "vs DC: {}", 20.0 * (c / z).log10());
        assert!(20.0 * (c / nyq).log10() >= 20.0, "vs Nyquist");
    }

    #[test]
    fn frontend_zero_waveform_gives_zero_conv() {
        let bank = SincFilterbank::build(ScaleKind::Mel, 4, 17, SR, 30.0, 7900.0).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 200]), false);
        let k = tape.leaf(bank.kernels_as::<f64>(), false);
        let y = tape.conv1d(x, k, 1).unwrap();
        assert!(tape.value(y).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frontend_shapes_and_length_check() {
        let bank = SincFilterbank::build(ScaleKind::Mel, 4, 17, SR, 30.0, 7900.0).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 200]), false);
        let gamma = tape.leaf(Tensor::new(vec![4], vec![1.0; 4]).unwrap(), false);
        let beta = tape.leaf(Tensor::zeros(vec![4]), false);
        let mut st = BnState::new(4);
        let y = frontend_forward(&mut tape, x, &bank, 200, gamma, beta, &mut st, Mode::Train, 0.3)
            .unwrap();
        // 200 - 17 + 1 = 184, pooled by 3 -> 61
        assert_eq!(tape.value(y).shape, vec![4, 61]);

        let bad = frontend_forward(&mut tape, x, &bank, 300, gamma, beta, &mut st, Mode::Train, 0.3);
        assert!(bad.is_err());
    }

    #[test]
    fn sinusoid_at_center_frequency_lands_in_its_filter() {
        let bank = SincFilterbank::build(ScaleKind::Linear, 16, 129, SR, 30.0, 7900.0).unwrap();
        let idx = 8;
        let (lo, hi) = bank.cutoffs[idx];
        let fc = (lo + hi) / 2.0;
        let n = 2000;
        let wave: Vec<f64> = (0..n)
            .map(|i| (2.0 * PI * fc * i as f64 / SR).sin())
            .collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, n], wave).unwrap(), false);
        let k = tape.leaf(bank.kernels_as::<f64>(), false);
        let y = tape.conv1d(x, k, 1).unwrap();
        let out = tape.value(y);
        let t_out = out.shape[1];
        let energies: Vec<f64> = (0..16)
            .map(|c| out.data[c * t_out..(c + 1) * t_out].iter().map(|v| v * v).sum())
            .collect();
        let best = energies
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(best, idx, "energies {energies:?}");
    }
}
