//! CSI preprocessing: antenna-ratio denoising, frame grouping, Doppler
//! spectrograms and the image-like feature maps fed to the encoder.

use ndarray::{s, Array2, Array3, Axis};
use num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CsiError {
    #[error("tensor shape mismatch: {0}")]
    Shape(String),
    #[error("antenna index {index} out of range ({count} antennas)")]
    AntennaOutOfRange { index: usize, count: usize },
    #[error("ratio numerator and denominator are the same antenna ({0})")]
    SameAntenna(usize),
    #[error("number of frames must be at least 1")]
    ZeroFrames,
    #[error("{samples} samples cannot fill {frames} frames")]
    TooFewSamples { samples: usize, frames: usize },
    #[error("window {window} does not fit a group of {len} samples")]
    WindowTooLarge { window: usize, len: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, CsiError>;

/// Complex CSI laid out as (antenna or antenna pair, subcarrier, time).
#[derive(Debug, Clone, PartialEq)]
pub struct CsiTensor {
    data: Array3<Complex64>,
    sample_rate: f64,
    subcarrier_freqs: Vec<f64>,
}

impl CsiTensor {
    pub fn new(data: Array3<Complex64>, sample_rate: f64, subcarrier_freqs: Vec<f64>) -> Result<Self> {
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(CsiError::InvalidParameter(format!(
                "sample rate must be positive, got {sample_rate}"
            )));
        }
        if data.dim().1 != subcarrier_freqs.len() {
            return Err(CsiError::Shape(format!(
                "{} subcarrier frequencies for {} subcarriers",
                subcarrier_freqs.len(),
                data.dim().1
            )));
        }
        Ok(Self {
            data,
            sample_rate,
            subcarrier_freqs,
        })
    }

    pub fn data(&self) -> &Array3<Complex64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<Complex64> {
        self.data
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn subcarrier_freqs(&self) -> &[f64] {
        &self.subcarrier_freqs
    }

    pub fn n_antennas(&self) -> usize {
        self.data.dim().0
    }

    pub fn n_subcarriers(&self) -> usize {
        self.data.dim().1
    }

    pub fn n_samples(&self) -> usize {
        self.data.dim().2
    }

    /// Copy with every entry multiplied by `k`.
    pub fn scaled(&self, k: Complex64) -> Self {
        Self {
            data: self.data.mapv(|c| c * k),
            sample_rate: self.sample_rate,
            subcarrier_freqs: self.subcarrier_freqs.clone(),
        }
    }
}

/// Denominator clamp used when none is given: 1e-8 of the median magnitude.
pub fn default_ratio_eps(csi: &CsiTensor, den_antenna: usize) -> f64 {
    if den_antenna >= csi.n_antennas() {
        return f64::MIN_POSITIVE;
    }
    let mut mags: Vec<f64> = csi
        .data
        .index_axis(Axis(0), den_antenna)
        .iter()
        .map(|c| c.norm())
        .collect();
    if mags.is_empty() {
        return f64::MIN_POSITIVE;
    }
    let mid = mags.len() / 2;
    mags.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    (mags[mid] * 1e-8).max(f64::MIN_POSITIVE)
}

/// `c_num / c_den` elementwise; denominators smaller than `eps` in magnitude are
/// pushed out to magnitude `eps` along their own phase (or along +1 when zero).
pub fn ratio(csi: &CsiTensor, num_antenna: usize, den_antenna: usize, eps: f64) -> Result<CsiTensor> {
    let count = csi.n_antennas();
    for index in [num_antenna, den_antenna] {
        if index >= count {
            return Err(CsiError::AntennaOutOfRange { index, count });
        }
    }
    if num_antenna == den_antenna {
        return Err(CsiError::SameAntenna(num_antenna));
    }
    if !(eps > 0.0) {
        return Err(CsiError::InvalidParameter(format!("eps must be positive, got {eps}")));
    }
    let num = csi.data.index_axis(Axis(0), num_antenna);
    let den = csi.data.index_axis(Axis(0), den_antenna);
    let mut out = Array2::<Complex64>::zeros(num.raw_dim());
    ndarray::Zip::from(&mut out)
        .and(&num)
        .and(&den)
        .for_each(|o, &n, &d| {
            let mag = d.norm();
            let d = if mag >= eps {
                d
            } else if mag > 0.0 {
                d * (eps / mag)
            } else {
                Complex64::new(eps, 0.0)
            };
            *o = n / d;
        });
    CsiTensor::new(
        out.insert_axis(Axis(0)),
        csi.sample_rate,
        csi.subcarrier_freqs.clone(),
    )
}

/// Splits the stream into `n_frames` consecutive groups of
/// `G = ⌊N_c / n_frames⌋` samples; the remainder at the end is dropped.
pub fn group(csi: &CsiTensor, n_frames: usize) -> Result<Vec<CsiTensor>> {
    if n_frames == 0 {
        return Err(CsiError::ZeroFrames);
    }
    let total = csi.n_samples();
    let g = total / n_frames;
    if g == 0 {
        return Err(CsiError::TooFewSamples {
            samples: total,
            frames: n_frames,
        });
    }
    (0..n_frames)
        .map(|i| {
            CsiTensor::new(
                csi.data.slice(s![.., .., i * g..(i + 1) * g]).to_owned(),
                csi.sample_rate,
                csi.subcarrier_freqs.clone(),
            )
        })
        .collect()
}

/// Samples per group for `n_samples` split across `n_frames`.
pub fn group_len(n_samples: usize, n_frames: usize) -> usize {
    if n_frames == 0 {
        0
    } else {
        n_samples / n_frames
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Taper {
    #[default]
    Hann,
    Rectangular,
}

impl Taper {
    pub fn weights(self, n: usize) -> Vec<f64> {
        match self {
            Taper::Hann => hann(n),
            Taper::Rectangular => vec![1.0; n],
        }
    }
}

/// Short-time spectral analysis parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftParams {
    pub window: usize,
    pub hop: usize,
    pub taper: Taper,
}

impl StftParams {
    /// Hann-tapered window of the given length and hop.
    pub fn new(window: usize, hop: usize) -> Self {
        Self {
            window,
            hop,
            taper: Taper::Hann,
        }
    }

    /// Window of `len/4` rounded to the nearest power of two (at least 2), half-window hop.
    pub fn default_for(len: usize) -> Self {
        let target = (len as f64 / 4.0).max(1.0);
        let window = (2f64.powf(target.log2().round()) as usize).max(2);
        Self::new(window, (window / 2).max(1))
    }

    pub fn with_taper(self, taper: Taper) -> Self {
        Self { taper, ..self }
    }
}

/// Magnitude spectrogram, DC-centred: row `i` holds frequency bin `i - window/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub data: Array2<f64>,
    pub sample_rate: f64,
    pub window: usize,
    pub hop: usize,
}

impl Spectrogram {
    pub fn n_freq(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_time(&self) -> usize {
        self.data.ncols()
    }

    /// Frequency (Hz) of row `i`.
    pub fn bin_frequency(&self, i: usize) -> f64 {
        (i as f64 - (self.window / 2) as f64) * self.sample_rate / self.window as f64
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

pub fn hann(n: usize) -> Vec<f64> {
    // Periodic Hann taper.
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Mean over antenna pairs and subcarriers of a group, one value per sample.
pub fn mean_stream(group: &CsiTensor) -> Vec<Complex64> {
    let (a, m, g) = group.data.dim();
    let norm = (a * m).max(1) as f64;
    (0..g)
        .map(|t| group.data.slice(s![.., .., t]).iter().sum::<Complex64>() / norm)
        .collect()
}

/// Doppler spectrogram of the mean complex stream of a group.
///
/// Each column is `|FFT(w · x)| / √window` so that total spectrogram energy
/// equals the windowed time-domain energy.
pub fn dfs(group: &CsiTensor, params: StftParams) -> Result<Spectrogram> {
    stft(&mean_stream(group), group.sample_rate, params)
}

pub fn stft(stream: &[Complex64], sample_rate: f64, params: StftParams) -> Result<Spectrogram> {
    let StftParams { window, hop, taper } = params;
    if window == 0 || hop == 0 {
        return Err(CsiError::InvalidParameter("window and hop must be positive".into()));
    }
    if window > stream.len() {
        return Err(CsiError::WindowTooLarge {
            window,
            len: stream.len(),
        });
    }
    let n_time = 1 + (stream.len() - window) / hop;
    let taper = taper.weights(window);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window);
    let scale = 1.0 / (window as f64).sqrt();
    let mut data = Array2::<f64>::zeros((window, n_time));
    let mut buf = vec![Complex64::new(0.0, 0.0); window];
    for col in 0..n_time {
        let start = col * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = stream[start + i] * taper[i];
        }
        fft.process(&mut buf);
        for (k, v) in buf.iter().enumerate() {
            let row = (k + window / 2) % window;
            data[[row, col]] = v.norm() * scale;
        }
    }
    Ok(Spectrogram {
        data,
        sample_rate,
        window,
        hop,
    })
}

/// Phase unwrapped along the subcarrier axis (rows), independently per column.
pub fn unwrap_rows(phase: &mut Array2<f64>) {
    use std::f64::consts::PI;
    let (rows, cols) = phase.dim();
    for c in 0..cols {
        let mut offset = 0.0;
        for r in 1..rows {
            let raw_prev = phase[[r - 1, c]] - offset;
            let mut d = phase[[r, c]] - raw_prev;
            while d > PI {
                d -= 2.0 * PI;
                offset -= 2.0 * PI;
            }
            while d < -PI {
                d += 2.0 * PI;
                offset += 2.0 * PI;
            }
            phase[[r, c]] += offset;
            let _ = d;
        }
    }
}

/// Zero-mean, unit-variance copy; constant inputs map to all zeros.
pub fn zscore(panel: &Array2<f64>) -> Array2<f64> {
    let n = panel.len().max(1) as f64;
    let mean = panel.sum() / n;
    let var = panel.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(var > 1e-24) || !var.is_finite() {
        return Array2::zeros(panel.raw_dim());
    }
    let sd = var.sqrt();
    panel.mapv(|v| (v - mean) / sd)
}

/// Bilinear resize with half-pixel centres.
pub fn resize_bilinear(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let mut out = Array2::<f64>::zeros((out_h, out_w));
    if h == 0 || w == 0 {
        return out;
    }
    let coord = |o: usize, out_n: usize, in_n: usize| -> (usize, usize, f64) {
        let x = ((o as f64 + 0.5) * in_n as f64 / out_n as f64 - 0.5).clamp(0.0, (in_n - 1) as f64);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(in_n - 1);
        (x0, x1, x - x0 as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|j| coord(j, out_w, w)).collect();
    for i in 0..out_h {
        let (y0, y1, fy) = coord(i, out_h, h);
        for (j, &(x0, x1, fx)) in cols.iter().enumerate() {
            let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
            let bot = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
            out[[i, j]] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// A 3×H×W network input built from one CSI group.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// Shape (3, H, W); the three channels are identical.
    pub data: Array3<f32>,
    pub receiver: usize,
    pub frame: usize,
}

impl FeatureMap {
    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// The single underlying panel (channel 0).
    pub fn panel(&self) -> ndarray::ArrayView2<'_, f32> {
        self.data.index_axis(Axis(0), 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub height: usize,
    pub width: usize,
    /// STFT parameters; `None` picks [`StftParams::default_for`] the group length.
    pub stft: Option<StftParams>,
}

impl FeatureConfig {
    pub fn square(size: usize) -> Self {
        Self {
            height: size,
            width: size,
            stft: None,
        }
    }
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self::square(224)
    }
}

/// The three z-scored panels (magnitude, unwrapped phase, DFS) before stacking.
///
/// Magnitude and phase are `(A·M) × G`; the DFS panel is resized to width `G`.
pub fn feature_panels(group: &CsiTensor, stft_params: Option<StftParams>) -> Result<[Array2<f64>; 3]> {
    let (a, m, g) = group.data.dim();
    if a == 0 || m == 0 || g == 0 {
        return Err(CsiError::Shape("empty group".into()));
    }
    let params = stft_params.unwrap_or_else(|| StftParams::default_for(g));
    let spec = dfs(group, params)?;
    let mut mag = Array2::<f64>::zeros((a * m, g));
    let mut phase = Array2::<f64>::zeros((a * m, g));
    for p in 0..a {
        for sc in 0..m {
            for t in 0..g {
                let c = group.data[[p, sc, t]];
                mag[[p * m + sc, t]] = c.norm();
                phase[[p * m + sc, t]] = c.arg();
            }
        }
    }
    for p in 0..a {
        let mut block = phase.slice_mut(s![p * m..(p + 1) * m, ..]);
        let mut owned = block.to_owned();
        unwrap_rows(&mut owned);
        block.assign(&owned);
    }
    let dfs_panel = resize_bilinear(&spec.data, spec.n_freq(), g);
    Ok([zscore(&mag), zscore(&phase), zscore(&dfs_panel)])
}

/// Magnitude, phase and DFS panels stacked vertically, resized to H×W and
/// replicated across three channels.
pub fn features(group: &CsiTensor, config: &FeatureConfig) -> Result<FeatureMap> {
    if config.height == 0 || config.width == 0 {
        return Err(CsiError::InvalidParameter("feature size must be positive".into()));
    }
    let panels = feature_panels(group, config.stft)?;
    let views: Vec<_> = panels.iter().map(|p| p.view()).collect();
    let stacked = ndarray::concatenate(Axis(0), &views)
        .map_err(|e| CsiError::Shape(e.to_string()))?;
    let resized = resize_bilinear(&stacked, config.height, config.width);
    let single = resized.mapv(|v| v as f32);
    let data = ndarray::stack(Axis(0), &[single.view(), single.view(), single.view()])
        .map_err(|e| CsiError::Shape(e.to_string()))?;
    Ok(FeatureMap {
        data,
        receiver: 0,
        frame: 0,
    })
}

/// Ratio → grouping → features for one receiver's raw CSI.
pub fn receiver_features(
    csi: &CsiTensor,
    n_frames: usize,
    config: &FeatureConfig,
    receiver: usize,
) -> Result<Vec<FeatureMap>> {
    if csi.n_antennas() < 2 {
        return Err(CsiError::Shape(format!(
            "CSI ratio needs two antennas, got {}",
            csi.n_antennas()
        )));
    }
    let eps = default_ratio_eps(csi, 1);
    let r = ratio(csi, 0, 1, eps)?;
    group(&r, n_frames)?
        .iter()
        .enumerate()
        .map(|(frame, g)| {
            let mut fm = features(g, config)?;
            fm.receiver = receiver;
            fm.frame = frame;
            Ok(fm)
        })
        .collect()
}
