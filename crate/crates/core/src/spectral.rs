//! Power-spectrum diagnostics: averaged 2-D log spectra, azimuthal profiles,
//! 0° slices, profile distances and Haar band-energy shares.

use std::fmt::Write as _;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wavelet::decompose;

/// Added to the power before taking `log10`.
pub const LOG_FLOOR: f64 = 1e-10;
pub const GRAY_WEIGHTS: [f64; 3] = [0.2989, 0.5870, 0.1140];

/// Mean log10 power over a corpus, DC at `(size/2, size/2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum2D {
    pub size: usize,
    /// Row-major `size × size`.
    pub values: Vec<f64>,
    pub count: usize,
}

impl Spectrum2D {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.size + x]
    }

    pub fn center(&self) -> usize {
        self.size / 2
    }
}

/// Azimuthally integrated spectrum: per radial bin mean and variance.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumProfile {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub counts: Vec<usize>,
}

impl SpectrumProfile {
    pub fn bins(&self) -> usize {
        self.mean.len()
    }

    /// Index of the largest mean, skipping the first `skip` bins.
    pub fn peak_bin(&self, skip: usize) -> Option<usize> {
        self.mean
            .iter()
            .enumerate()
            .skip(skip)
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,mean,variance\n");
        for (i, (m, v)) in self.mean.iter().zip(&self.variance).enumerate() {
            writeln!(out, "{i},{m},{v}").expect("string write");
        }
        out
    }
}

/// Result of [`spectrum_distance`].
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumDistance {
    /// Mean over bins of the squared gap in mean log power.
    pub distance: f64,
    /// Per-bin absolute gap.
    pub gap: Vec<f64>,
    /// Mean absolute gap over the upper half of the bins.
    pub high_freq_gap: f64,
}

impl SpectrumDistance {
    pub fn gap_csv(&self) -> String {
        let mut out = String::from("bin,gap\n");
        for (i, g) in self.gap.iter().enumerate() {
            writeln!(out, "{i},{g}").expect("string write");
        }
        out
    }
}

/// Luma plane of sample `n` of an `N×3×S×S` tensor.
pub fn grayscale(images: &Tensor, n: usize) -> Result<Vec<f64>> {
    let s = images.shape();
    if s.c != 3 {
        return Err(Error::shape(format!("grayscale needs 3 channels, got {s}")));
    }
    let sample = images.sample(n);
    let plane = s.plane();
    Ok((0..plane)
        .map(|i| {
            (0..3)
                .map(|c| GRAY_WEIGHTS[c] * f64::from(sample[c * plane + i]))
                .sum()
        })
        .collect())
}

struct Fft2 {
    size: usize,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl Fft2 {
    fn new(size: usize) -> Self {
        Fft2 {
            size,
            fft: FftPlanner::new().plan_fft_forward(size),
        }
    }

    /// `|F|²` of a square plane, unshifted.
    fn power(&self, plane: &[f64]) -> Vec<f64> {
        let n = self.size;
        let mut buf: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
        for row in buf.chunks_exact_mut(n) {
            self.fft.process(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); n];
        for x in 0..n {
            for y in 0..n {
                col[y] = buf[y * n + x];
            }
            self.fft.process(&mut col);
            for y in 0..n {
                buf[y * n + x] = col[y];
            }
        }
        buf.iter().map(|c| c.norm_sqr()).collect()
    }
}

/// Unshifted `|FFT|²` of one square plane.
pub fn power_spectrum_plane(plane: &[f64], size: usize) -> Result<Vec<f64>> {
    if plane.len() != size * size || size == 0 {
        return Err(Error::shape(format!(
            "plane of {} values is not {size}x{size}",
            plane.len()
        )));
    }
    Ok(Fft2::new(size).power(plane))
}

/// Corpus-averaged, centred log10 power spectrum of the grayscale images.
pub fn power_spectrum_2d(set: &ImageSet) -> Result<Spectrum2D> {
    let images = set.tensor();
    let s = images.shape();
    if s.n == 0 {
        return Err(Error::invalid("power spectrum of an empty image set"));
    }
    if s.h != s.w {
        return Err(Error::shape(format!("power spectrum needs square images, got {s}")));
    }
    let size = s.h;
    let fft = Fft2::new(size);
    let half = size / 2;
    let mut acc = vec![0.0f64; size * size];
    for n in 0..s.n {
        let power = fft.power(&grayscale(images, n)?);
        for y in 0..size {
            for x in 0..size {
                let (sy, sx) = ((y + half) % size, (x + half) % size);
                acc[sy * size + sx] += (power[y * size + x] + LOG_FLOOR).log10();
            }
        }
    }
    acc.iter_mut().for_each(|v| *v /= s.n as f64);
    Ok(Spectrum2D {
        size,
        values: acc,
        count: s.n,
    })
}

/// Radial bin of every cell: `round(distance to centre)`, clamped to `size/2`.
fn radial_bin(size: usize, y: usize, x: usize) -> usize {
    let c = (size / 2) as f64;
    let r = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
    (r.round() as usize).min(size / 2)
}

pub fn azimuthal_average(spec: &Spectrum2D) -> SpectrumProfile {
    let bins = spec.size / 2 + 1;
    let mut sum = vec![0.0f64; bins];
    let mut counts = vec![0usize; bins];
    for y in 0..spec.size {
        for x in 0..spec.size {
            let b = radial_bin(spec.size, y, x);
            sum[b] += spec.at(y, x);
            counts[b] += 1;
        }
    }
    let mean: Vec<f64> = sum.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    let mut var = vec![0.0f64; bins];
    for y in 0..spec.size {
        for x in 0..spec.size {
            let b = radial_bin(spec.size, y, x);
            var[b] += (spec.at(y, x) - mean[b]).powi(2);
        }
    }
    let variance = var.iter().zip(&counts).map(|(v, &c)| v / c as f64).collect();
    SpectrumProfile {
        mean,
        variance,
        counts,
    }
}

/// Centre row from DC out to Nyquist (`size/2 + 1` values).
pub fn spectrum_slice(spec: &Spectrum2D) -> Vec<f64> {
    let c = spec.center();
    (0..=spec.size / 2)
        .map(|i| spec.at(c, (c + i) % spec.size))
        .collect()
}

pub fn spectrum_distance(a: &SpectrumProfile, b: &SpectrumProfile) -> Result<SpectrumDistance> {
    if a.bins() != b.bins() || a.bins() == 0 {
        return Err(Error::shape(format!(
            "profiles have {} and {} bins",
            a.bins(),
            b.bins()
        )));
    }
    let gap: Vec<f64> = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).abs()).collect();
    let distance = gap.iter().map(|g| g * g).sum::<f64>() / gap.len() as f64;
    let upper = &gap[gap.len() / 2..];
    let high_freq_gap = upper.iter().sum::<f64>() / upper.len() as f64;
    Ok(SpectrumDistance {
        distance,
        gap,
        high_freq_gap,
    })
}

/// Mean share of energy in LL, LH, HL, HH over images with nonzero energy.
pub fn band_energy_stats(set: &ImageSet) -> Result<[f64; 4]> {
    let mut acc = [0.0f64; 4];
    let mut used = 0usize;
    for i in 0..set.len() {
        let bands = decompose(&set.image(i))?;
        let e = bands.energies();
        let total: f64 = e.iter().sum();
        if total > 0.0 {
            for (a, v) in acc.iter_mut().zip(e) {
                *a += v / total;
            }
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::invalid("every image has zero energy; band shares are undefined"));
    }
    Ok(acc.map(|a| a / used as f64))
}

/// `size×size` CSV grid of the spectrum values.
pub fn spectrum_grid_csv(spec: &Spectrum2D) -> String {
    let mut out = String::new();
    for row in spec.values.chunks_exact(spec.size) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Linear map of `[log10(floor), max]` onto 0..=255.
pub fn spectrum_heatmap(spec: &Spectrum2D) -> Vec<u8> {
    let lo = LOG_FLOOR.log10();
    let hi = spec.values.iter().copied().fold(lo, f64::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    spec.values
        .iter()
        .map(|v| (((v - lo) / range).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}
