//! Haar wavelet pooling and unpooling over feature maps.
//!
//! Pooling is a grouped stride-2 convolution with the four fixed 2×2 Haar
//! kernels (one output channel per input channel per band); unpooling is
//! the sum of the matching grouped transposed convolutions. The kernels are
//! always recorded as tape constants, so no gradient reaches them.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tape, Tensor, Var};

/// The four 2×2 analysis kernels, row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HaarKernels {
    pub ll: [f32; 4],
    pub lh: [f32; 4],
    pub hl: [f32; 4],
    pub hh: [f32; 4],
}

impl Default for HaarKernels {
    fn default() -> Self {
        Self::standard()
    }
}

impl HaarKernels {
    /// Outer products of `L = [1, 1]/√2` and `H = [-1, 1]/√2`
    /// (`LL = LᵀL`, `LH = LᵀH`, `HL = HᵀL`, `HH = HᵀH`).
    pub fn standard() -> Self {
        let l = [std::f64::consts::FRAC_1_SQRT_2; 2];
        let h = [-std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2];
        let outer = |col: [f64; 2], row: [f64; 2]| {
            [
                (col[0] * row[0]) as f32,
                (col[0] * row[1]) as f32,
                (col[1] * row[0]) as f32,
                (col[1] * row[1]) as f32,
            ]
        };
        HaarKernels {
            ll: outer(l, l),
            lh: outer(l, h),
            hl: outer(h, l),
            hh: outer(h, h),
        }
    }

    /// Standard kernels with `delta` added to the first LL tap. Used to check
    /// that the verification suites notice a broken filter bank.
    pub fn perturbed(delta: f32) -> Self {
        let mut k = Self::standard();
        k.ll[0] += delta;
        k
    }

    pub fn bands(&self) -> [&[f32; 4]; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }

    /// Gram matrix of the flattened kernels (identity for an orthonormal set).
    pub fn gram(&self) -> [[f32; 4]; 4] {
        let b = self.bands();
        let mut g = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                g[i][j] = (0..4).map(|k| b[i][k] * b[j][k]).sum();
            }
        }
        g
    }

    /// Depthwise weight `(C, 1, 2, 2)` repeating `kernel` for every channel.
    fn depthwise(kernel: &[f32; 4], channels: usize) -> Tensor {
        let data = (0..channels).flat_map(|_| kernel.iter().copied()).collect();
        Tensor::new(Shape::new(channels, 1, 2, 2), data).expect("shape by construction")
    }
}

/// The four half-resolution bands of a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WaveletBands {
    pub ll: Var,
    pub lh: Var,
    pub hl: Var,
    pub hh: Var,
}

impl WaveletBands {
    pub fn as_array(&self) -> [Var; 4] {
        [self.ll, self.lh, self.hl, self.hh]
    }

    pub fn shape(&self, tape: &Tape) -> Result<Shape> {
        let s = tape.shape(self.ll);
        for v in [self.lh, self.hl, self.hh] {
            if tape.shape(v) != s {
                return Err(Error::shape(format!(
                    "wavelet bands disagree in shape: {s} vs {}",
                    tape.shape(v)
                )));
            }
        }
        Ok(s)
    }
}

/// Band values detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct BandValues {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

impl BandValues {
    pub fn from_tape(tape: &Tape, bands: &WaveletBands) -> Self {
        BandValues {
            ll: tape.value(bands.ll).clone(),
            lh: tape.value(bands.lh).clone(),
            hl: tape.value(bands.hl).clone(),
            hh: tape.value(bands.hh).clone(),
        }
    }

    pub fn as_array(&self) -> [&Tensor; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }

    pub fn energies(&self) -> [f64; 4] {
        self.as_array().map(Tensor::energy)
    }
}

pub const BAND_NAMES: [&str; 4] = ["LL", "LH", "HL", "HH"];

fn ensure_even(s: Shape) -> Result<()> {
    if s.h < 2 || s.w < 2 || !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::shape(format!(
            "wavelet pooling needs even spatial dims >= 2, got {}x{}; pad the input first",
            s.h, s.w
        )));
    }
    Ok(())
}

pub fn wave_pool(tape: &mut Tape, x: Var) -> Result<WaveletBands> {
    wave_pool_with(tape, x, &HaarKernels::standard())
}

pub fn wave_pool_with(tape: &mut Tape, x: Var, kernels: &HaarKernels) -> Result<WaveletBands> {
    let s = tape.shape(x);
    ensure_even(s)?;
    let mut out = [x; 4];
    for (slot, k) in out.iter_mut().zip(kernels.bands()) {
        let w = tape.constant(HaarKernels::depthwise(k, s.c));
        *slot = tape.conv2d(x, w, None, 2, 0, s.c)?;
    }
    let [ll, lh, hl, hh] = out;
    Ok(WaveletBands { ll, lh, hl, hh })
}

pub fn wave_unpool(tape: &mut Tape, bands: &WaveletBands) -> Result<Var> {
    wave_unpool_with(tape, bands, &HaarKernels::standard())
}

pub fn wave_unpool_with(tape: &mut Tape, bands: &WaveletBands, kernels: &HaarKernels) -> Result<Var> {
    let s = bands.shape(tape)?;
    let mut acc: Option<Var> = None;
    for (band, k) in bands.as_array().into_iter().zip(kernels.bands()) {
        let w = tape.constant(HaarKernels::depthwise(k, s.c));
        let up = tape.conv2d_transpose(band, w, 2, s.c)?;
        acc = Some(match acc {
            None => up,
            Some(prev) => tape.add(prev, up)?,
        });
    }
    Ok(acc.expect("four bands"))
}

/// `LH + HL + HH`.
pub fn high_freq_sum(tape: &mut Tape, bands: &WaveletBands) -> Result<Var> {
    bands.shape(tape)?;
    let s = tape.add(bands.lh, bands.hl)?;
    tape.add(s, bands.hh)
}

/// Value-level single decomposition (no gradient tracking).
pub fn decompose(x: &Tensor) -> Result<BandValues> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let bands = wave_pool(&mut tape, v)?;
    Ok(BandValues::from_tape(&tape, &bands))
}

/// Value-level inverse of [`decompose`].
pub fn reconstruct(bands: &BandValues) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = WaveletBands {
        ll: tape.constant(bands.ll.clone()),
        lh: tape.constant(bands.lh.clone()),
        hl: tape.constant(bands.hl.clone()),
        hh: tape.constant(bands.hh.clone()),
    };
    let out = wave_unpool(&mut tape, &b)?;
    Ok(tape.value(out).clone())
}

/// Multi-level decomposition: level 1 splits the input, each further level
/// splits the previous LL.
#[derive(Clone, Debug, PartialEq)]
pub struct DwtPyramid {
    /// `levels[0]` is the finest level.
    pub levels: Vec<BandValues>,
}

impl DwtPyramid {
    /// The coarsest LL band.
    pub fn approximation(&self) -> &Tensor {
        &self.levels.last().expect("at least one level").ll
    }
}

pub fn dwt_image(x: &Tensor, levels: usize) -> Result<DwtPyramid> {
    if levels == 0 {
        return Err(Error::invalid("dwt_image needs levels >= 1"));
    }
    let s = x.shape();
    let div = 1usize << levels;
    if !s.h.is_multiple_of(div) || !s.w.is_multiple_of(div) {
        return Err(Error::shape(format!(
            "{}x{} image is not divisible by 2^{levels}={div}",
            s.h, s.w
        )));
    }
    let mut out = Vec::with_capacity(levels);
    let mut current = x.clone();
    for _ in 0..levels {
        let bands = decompose(&current)?;
        current = bands.ll.clone();
        out.push(bands);
    }
    Ok(DwtPyramid { levels: out })
}

/// Invert [`dwt_image`] from the coarsest level down.
pub fn dwt_reconstruct(pyramid: &DwtPyramid) -> Result<Tensor> {
    let mut ll = pyramid.approximation().clone();
    for level in pyramid.levels.iter().rev() {
        let bands = BandValues {
            ll,
            lh: level.lh.clone(),
            hl: level.hl.clone(),
            hh: level.hh.clone(),
        };
        ll = reconstruct(&bands)?;
    }
    Ok(ll)
}
