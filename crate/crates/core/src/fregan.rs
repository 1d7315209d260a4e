//! Frequency-aware GAN components: the high-frequency discriminator (HFD),
//! the frequency skip connection (FSC), high-frequency alignment (HFA) and
//! the hinge / reconstruction losses they are combined with.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, ConvBlock, ParamSet};
use crate::tensor::{Tape, Var};
use crate::wavelet::{high_freq_sum, wave_pool, wave_unpool};

/// Sign applied to the mean HFD score of fakes in the generator objective.
pub const HFD_GENERATOR_SIGN: f32 = -1.0;

/// Spatial resolutions at which features are tapped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TapScale {
    S8,
    S16,
    S32,
}

impl TapScale {
    pub const ALL: [TapScale; 3] = [TapScale::S8, TapScale::S16, TapScale::S32];

    pub const fn size(self) -> usize {
        match self {
            TapScale::S8 => 8,
            TapScale::S16 => 16,
            TapScale::S32 => 32,
        }
    }

    pub fn from_size(size: usize) -> Option<TapScale> {
        TapScale::ALL.into_iter().find(|s| s.size() == size)
    }
}

impl fmt::Display for TapScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.size())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TapSource {
    Generator,
    Discriminator,
}

/// Intermediate activations keyed by spatial scale.
#[derive(Clone, Debug)]
pub struct FeatureTaps {
    source: TapSource,
    maps: BTreeMap<TapScale, Var>,
}

impl FeatureTaps {
    pub fn new(source: TapSource) -> Self {
        FeatureTaps {
            source,
            maps: BTreeMap::new(),
        }
    }

    /// Add a map; its spatial size must equal the scale.
    pub fn insert(&mut self, tape: &Tape, scale: TapScale, map: Var) -> Result<()> {
        let s = tape.shape(map);
        if s.h != scale.size() || s.w != scale.size() {
            return Err(Error::shape(format!(
                "tap at scale {scale} has spatial size {}x{}",
                s.h, s.w
            )));
        }
        self.maps.insert(scale, map);
        Ok(())
    }

    pub fn source(&self) -> TapSource {
        self.source
    }

    pub fn get(&self, scale: TapScale) -> Option<Var> {
        self.maps.get(&scale).copied()
    }

    pub fn scales(&self) -> impl Iterator<Item = TapScale> + '_ {
        self.maps.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (TapScale, Var)> + '_ {
        self.maps.iter().map(|(&s, &v)| (s, v))
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    fn same_scales(&self, other: &FeatureTaps) -> bool {
        self.maps.keys().eq(other.maps.keys())
    }
}

// ---- adversarial losses --------------------------------------------------

/// `mean(relu(1 - real)) + mean(relu(1 + fake))`.
pub fn hinge_d_loss(tape: &mut Tape, real_scores: Var, fake_scores: Var) -> Var {
    let neg_real = tape.scale(real_scores, -1.0);
    let real_margin = tape.shift(neg_real, 1.0);
    let real_term = tape.relu_mean(real_margin);
    let fake_margin = tape.shift(fake_scores, 1.0);
    let fake_term = tape.relu_mean(fake_margin);
    tape.add(real_term, fake_term).expect("scalars")
}

/// `-mean(fake)`.
pub fn hinge_g_loss(tape: &mut Tape, fake_scores: Var) -> Var {
    let m = tape.mean_all(fake_scores);
    tape.scale(m, -1.0)
}

// ---- wavelet feature helpers ----------------------------------------------

/// `LH + HL + HH` of the Haar decomposition of `feature`.
pub fn high_frequency(tape: &mut Tape, feature: Var) -> Result<Var> {
    let bands = wave_pool(tape, feature)?;
    high_freq_sum(tape, &bands)
}

/// Frequency skip connection: `feature + unpool(pool(feature))`.
pub fn fsc_apply(tape: &mut Tape, feature: Var) -> Result<Var> {
    let bands = wave_pool(tape, feature)?;
    let rebuilt = wave_unpool(tape, &bands)?;
    tape.add(feature, rebuilt)
}

// ---- HFD --------------------------------------------------------------------

/// Width of the hidden layers of each HFD head.
pub const HFD_WIDTH: usize = 16;

/// One HFD head: two conv(3×3)→BN→LeakyReLU blocks and a 4×4 valid conv to a
/// one-channel score map, averaged to one score per sample.
///
/// Block strides are 2 while the map is at least 8×8 and 1 afterwards, so
/// every head ends on a 4×4 map regardless of its tap scale.
#[derive(Clone, Debug)]
pub struct HfdHead {
    pub scale: TapScale,
    blocks: [ConvBlock; 2],
    out: Conv,
}

impl HfdHead {
    fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        scale: TapScale,
        in_channels: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let mut spatial = scale.size() / 2;
        let mut stride = || {
            let s = if spatial >= 8 { 2 } else { 1 };
            spatial /= s;
            s
        };
        let name = format!("hfd{scale}");
        let b0 = ConvBlock::new(params, &format!("{name}.block0"), in_channels, width, 3, stride(), 1, rng);
        let b1 = ConvBlock::new(params, &format!("{name}.block1"), width, width, 3, stride(), 1, rng);
        debug_assert_eq!(spatial, 4);
        let out = Conv::new(params, &format!("{name}.out"), width, 1, 4, 1, 0, true, rng);
        HfdHead {
            scale,
            blocks: [b0, b1],
            out,
        }
    }

    /// Score a high-frequency map (`N×C×scale/2×scale/2`) → `N×1×1×1`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, hf: Var) -> Result<Var> {
        let mut h = hf;
        for b in &self.blocks {
            h = b.forward(tape, bound, h)?;
        }
        let map = self.out.forward(tape, bound, h)?;
        Ok(tape.sample_mean(map))
    }
}

/// Independent HFD heads, one per discriminator tap scale.
#[derive(Clone, Debug)]
pub struct HfdHeads {
    pub params: ParamSet,
    heads: BTreeMap<TapScale, HfdHead>,
}

impl HfdHeads {
    /// `channels` gives the discriminator's channel count at each scale.
    pub fn new<R: Rng + ?Sized>(channels: &[(TapScale, usize)], width: usize, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let heads = channels
            .iter()
            .map(|&(scale, c)| (scale, HfdHead::new(&mut params, scale, c, width, rng)))
            .collect();
        HfdHeads { params, heads }
    }

    pub fn head(&self, scale: TapScale) -> Option<&HfdHead> {
        self.heads.get(&scale)
    }

    /// Per-scale HFD scores of the high-frequency part of each tap.
    pub fn scores(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        taps: &FeatureTaps,
    ) -> Result<BTreeMap<TapScale, Var>> {
        taps.iter()
            .map(|(scale, tap)| {
                let head = self.heads.get(&scale).ok_or_else(|| {
                    Error::invalid(format!("no HFD head for tap scale {scale}"))
                })?;
                let hf = high_frequency(tape, tap)?;
                Ok((scale, head.forward(tape, bound, hf)?))
            })
            .collect()
    }
}

/// HFD objectives with their per-scale parts.
#[derive(Clone, Debug)]
pub struct HfdLosses {
    pub d: Var,
    pub g: Var,
    pub d_per_scale: BTreeMap<TapScale, Var>,
}

/// Discriminator-side HFD loss `Σ_scales hinge_d(real HF scores, fake HF scores)`.
pub fn hfd_d_loss(
    tape: &mut Tape,
    real_scores: &BTreeMap<TapScale, Var>,
    fake_scores: &BTreeMap<TapScale, Var>,
) -> Result<(Var, BTreeMap<TapScale, Var>)> {
    if !real_scores.keys().eq(fake_scores.keys()) || real_scores.is_empty() {
        return Err(Error::invalid(
            "HFD real and fake taps must share a non-empty scale set",
        ));
    }
    let per_scale: BTreeMap<TapScale, Var> = real_scores
        .iter()
        .map(|(&s, &r)| (s, hinge_d_loss(tape, r, fake_scores[&s])))
        .collect();
    Ok((sum_scalars(tape, per_scale.values().copied())?, per_scale))
}

/// Generator-side HFD loss `sign · Σ_scales mean(fake HF scores)`.
pub fn hfd_g_loss(
    tape: &mut Tape,
    fake_scores: &BTreeMap<TapScale, Var>,
    sign: f32,
) -> Result<Var> {
    let means: Vec<Var> = fake_scores.values().map(|&s| tape.mean_all(s)).collect();
    let total = sum_scalars(tape, means)?;
    Ok(tape.scale(total, sign))
}

/// Both HFD objectives from real and fake discriminator taps.
pub fn hfd_losses(
    tape: &mut Tape,
    real_taps: &FeatureTaps,
    fake_taps: &FeatureTaps,
    heads: &HfdHeads,
    bound: &Bound,
    g_sign: f32,
) -> Result<HfdLosses> {
    if !real_taps.same_scales(fake_taps) {
        return Err(Error::invalid("HFD real and fake taps use different scales"));
    }
    let real = heads.scores(tape, bound, real_taps)?;
    let fake = heads.scores(tape, bound, fake_taps)?;
    let (d, d_per_scale) = hfd_d_loss(tape, &real, &fake)?;
    let g = hfd_g_loss(tape, &fake, g_sign)?;
    Ok(HfdLosses { d, g, d_per_scale })
}

// ---- HFA ----------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct HfaLoss {
    pub total: Var,
    pub per_scale: BTreeMap<TapScale, Var>,
}

/// `Σ_scales L1(channel_mean(HF(d_tap)), channel_mean(HF(g_tap)))`.
///
/// The discriminator taps are detached here: gradient reaches only the
/// generator side.
pub fn hfa_loss(tape: &mut Tape, d_real_taps: &FeatureTaps, g_taps: &FeatureTaps) -> Result<HfaLoss> {
    if !d_real_taps.same_scales(g_taps) || g_taps.is_empty() {
        return Err(Error::invalid(
            "HFA needs discriminator and generator taps on the same non-empty scale set",
        ));
    }
    let mut per_scale = BTreeMap::new();
    for (scale, g_tap) in g_taps.iter() {
        let d_tap = d_real_taps.get(scale).expect("same scale set");
        let (nd, ng) = (tape.shape(d_tap).n, tape.shape(g_tap).n);
        if nd != ng {
            return Err(Error::shape(format!(
                "HFA pairs samples by index; batch sizes differ ({nd} vs {ng}) at scale {scale}"
            )));
        }
        let d_tap = tape.detach(d_tap);
        let hf_d = high_frequency(tape, d_tap)?;
        let hf_d = tape.channel_mean(hf_d);
        let hf_g = high_frequency(tape, g_tap)?;
        let hf_g = tape.channel_mean(hf_g);
        per_scale.insert(scale, tape.l1_distance(hf_d, hf_g)?);
    }
    let total = sum_scalars(tape, per_scale.values().copied())?;
    Ok(HfaLoss { total, per_scale })
}

// ---- reconstruction --------------------------------------------------------------

/// Mean absolute error between the decoder output and the real image
/// area-downsampled to the decoder's resolution.
pub fn recon_loss(tape: &mut Tape, decoder_output: Var, real_image: Var) -> Result<Var> {
    let (ds, rs) = (tape.shape(decoder_output), tape.shape(real_image));
    if ds.n != rs.n || ds.c != rs.c || ds.h == 0 || rs.h % ds.h != 0 || rs.w % ds.w != 0 {
        return Err(Error::shape(format!(
            "reconstruction target {rs} cannot be area-downsampled onto decoder output {ds}"
        )));
    }
    let factor = rs.h / ds.h;
    if rs.w / ds.w != factor {
        return Err(Error::shape(format!(
            "reconstruction needs equal downsampling factors, got {}x{} -> {}x{}",
            rs.h, rs.w, ds.h, ds.w
        )));
    }
    let target = tape.value(real_image).area_downsample(factor)?;
    let target = tape.constant(target);
    tape.l1_distance(decoder_output, target)
}

// ---- totals -------------------------------------------------------------------------

/// Which frequency components are enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub hfd: bool,
    pub hfa: bool,
    pub fsc: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        hfd: true,
        hfa: true,
        fsc: true,
    };
    pub const BASELINE: Ablation = Ablation {
        hfd: false,
        hfa: false,
        fsc: false,
    };
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

/// Per-step loss values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub iteration: u64,
    pub l_d: f32,
    pub l_g: f32,
    pub l_d_hf: f32,
    pub l_g_hf: f32,
    pub l_align: f32,
    pub l_recons: f32,
    pub d_hf_per_scale: BTreeMap<TapScale, f32>,
    pub align_per_scale: BTreeMap<TapScale, f32>,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "iteration,l_d,l_g,l_d_hf,l_g_hf,l_align,l_recons";

    pub fn named_terms(&self) -> [(&'static str, f32); 6] {
        [
            ("l_d", self.l_d),
            ("l_g", self.l_g),
            ("l_d_hf", self.l_d_hf),
            ("l_g_hf", self.l_g_hf),
            ("l_align", self.l_align),
            ("l_recons", self.l_recons),
        ]
    }

    pub fn csv_row(&self) -> String {
        let mut row = self.iteration.to_string();
        for (_, v) in self.named_terms() {
            row.push(',');
            row.push_str(&v.to_string());
        }
        row
    }

    /// First non-finite term, if any.
    pub fn non_finite(&self) -> Option<(&'static str, f32)> {
        self.named_terms().into_iter().find(|(_, v)| !v.is_finite())
    }
}

/// Combine loss values with unit coefficients under `ablation`:
/// `d = l_d + l_recons + [hfd]·l_d_hf`, `g = l_g + [hfd]·l_g_hf + [hfa]·l_align`.
pub fn total_losses(parts: &LossReport, ablation: Ablation) -> Result<(f32, f32)> {
    if let Some((term, value)) = parts.non_finite() {
        return Err(Error::NonFinite {
            term,
            iteration: parts.iteration,
            value,
        });
    }
    let mut d = parts.l_d + parts.l_recons;
    let mut g = parts.l_g;
    if ablation.hfd {
        d += parts.l_d_hf;
        g += parts.l_g_hf;
    }
    if ablation.hfa {
        g += parts.l_align;
    }
    Ok((d, g))
}

/// Tape-level discriminator objective; terms whose flag is off are left out
/// of the graph entirely.
pub fn d_objective(
    tape: &mut Tape,
    l_d: Var,
    l_recons: Var,
    l_d_hf: Option<Var>,
    ablation: Ablation,
) -> Result<Var> {
    let mut total = tape.add(l_d, l_recons)?;
    if let (true, Some(hf)) = (ablation.hfd, l_d_hf) {
        total = tape.add(total, hf)?;
    }
    Ok(total)
}

/// Tape-level generator objective.
pub fn g_objective(
    tape: &mut Tape,
    l_g: Var,
    l_g_hf: Option<Var>,
    l_align: Option<Var>,
    ablation: Ablation,
) -> Result<Var> {
    let mut total = l_g;
    if let (true, Some(hf)) = (ablation.hfd, l_g_hf) {
        total = tape.add(total, hf)?;
    }
    if let (true, Some(al)) = (ablation.hfa, l_align) {
        total = tape.add(total, al)?;
    }
    Ok(total)
}

fn sum_scalars(tape: &mut Tape, vars: impl IntoIterator<Item = Var>) -> Result<Var> {
    let mut it = vars.into_iter();
    let first = it.next().ok_or_else(|| Error::invalid("sum of zero loss terms"))?;
    it.try_fold(first, |acc, v| tape.add(acc, v))
}
