//! Toy generator and discriminator at 64×64 with feature taps at 8, 16 and 32.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fregan::{fsc_apply, FeatureTaps, TapScale, TapSource};
use crate::nn::{BatchNorm, Bound, Conv, ConvBlock, ConvTranspose, ParamSet, LEAKY_SLOPE};
use crate::tensor::{Tape, Var};

pub const LATENT_DIM: usize = 64;
pub const IMAGE_SIZE: usize = 64;
pub const IMAGE_CHANNELS: usize = 3;
/// Spatial size of the discriminator's reconstruction output.
pub const RECON_SIZE: usize = 32;

/// Channel widths of both networks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_dim: usize,
    /// Generator widths at 4, 8, 16, 32 and 64 pixels.
    pub g_widths: [usize; 5],
    /// Discriminator widths at 32, 16, 8 and 4 pixels.
    pub d_widths: [usize; 4],
    pub decoder_width: usize,
    pub hfd_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: LATENT_DIM,
            g_widths: [32, 32, 16, 16, 8],
            d_widths: [8, 16, 16, 32],
            decoder_width: 8,
            hfd_width: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = self.g_widths.iter().chain(&self.d_widths);
        if self.latent_dim == 0
            || self.decoder_width == 0
            || self.hfd_width == 0
            || widths.into_iter().any(|&w| w == 0)
        {
            return Err(Error::Config("model widths must be positive".into()));
        }
        Ok(())
    }

    /// Discriminator channel count at each tap scale.
    pub fn d_tap_channels(&self) -> [(TapScale, usize); 3] {
        [
            (TapScale::S32, self.d_widths[0]),
            (TapScale::S16, self.d_widths[1]),
            (TapScale::S8, self.d_widths[2]),
        ]
    }
}

/// Generator output.
#[derive(Clone, Debug)]
pub struct GOutput {
    pub image: Var,
    pub taps: FeatureTaps,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub params: ParamSet,
    latent_dim: usize,
    stem: ConvTranspose,
    stem_norm: BatchNorm,
    ups: Vec<ConvBlock>,
    out: Conv,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let w = config.g_widths;
        let mut params = ParamSet::new();
        let stem = ConvTranspose::new(&mut params, "g.stem", config.latent_dim, w[0], 4, 1, rng);
        let stem_norm = BatchNorm::new(&mut params, "g.stem.bn", w[0]);
        let ups = (0..4)
            .map(|i| {
                ConvBlock::new(&mut params, &format!("g.up{}", 8 << i), w[i], w[i + 1], 3, 1, 1, rng)
            })
            .collect();
        let out = Conv::new(&mut params, "g.out", w[4], IMAGE_CHANNELS, 3, 1, 1, true, rng);
        Generator {
            params,
            latent_dim: config.latent_dim,
            stem,
            stem_norm,
            ups,
            out,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// `z` (N×latent×1×1) → image N×3×64×64 and post-FSC taps at 8/16/32.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, z: Var, fsc: bool) -> Result<GOutput> {
        let s = tape.shape(z);
        if s.c != self.latent_dim || s.h != 1 || s.w != 1 {
            return Err(Error::shape(format!(
                "generator expects N x {} x 1 x 1 latents, got {s}",
                self.latent_dim
            )));
        }
        let h = self.stem.forward(tape, bound, z)?;
        let h = self.stem_norm.forward(tape, bound, h)?;
        let mut h = tape.leaky_relu(h, LEAKY_SLOPE);
        let mut taps = FeatureTaps::new(TapSource::Generator);
        for block in &self.ups {
            let up = tape.upsample_nearest2(h);
            h = block.forward(tape, bound, up)?;
            if let Some(scale) = TapScale::from_size(tape.shape(h).h) {
                if fsc {
                    h = fsc_apply(tape, h)?;
                }
                taps.insert(tape, scale, h)?;
            }
        }
        let h = self.out.forward(tape, bound, h)?;
        Ok(GOutput {
            image: tape.tanh(h),
            taps,
        })
    }
}

/// Discriminator output.
#[derive(Clone, Debug)]
pub struct DOutput {
    /// One score per sample, N×1×1×1.
    pub score: Var,
    pub taps: FeatureTaps,
    /// N×3×32×32 reconstruction decoded from the 8×8 tap, when requested.
    pub recon: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub params: ParamSet,
    downs: Vec<ConvBlock>,
    score: Conv,
    decoder: Vec<ConvBlock>,
    decoder_out: Conv,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let w = config.d_widths;
        let mut params = ParamSet::new();
        let cins = [IMAGE_CHANNELS, w[0], w[1], w[2]];
        let downs = (0..4)
            .map(|i| {
                ConvBlock::new(&mut params, &format!("d.down{}", 32 >> i), cins[i], w[i], 3, 2, 1, rng)
            })
            .collect();
        let score = Conv::new(&mut params, "d.score", w[3], 1, 4, 1, 0, true, rng);
        let dw = config.decoder_width;
        let decoder = vec![
            ConvBlock::new(&mut params, "d.dec16", w[2], dw, 3, 1, 1, rng),
            ConvBlock::new(&mut params, "d.dec32", dw, dw, 3, 1, 1, rng),
        ];
        let decoder_out = Conv::new(&mut params, "d.dec.out", dw, IMAGE_CHANNELS, 3, 1, 1, true, rng);
        Discriminator {
            params,
            downs,
            score,
            decoder,
            decoder_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, with_recon: bool) -> Result<DOutput> {
        let s = tape.shape(x);
        if s.c != IMAGE_CHANNELS || s.h != IMAGE_SIZE || s.w != IMAGE_SIZE {
            return Err(Error::shape(format!(
                "discriminator expects N x 3 x 64 x 64 images, got {s}"
            )));
        }
        let mut h = x;
        let mut taps = FeatureTaps::new(TapSource::Discriminator);
        for block in &self.downs {
            h = block.forward(tape, bound, h)?;
            if let Some(scale) = TapScale::from_size(tape.shape(h).h) {
                taps.insert(tape, scale, h)?;
            }
        }
        let map = self.score.forward(tape, bound, h)?;
        let score = tape.sample_mean(map);
        let recon = if with_recon {
            Some(self.decode(tape, bound, taps.get(TapScale::S8).expect("8x8 tap"))?)
        } else {
            None
        };
        Ok(DOutput { score, taps, recon })
    }

    fn decode(&self, tape: &mut Tape, bound: &Bound, tap: Var) -> Result<Var> {
        let mut r = tap;
        for block in &self.decoder {
            let up = tape.upsample_nearest2(r);
            r = block.forward(tape, bound, up)?;
        }
        let r = self.decoder_out.forward(tape, bound, r)?;
        Ok(tape.tanh(r))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generator_shapes_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let config = ModelConfig::default();
        let g = Generator::new(&config, &mut rng);
        let mut tape = Tape::new();
        let bound = g.params.bind(&mut tape, true);
        let z = tape.constant(Tensor::randn([3, LATENT_DIM, 1, 1], 1.0, &mut rng));
        let out = g.forward(&mut tape, &bound, z, true).unwrap();
        let img = tape.value(out.image);
        assert_eq!(img.shape().dims(), [3, 3, 64, 64]);
        assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let scales: Vec<_> = out.taps.scales().collect();
        assert_eq!(scales, vec![TapScale::S8, TapScale::S16, TapScale::S32]);
        let bad = tape.constant(Tensor::zeros([3, 10, 1, 1]));
        assert!(g.forward(&mut tape, &bound, bad, true).is_err());
    }

    #[test]
    fn zero_latent_gives_zero_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Generator::new(&ModelConfig::default(), &mut rng);
        let mut tape = Tape::new();
        let bound = g.params.bind(&mut tape, false);
        let z = tape.constant(Tensor::zeros([2, LATENT_DIM, 1, 1]));
        let out = g.forward(&mut tape, &bound, z, true).unwrap();
        assert!(tape.value(out.image).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn discriminator_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let config = ModelConfig::default();
        let d = Discriminator::new(&config, &mut rng);
        let mut tape = Tape::new();
        let bound = d.params.bind(&mut tape, true);
        let x = tape.constant(Tensor::rand_uniform([2, 3, 64, 64], -1.0, 1.0, &mut rng));
        let out = d.forward(&mut tape, &bound, x, true).unwrap();
        assert_eq!(tape.shape(out.score).dims(), [2, 1, 1, 1]);
        assert_eq!(tape.shape(out.recon.unwrap()).dims(), [2, 3, 32, 32]);
        for (scale, c) in config.d_tap_channels() {
            let s = tape.shape(out.taps.get(scale).unwrap());
            assert_eq!(s.dims(), [2, c, scale.size(), scale.size()]);
        }
        let small = tape.constant(Tensor::zeros([2, 3, 32, 32]));
        assert!(d.forward(&mut tape, &bound, small, false).is_err());
    }
}
