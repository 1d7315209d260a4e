//! Self-checking invariant suites, run by `fregan verify`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{DatasetKind, DatasetSpec};
use crate::error::Result;
use crate::fregan::{
    fsc_apply, hfa_loss, hinge_d_loss, hinge_g_loss, recon_loss, Ablation, FeatureTaps, TapScale,
    TapSource,
};
use crate::models::ModelConfig;
use crate::optim::AdamState;
use crate::rng::{stream_rng, Stream};
use crate::tensor::{gradcheck, Shape, Tape, Tensor, Var};
use crate::train::{latent, TrainConfig, Trainer};
use crate::wavelet::{wave_pool_with, wave_unpool_with, HaarKernels};

pub const SUITES: [&str; 5] = [
    "reconstruction",
    "parseval",
    "adjoint",
    "gradcheck",
    "baseline-equivalence",
];

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &'static str, passed: bool, detail: String) -> SuiteResult {
    SuiteResult { name, passed, detail }
}

fn random_even_shape(rng: &mut ChaCha8Rng) -> Shape {
    Shape::new(
        rng.random_range(1..=4),
        rng.random_range(1..=8),
        2 * rng.random_range(1..=16),
        2 * rng.random_range(1..=16),
    )
}

/// Max `|unpool(pool(x)) - x|` over random tensors must stay below 1e-5.
pub fn reconstruction(kernels: &HaarKernels, cases: usize) -> Result<SuiteResult> {
    let mut rng = stream_rng(0, Stream::Test, 1);
    let mut worst = 0.0f32;
    for _ in 0..cases {
        let x = Tensor::randn(random_even_shape(&mut rng), 1.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let bands = wave_pool_with(&mut tape, v, kernels)?;
        let y = wave_unpool_with(&mut tape, &bands, kernels)?;
        worst = worst.max(tape.value(y).max_abs_diff(&x)?);
    }
    Ok(result(
        "reconstruction",
        worst < 1e-5,
        format!("max_abs_error={worst:e}"),
    ))
}

/// Relative gap between input energy and summed band energy must stay below 1e-4.
pub fn parseval(kernels: &HaarKernels, cases: usize) -> Result<SuiteResult> {
    let mut rng = stream_rng(0, Stream::Test, 2);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let x = Tensor::randn(random_even_shape(&mut rng), 1.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let bands = wave_pool_with(&mut tape, v, kernels)?;
        let e: f64 = bands.as_array().iter().map(|&b| tape.value(b).energy()).sum();
        worst = worst.max((e - x.energy()).abs() / x.energy());
    }
    Ok(result("parseval", worst < 1e-4, format!("max_rel_error={worst:e}")))
}

/// `<conv(x, w), y> = <x, conv_transpose(y, w)>` within 1e-4 relative.
pub fn adjoint(cases: usize) -> Result<SuiteResult> {
    let mut rng = stream_rng(0, Stream::Test, 3);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let groups = [1, 2][rng.random_range(0..2)];
        let cin = groups * rng.random_range(1..=3);
        let cout = groups * rng.random_range(1..=3);
        let k = rng.random_range(1..=3);
        let stride = rng.random_range(1..=2);
        let h = rng.random_range(k..=k + 6);
        let w = rng.random_range(k..=k + 6);
        let x = Tensor::randn([2, cin, h, w], 1.0, &mut rng);
        let wt = Tensor::randn([cout, cin / groups, k, k], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(wt);
        let yv = tape.conv2d(xv, wv, None, stride, 0, groups)?;
        let y = Tensor::randn(tape.shape(yv), 1.0, &mut rng);
        let lhs = tape.value(yv).dot(&y)?;
        let yc = tape.constant(y);
        let back = tape.conv2d_transpose(yc, wv, stride, groups)?;
        // the transpose covers (ho-1)*s+k rows; x may have a few more that the conv never read
        let bs = tape.shape(back);
        let mut rhs = 0.0f64;
        for n in 0..bs.n {
            for c in 0..bs.c {
                for yy in 0..bs.h {
                    for xx in 0..bs.w {
                        rhs += f64::from(tape.value(back).at(n, c, yy, xx)) * f64::from(x.at(n, c, yy, xx));
                    }
                }
            }
        }
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12));
    }
    Ok(result("adjoint", worst < 1e-4, format!("max_rel_error={worst:e}")))
}

fn project(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let r = Tensor::randn(tape.shape(v), 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let r = tape.constant(r);
    let p = tape.mul(v, r).expect("same shape");
    tape.sum_all(p)
}

/// Values in ±[lo, hi].
fn away_from_zero(shape: impl Into<Shape>, lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let shape = shape.into();
    let data = (0..shape.numel())
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

/// Hinge scores kept at least 0.05 away from ±1.
fn scores_away_from_margin(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..n)
        .map(|_| loop {
            let v: f32 = rng.random_range(-2.5..2.5);
            if (v.abs() - 1.0).abs() > 0.05 {
                break v;
            }
        })
        .collect();
    Tensor::new([n, 1, 1, 1], data).expect("shape")
}

/// Per-op gradient checks: `(op name, worst relative error)`.
pub fn gradient_cases() -> Result<Vec<(&'static str, f64)>> {
    let mut rng = stream_rng(0, Stream::Test, 4);
    let mut out = Vec::new();

    let x = Tensor::randn([2, 2, 5, 5], 0.2, &mut rng);
    let w = Tensor::randn([3, 2, 3, 3], 0.2, &mut rng);
    let b = Tensor::randn([1, 3, 1, 1], 0.2, &mut rng);
    let r = gradcheck(
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1, 1)?;
            Ok(project(t, y, 11))
        },
        &[x, w, b],
    )?;
    out.push(("conv2d", r.worst()));

    let y = Tensor::randn([1, 4, 3, 3], 0.2, &mut rng);
    let w = Tensor::randn([4, 1, 2, 2], 0.2, &mut rng);
    let r = gradcheck(
        |t, v| {
            let o = t.conv2d_transpose(v[0], v[1], 2, 2)?;
            Ok(project(t, o, 12))
        },
        &[y, w],
    )?;
    out.push(("conv2d_transpose", r.worst()));

    let x = Tensor::randn([2, 2, 3, 3], 0.1, &mut rng);
    let g = Tensor::vector(&[1.2, 0.7]);
    let bt = Tensor::vector(&[0.1, -0.3]);
    let r = gradcheck(
        |t, v| {
            let o = t.batch_norm2d(v[0], v[1], v[2], 1e-5)?;
            Ok(project(t, o, 13))
        },
        &[x, g, bt],
    )?;
    out.push(("batch_norm2d", r.worst()));

    let x = away_from_zero([2, 3, 4, 4], 0.05, 1.0, &mut rng);
    let r = gradcheck(
        |t, v| {
            let o = t.leaky_relu(v[0], 0.2);
            Ok(project(t, o, 14))
        },
        &[x],
    )?;
    out.push(("leaky_relu", r.worst()));

    let x = Tensor::randn([2, 3, 4, 4], 0.5, &mut rng);
    let r = gradcheck(
        |t, v| {
            let o = t.tanh(v[0]);
            Ok(project(t, o, 15))
        },
        &[x],
    )?;
    out.push(("tanh", r.worst()));

    let x = Tensor::randn([2, 2, 3, 3], 0.5, &mut rng);
    let r = gradcheck(
        |t, v| {
            let o = t.upsample_nearest2(v[0]);
            Ok(project(t, o, 16))
        },
        &[x],
    )?;
    out.push(("upsample_nearest2", r.worst()));

    let a = Tensor::randn([2, 3, 4, 4], 0.5, &mut rng);
    let shift = away_from_zero([2, 3, 4, 4], 0.1, 1.0, &mut rng);
    let b = a.zip_map(&shift, |x, s| x + s)?;
    let r = gradcheck(|t, v| t.l1_distance(v[0], v[1]), &[a, b])?;
    out.push(("l1_distance", r.worst()));

    let real = scores_away_from_margin(6, &mut rng);
    let fake = scores_away_from_margin(6, &mut rng);
    let r = gradcheck(|t, v| Ok(hinge_d_loss(t, v[0], v[1])), &[real, fake.clone()])?;
    let rg = gradcheck(|t, v| Ok(hinge_g_loss(t, v[0])), &[fake])?;
    out.push(("hinge", r.worst().max(rg.worst())));

    let (d8, g8) = hfa_points(&mut rng)?;
    let r = gradcheck(
        |t, v| {
            let d = t.constant(d8.clone());
            let mut dt = FeatureTaps::new(TapSource::Discriminator);
            dt.insert(t, TapScale::S8, d)?;
            let mut gt = FeatureTaps::new(TapSource::Generator);
            gt.insert(t, TapScale::S8, v[0])?;
            Ok(hfa_loss(t, &dt, &gt)?.total)
        },
        &[g8],
    )?;
    out.push(("hfa_loss", r.worst()));

    let x = Tensor::randn([1, 2, 4, 4], 0.2, &mut rng);
    let r = gradcheck(
        |t, v| {
            let o = fsc_apply(t, v[0])?;
            Ok(project(t, o, 17))
        },
        &[x],
    )?;
    out.push(("fsc_apply", r.worst()));

    let real = Tensor::randn([2, 3, 8, 8], 0.3, &mut rng);
    let target = real.area_downsample(2)?;
    let gap = away_from_zero([2, 3, 4, 4], 0.1, 0.5, &mut rng);
    let out_img = target.zip_map(&gap, |t, g| t + g)?;
    let r = gradcheck(
        |t, v| {
            let x = t.constant(real.clone());
            recon_loss(t, v[0], x)
        },
        &[out_img],
    )?;
    out.push(("recon_loss", r.worst()));
    Ok(out)
}

/// HFA evaluation point whose channel-meaned HF maps differ by at least 0.05 everywhere.
fn hfa_points(rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
    loop {
        let d = Tensor::randn([2, 3, 8, 8], 0.5, rng);
        let g = Tensor::randn([2, 2, 8, 8], 0.5, rng);
        let hf = |x: &Tensor| -> Result<Tensor> {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let h = crate::fregan::high_frequency(&mut tape, v)?;
            let m = tape.channel_mean(h);
            Ok(tape.value(m).clone())
        };
        let gap = hf(&d)?.zip_map(&hf(&g)?, |a, b| (a - b).abs())?;
        if gap.data().iter().all(|&v| v > 0.05) {
            return Ok((d, g));
        }
    }
}

pub fn gradients() -> Result<SuiteResult> {
    let cases = gradient_cases()?;
    let worst = cases.iter().map(|c| c.1).fold(0.0, f64::max);
    let detail = cases
        .iter()
        .map(|(n, e)| format!("{n}={e:.2e}"))
        .collect::<Vec<_>>()
        .join(" ");
    Ok(result("gradcheck", worst < crate::tensor::GRAD_REL_TOL, detail))
}

/// Config used by the baseline-equivalence check.
pub fn baseline_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        batch: 2,
        iterations: 20,
        ablation: Ablation::BASELINE,
        dataset: DatasetSpec {
            kind: DatasetKind::GradientBlobs,
            n: 4,
            size: 64,
            seed,
        },
        model: ModelConfig {
            latent_dim: 64,
            g_widths: [8, 8, 4, 4, 4],
            d_widths: [4, 4, 4, 4],
            decoder_width: 4,
            hfd_width: 4,
        },
        ..TrainConfig::default()
    }
}

/// Plain hinge GAN with a self-supervised reconstruction term, coded directly
/// on the tape. Returns `(l_d, l_g)` per step.
pub fn plain_hinge_gan(config: &TrainConfig, steps: u64) -> Result<Vec<(f32, f32)>> {
    let data = config.dataset.build()?;
    let mut rng = stream_rng(config.seed, Stream::Init, 0);
    let mut g = crate::models::Generator::new(&config.model, &mut rng);
    let mut d = crate::models::Discriminator::new(&config.model, &mut rng);
    let mut g_opt = AdamState::new(&g.params, config.adam);
    let mut d_opt = AdamState::new(&d.params, config.adam);
    let mut sampler = crate::data::BatchSampler::new(data.len(), config.batch, config.seed)?;
    let mut out = Vec::new();
    for it in 0..steps {
        let real = data.gather(&sampler.next_indices())?;
        let n = config.batch;

        let mut tape = Tape::new();
        let gb = g.params.bind(&mut tape, false);
        let db = d.params.bind(&mut tape, true);
        let z = tape.constant(latent(config.seed, Stream::LatentD, it, n, g.latent_dim()));
        let fake = g.forward(&mut tape, &gb, z, false)?.image;
        let fake = tape.detach(fake);
        let x = tape.constant(real);
        let on_real = d.forward(&mut tape, &db, x, true)?;
        let on_fake = d.forward(&mut tape, &db, fake, false)?;
        let neg = tape.scale(on_real.score, -1.0);
        let m_real = tape.shift(neg, 1.0);
        let t_real = tape.relu_mean(m_real);
        let m_fake = tape.shift(on_fake.score, 1.0);
        let t_fake = tape.relu_mean(m_fake);
        let l_d = tape.add(t_real, t_fake)?;
        let target = tape.value(x).area_downsample(2)?;
        let target = tape.constant(target);
        let l_rec = tape.l1_distance(on_real.recon.expect("requested"), target)?;
        let total = tape.add(l_d, l_rec)?;
        tape.backward(total)?;
        let ld = tape.value(l_d).item()?;
        d_opt.update(&mut d.params, &db.grads(&tape))?;

        let mut tape = Tape::new();
        let gb = g.params.bind(&mut tape, true);
        let db = d.params.bind(&mut tape, false);
        let z = tape.constant(latent(config.seed, Stream::LatentG, it, n, g.latent_dim()));
        let img = g.forward(&mut tape, &gb, z, false)?.image;
        let score = d.forward(&mut tape, &db, img, false)?.score;
        let mean = tape.mean_all(score);
        let l_g = tape.scale(mean, -1.0);
        tape.backward(l_g)?;
        let lg = tape.value(l_g).item()?;
        g_opt.update(&mut g.params, &gb.grads(&tape))?;
        out.push((ld, lg));
    }
    Ok(out)
}

pub fn baseline_equivalence(steps: u64) -> Result<SuiteResult> {
    let config = TrainConfig {
        iterations: steps,
        ..baseline_config(3)
    };
    let reference = plain_hinge_gan(&config, steps)?;
    let mut trainer = Trainer::new(config)?;
    let mut mismatch = None;
    for (i, (ld, lg)) in reference.iter().enumerate() {
        let r = trainer.step()?;
        let same = r.l_d.to_bits() == ld.to_bits() && r.l_g.to_bits() == lg.to_bits();
        let zero_hf = r.l_d_hf == 0.0 && r.l_g_hf == 0.0 && r.l_align == 0.0;
        if !(same && zero_hf) && mismatch.is_none() {
            mismatch = Some(i);
        }
    }
    Ok(match mismatch {
        None => result("baseline-equivalence", true, format!("steps={steps} bit-identical")),
        Some(i) => result("baseline-equivalence", false, format!("first mismatch at step {i}")),
    })
}

/// Run every suite, with `kernels` used by the wavelet suites.
pub fn run_all(kernels: &HaarKernels) -> Result<Vec<SuiteResult>> {
    Ok(vec![
        reconstruction(kernels, 50)?,
        parseval(kernels, 50)?,
        adjoint(50)?,
        gradients()?,
        baseline_equivalence(20)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_kernels_pass_wavelet_suites() {
        let k = HaarKernels::standard();
        assert!(reconstruction(&k, 10).unwrap().passed);
        assert!(parseval(&k, 10).unwrap().passed);
    }

    #[test]
    fn perturbed_kernels_fail_reconstruction() {
        let k = HaarKernels::perturbed(1e-3);
        assert!(!reconstruction(&k, 5).unwrap().passed);
    }

    #[test]
    fn adjoint_and_gradients_pass() {
        assert!(adjoint(10).unwrap().passed);
        let g = gradients().unwrap();
        assert!(g.passed, "{}", g.detail);
    }

    #[test]
    fn baseline_matches_plain_reference() {
        let r = baseline_equivalence(3).unwrap();
        assert!(r.passed, "{}", r.detail);
    }
}
