use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;

use fregan_core::data::{load_image, load_image_dir, save_gray_png, save_rgb_png, DatasetKind, DatasetSpec};
use fregan_core::spectral::{
    azimuthal_average, power_spectrum_2d, spectrum_distance, spectrum_grid_csv, spectrum_heatmap,
    spectrum_slice,
};
use fregan_core::tensor::Tensor;
use fregan_core::train::{sample_to_dir, train_loop, TrainConfig, Trainer};
use fregan_core::verify;
use fregan_core::wavelet::{dwt_image, HaarKernels};

use crate::config::{FileConfig, DECOMPOSE_KEYS, SAMPLE_KEYS, SPECTRUM_KEYS, SYNTH_KEYS, TRAIN_KEYS};
use crate::{CompareArgs, DecomposeArgs, SampleArgs, SpectrumArgs, SynthArgs, TrainArgs, VerifyArgs};

pub const DEFAULT_TRAIN_DIR: &str = "fregan-run";
pub const DEFAULT_SAMPLE_DIR: &str = "fregan-samples";
pub const DEFAULT_DECOMPOSE_DIR: &str = "fregan-bands";
pub const DEFAULT_SPECTRUM_DIR: &str = "fregan-spectrum";
pub const DEFAULT_SYNTH_DIR: &str = "fregan-data";
pub const DEFAULT_SPECTRUM_SIZE: usize = 64;

/// A failed internal check, reported with exit code 2.
#[derive(Debug)]
pub struct InvariantFailure(pub String);

impl std::fmt::Display for InvariantFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InvariantFailure {}

/// 2 for invariant failures and diverged training, 1 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    let invariant = e.chain().any(|c| {
        c.is::<InvariantFailure>()
            || matches!(
                c.downcast_ref::<fregan_core::Error>(),
                Some(fregan_core::Error::NonFinite { .. })
            )
    });
    if invariant {
        2
    } else {
        1
    }
}

fn echo_config(name: &str, text: &str) {
    info!("resolved {name} config:\n{}", text.trim_end());
}

fn dataset_kind(name: Option<String>, dir: Option<PathBuf>) -> Result<DatasetKind> {
    match (name, dir) {
        (Some(_), Some(_)) => bail!("--dataset and --data-dir are mutually exclusive"),
        (_, Some(path)) => Ok(DatasetKind::Directory { path }),
        (Some(name), None) => Ok(DatasetKind::parse(&name)?),
        (None, None) => Ok(TrainConfig::default().dataset.kind),
    }
}

fn resolve_train(a: &TrainArgs, file: FileConfig) -> Result<TrainConfig> {
    let mut c = TrainConfig::default();
    let seed = a.seed.or(file.seed).unwrap_or(c.seed);
    c.seed = seed;
    let (name, dir) = match (&a.dataset, &a.data_dir) {
        (None, None) => (file.dataset, file.data_dir),
        _ => (a.dataset.clone(), a.data_dir.clone()),
    };
    c.dataset = DatasetSpec {
        kind: dataset_kind(name, dir)?,
        n: a.n.or(file.n).unwrap_or(c.dataset.n),
        size: a.size.or(file.size).unwrap_or(c.dataset.size),
        seed,
    };
    c.iterations = a.iters.or(file.iters).unwrap_or(c.iterations);
    c.batch = a.batch.or(file.batch).unwrap_or(c.batch);
    c.adam.lr = a.lr.or(file.lr).unwrap_or(c.adam.lr);
    c.ablation.hfd = !(a.no_hfd || file.no_hfd.unwrap_or(false));
    c.ablation.hfa = !(a.no_hfa || file.no_hfa.unwrap_or(false));
    c.ablation.fsc = !(a.no_fsc || file.no_fsc.unwrap_or(false));
    c.model.g_widths = file.g_widths.unwrap_or(c.model.g_widths);
    c.model.d_widths = file.d_widths.unwrap_or(c.model.d_widths);
    c.model.decoder_width = file.decoder_width.unwrap_or(c.model.decoder_width);
    c.model.hfd_width = file.hfd_width.unwrap_or(c.model.hfd_width);
    c.log_interval = file.log_interval.unwrap_or(c.log_interval);
    c.checkpoint_interval = file.checkpoint_interval.unwrap_or(c.checkpoint_interval);
    c.out_dir = Some(
        a.out
            .clone()
            .or(file.out)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_TRAIN_DIR)),
    );
    c.validate()?;
    Ok(c)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    file.only("train", TRAIN_KEYS)?;
    let resume = a.checkpoint.clone().or(file.checkpoint.clone());
    let mut trainer = match resume {
        Some(path) => {
            let conflicting = a.dataset.is_some()
                || a.data_dir.is_some()
                || a.n.is_some()
                || a.size.is_some()
                || a.batch.is_some()
                || a.seed.is_some()
                || a.lr.is_some()
                || a.no_hfd
                || a.no_hfa
                || a.no_fsc;
            if conflicting {
                bail!("when resuming only --iters and --out may be given; the rest comes from the checkpoint");
            }
            file.only("train --checkpoint", &["checkpoint", "iters", "out"])?;
            let mut t = Trainer::load(&path)?;
            if let Some(iters) = a.iters.or(file.iters) {
                t.config.iterations = iters;
            }
            if let Some(out) = a.out.clone().or(file.out) {
                t.config.out_dir = Some(out);
            }
            if t.config.out_dir.is_none() {
                t.config.out_dir = Some(PathBuf::from(DEFAULT_TRAIN_DIR));
            }
            if t.config.iterations <= t.iteration() {
                bail!(
                    "checkpoint is at iteration {}; --iters must be larger",
                    t.iteration()
                );
            }
            t
        }
        None => Trainer::new(resolve_train(&a, file)?)?,
    };
    let text = trainer.config.to_toml()?;
    echo_config("train", &text);
    let out = trainer.config.out_dir.clone().expect("set above");
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, &text).with_context(|| format!("writing {}", cfg_path.display()))?;
    let start = trainer.iteration();
    let outcome = train_loop(&mut trainer)?;
    let last = outcome.reports.last().expect("at least one step");
    println!("start_iteration={start}");
    println!("iterations={}", trainer.iteration());
    for (name, v) in last.named_terms() {
        println!("{name}={v}");
    }
    if let Some(log) = &outcome.log_path {
        println!("log={}", log.display());
    }
    if let Some(ck) = outcome.checkpoints.last() {
        println!("checkpoint={}", ck.display());
    }
    Ok(())
}

pub fn sample(a: SampleArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    file.only("sample", SAMPLE_KEYS)?;
    let Some(checkpoint) = a.checkpoint.or(file.checkpoint) else {
        bail!("sample needs --checkpoint");
    };
    let n = a.n.or(file.n).unwrap_or(16);
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let out = a
        .out
        .or(file.out)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_SAMPLE_DIR));
    echo_config(
        "sample",
        &format!(
            "checkpoint = {:?}\nn = {n}\nseed = {seed}\nout = {:?}",
            checkpoint.display().to_string(),
            out.display().to_string()
        ),
    );
    let written = sample_to_dir(&checkpoint, n, seed, &out)?;
    println!("written={}", written.len());
    println!("dir={}", out.display());
    Ok(())
}

/// Linear per-band display map: `v / max|v|`, so zero sits at mid-gray.
fn normalize_band(t: &Tensor) -> Tensor {
    let peak = t.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        t.clone()
    } else {
        t.map(|v| v / peak)
    }
}

fn band_csv(t: &Tensor) -> String {
    let s = t.shape();
    let mut out = String::from("c,y,x,value\n");
    for c in 0..s.c {
        for y in 0..s.h {
            for x in 0..s.w {
                writeln!(out, "{c},{y},{x},{}", t.at(0, c, y, x)).expect("string write");
            }
        }
    }
    out
}

pub fn decompose(a: DecomposeArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    file.only("decompose", DECOMPOSE_KEYS)?;
    let levels = a.levels.or(file.levels).unwrap_or(1);
    let out = a
        .out
        .or(file.out)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DECOMPOSE_DIR));
    echo_config(
        "decompose",
        &format!(
            "image = {:?}\nlevels = {levels}\nout = {:?}",
            a.image.display().to_string(),
            out.display().to_string()
        ),
    );
    let image = load_image(&a.image)?;
    let pyramid = dwt_image(&image, levels)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut files = Vec::new();
    let mut write_band = |tag: String, t: &Tensor| -> Result<()> {
        let png = out.join(format!("{tag}.png"));
        save_rgb_png(&normalize_band(t), &png)?;
        let csv = out.join(format!("{tag}.csv"));
        fs::write(&csv, band_csv(t)).with_context(|| format!("writing {}", csv.display()))?;
        files.push(tag);
        Ok(())
    };
    for (i, level) in pyramid.levels.iter().enumerate() {
        let l = i + 1;
        write_band(format!("level{l}_LH"), &level.lh)?;
        write_band(format!("level{l}_HL"), &level.hl)?;
        write_band(format!("level{l}_HH"), &level.hh)?;
    }
    write_band(format!("level{levels}_LL"), pyramid.approximation())?;
    println!("levels={levels}");
    println!("bands={}", files.join(","));
    println!("dir={}", out.display());
    Ok(())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn spectrum(a: SpectrumArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    file.only("spectrum", SPECTRUM_KEYS)?;
    let size = a.size.or(file.size).unwrap_or(DEFAULT_SPECTRUM_SIZE);
    let out = a
        .out
        .or(file.out)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_SPECTRUM_DIR));
    echo_config(
        "spectrum",
        &format!(
            "dir = {:?}\nsize = {size}\nout = {:?}",
            a.dir.display().to_string(),
            out.display().to_string()
        ),
    );
    let set = load_image_dir(&a.dir, size)?;
    let spec = power_spectrum_2d(&set)?;
    let profile = azimuthal_average(&spec);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    save_gray_png(&spectrum_heatmap(&spec), size, size, &out.join("spectrum.png"))?;
    write_file(&out.join("spectrum.csv"), spectrum_grid_csv(&spec))?;
    write_file(&out.join("profile.csv"), profile.to_csv())?;
    let mut slice = String::from("freq,value\n");
    for (i, v) in spectrum_slice(&spec).iter().enumerate() {
        writeln!(slice, "{i},{v}").expect("string write");
    }
    write_file(&out.join("slice.csv"), slice)?;
    println!("images={}", set.len());
    println!("bins={}", profile.bins());
    if let Some(peak) = profile.peak_bin(1) {
        println!("peak_bin={peak}");
    }
    println!("dir={}", out.display());
    Ok(())
}

/// Prints only the distance on stdout.
pub fn compare(a: CompareArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    file.only("compare", SPECTRUM_KEYS)?;
    let size = a.size.or(file.size).unwrap_or(DEFAULT_SPECTRUM_SIZE);
    let out = a.out.or(file.out);
    echo_config(
        "compare",
        &format!(
            "dir_a = {:?}\ndir_b = {:?}\nsize = {size}",
            a.dir_a.display().to_string(),
            a.dir_b.display().to_string()
        ),
    );
    let pa = azimuthal_average(&power_spectrum_2d(&load_image_dir(&a.dir_a, size)?)?);
    let pb = azimuthal_average(&power_spectrum_2d(&load_image_dir(&a.dir_b, size)?)?);
    let d = spectrum_distance(&pa, &pb)?;
    if let Some(out) = out {
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        write_file(&out.join("gap.csv"), d.gap_csv())?;
        write_file(
            &out.join("distance.txt"),
            format!("distance={:?}\nhigh_freq_gap={:?}\n", d.distance, d.high_freq_gap),
        )?;
    }
    info!("high_freq_gap={:?}", d.high_freq_gap);
    println!("{:?}", d.distance);
    Ok(())
}

pub fn verify(a: VerifyArgs) -> Result<()> {
    let kernels = match a.inject_kernel_fault {
        Some(delta) => HaarKernels::perturbed(delta),
        None => HaarKernels::standard(),
    };
    let results = verify::run_all(&kernels)?;
    let mut failed = Vec::new();
    for r in &results {
        println!("{}={}", r.name, if r.passed { "pass" } else { "fail" });
        info!("{}: {}", r.name, r.detail);
        if !r.passed {
            failed.push(format!("{} ({})", r.name, r.detail));
        }
    }
    if !failed.is_empty() {
        return Err(InvariantFailure(format!("failing suites: {}", failed.join(", "))).into());
    }
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    file.only("synth", SYNTH_KEYS)?;
    let name = a.dataset.or(file.dataset).unwrap_or_else(|| "sinusoid-mix".into());
    let spec = DatasetSpec {
        kind: DatasetKind::parse(&name)?,
        n: a.n.or(file.n).unwrap_or(16),
        size: a.size.or(file.size).unwrap_or(64),
        seed: a.seed.or(file.seed).unwrap_or(0),
    };
    let out = a
        .out
        .or(file.out)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_SYNTH_DIR));
    echo_config(
        "synth",
        &format!(
            "{}out = {:?}",
            toml::to_string(&spec).context("serializing dataset spec")?,
            out.display().to_string()
        ),
    );
    let set = spec.build()?;
    let files = set.save_pngs(&out, "image_")?;
    println!("written={}", files.len());
    println!("dir={}", out.display());
    Ok(())
}
