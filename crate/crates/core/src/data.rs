//! Synthetic corpora with known frequency content, image-directory ingestion,
//! 8-bit conversion and seeded batching.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Shape, Tensor};

pub const ALLOWED_SIZES: [usize; 3] = [32, 64, 128];
pub const CHECKER_TILES: [usize; 3] = [2, 4, 8];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Sums of oriented sinusoids. With `frequency` set, each image is a
    /// single horizontal sinusoid with that many cycles per image width.
    SinusoidMix {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        frequency: Option<usize>,
    },
    /// Two-valued checkerboards; `tile` is the pattern period in pixels.
    Checkerboard {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tile: Option<usize>,
    },
    /// Smooth ramps overlaid with sharp-edged discs.
    GradientBlobs,
    /// PNG / PPM files, area-resized to `size`.
    Directory { path: PathBuf },
}

impl DatasetKind {
    /// Parse a synthetic dataset name; `sinusoid:K` fixes the frequency and
    /// `checkerboard:T` the tile.
    pub fn parse(name: &str) -> Result<DatasetKind> {
        let (base, arg) = match name.split_once(':') {
            Some((b, a)) => {
                let v = a
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad dataset parameter in `{name}`")))?;
                (b, Some(v))
            }
            None => (name, None),
        };
        Ok(match base {
            "sinusoid-mix" | "sinusoid" => DatasetKind::SinusoidMix { frequency: arg },
            "checkerboard" => DatasetKind::Checkerboard { tile: arg },
            "gradient-blobs" if arg.is_none() => DatasetKind::GradientBlobs,
            other => {
                return Err(Error::Config(format!(
                    "unknown dataset `{other}` (expected sinusoid-mix[:K], checkerboard[:T] or gradient-blobs)"
                )))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub kind: DatasetKind,
    pub n: usize,
    pub size: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !ALLOWED_SIZES.contains(&self.size) {
            return Err(Error::Config(format!(
                "dataset size {} is not one of {ALLOWED_SIZES:?}",
                self.size
            )));
        }
        if self.n == 0 {
            return Err(Error::Config("dataset needs n >= 1".into()));
        }
        match self.kind {
            DatasetKind::SinusoidMix { frequency: Some(k) } if k == 0 || k > self.size / 2 => {
                Err(Error::Config(format!(
                    "sinusoid frequency {k} outside 1..={}",
                    self.size / 2
                )))
            }
            DatasetKind::Checkerboard { tile: Some(t) } if !CHECKER_TILES.contains(&t) => Err(
                Error::Config(format!("checkerboard tile {t} is not one of {CHECKER_TILES:?}")),
            ),
            _ => Ok(()),
        }
    }

    /// Generate (or load) the images.
    pub fn build(&self) -> Result<ImageSet> {
        self.validate()?;
        match &self.kind {
            DatasetKind::Directory { path } => {
                let set = load_image_dir(path, self.size)?;
                if set.len() < self.n {
                    return Err(Error::Config(format!(
                        "{} holds {} images, fewer than the requested {}",
                        path.display(),
                        set.len(),
                        self.n
                    )));
                }
                set.subset(&(0..self.n).collect::<Vec<_>>())
            }
            _ => synth_dataset(self),
        }
    }
}

/// `N` RGB images stored as one `N×3×S×S` tensor with values in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    data: Tensor,
}

impl ImageSet {
    pub fn new(data: Tensor) -> Result<Self> {
        let s = data.shape();
        if s.c != 3 || s.h != s.w || s.n == 0 {
            return Err(Error::shape(format!(
                "image set must be N x 3 x S x S with N >= 1, got {s}"
            )));
        }
        Ok(ImageSet { data })
    }

    pub fn len(&self) -> usize {
        self.data.shape().n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn size(&self) -> usize {
        self.data.shape().h
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn image(&self, i: usize) -> Tensor {
        let s = self.data.shape();
        Tensor::new([1, 3, s.h, s.w], self.data.sample(i).to_vec()).expect("sample shape")
    }

    /// Stack the images at `indices` into one batch.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let s = self.data.shape();
        let mut data = Vec::with_capacity(indices.len() * s.sample_len());
        for &i in indices {
            if i >= s.n {
                return Err(Error::invalid(format!("image index {i} out of range ({})", s.n)));
            }
            data.extend_from_slice(self.data.sample(i));
        }
        Tensor::new([indices.len(), 3, s.h, s.w], data)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<ImageSet> {
        ImageSet::new(self.gather(indices)?)
    }

    /// Write each image as `{prefix}{index:04}.png`.
    pub fn save_pngs(&self, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        (0..self.len())
            .map(|i| {
                let path = dir.join(format!("{prefix}{i:04}.png"));
                save_rgb_png(&self.image(i), &path)?;
                Ok(path)
            })
            .collect()
    }
}

/// Generate a synthetic corpus.
pub fn synth_dataset(spec: &DatasetSpec) -> Result<ImageSet> {
    spec.validate()?;
    let size = spec.size;
    let images: Vec<Tensor> = (0..spec.n)
        .map(|i| {
            let mut rng = stream_rng(spec.seed, Stream::DataGen, i as u64);
            match spec.kind {
                DatasetKind::SinusoidMix { frequency } => sinusoid_image(size, frequency, &mut rng),
                DatasetKind::Checkerboard { tile } => {
                    let t = tile.unwrap_or_else(|| CHECKER_TILES[rng.random_range(0..3)]);
                    let a = rng.random_range(-1.0..=1.0);
                    let b = rng.random_range(-1.0..=1.0);
                    checkerboard(size, t, a, b)
                }
                DatasetKind::GradientBlobs => blobs_image(size, &mut rng),
                DatasetKind::Directory { .. } => unreachable!("directories are loaded"),
            }
        })
        .collect();
    ImageSet::new(Tensor::stack(&images.iter().collect::<Vec<_>>())?)
}

fn rgb_from_plane(size: usize, plane: &[f64], color: [f64; 3]) -> Tensor {
    let mut data = Vec::with_capacity(3 * plane.len());
    for c in color {
        data.extend(plane.iter().map(|v| (v * c).clamp(-1.0, 1.0) as f32));
    }
    Tensor::new([1, 3, size, size], data).expect("plane size")
}

fn sinusoid_image<R: Rng + ?Sized>(size: usize, frequency: Option<usize>, rng: &mut R) -> Tensor {
    let s = size as f64;
    let mut plane = vec![0.0f64; size * size];
    match frequency {
        Some(k) => {
            let phase = rng.random_range(0.0..2.0 * PI);
            for y in 0..size {
                for x in 0..size {
                    plane[y * size + x] = (2.0 * PI * k as f64 * x as f64 / s + phase).cos();
                }
            }
        }
        None => {
            let parts = rng.random_range(2..=3);
            let comps: Vec<(f64, f64, f64, f64)> = (0..parts)
                .map(|_| {
                    let k = rng.random_range(1..=size / 4) as f64;
                    let theta = rng.random_range(0.0..PI);
                    let phase = rng.random_range(0.0..2.0 * PI);
                    let amp = rng.random_range(0.3..1.0);
                    (k, theta, phase, amp)
                })
                .collect();
            let total: f64 = comps.iter().map(|c| c.3).sum();
            for y in 0..size {
                for x in 0..size {
                    plane[y * size + x] = comps
                        .iter()
                        .map(|&(k, th, ph, a)| {
                            let u = x as f64 * th.cos() + y as f64 * th.sin();
                            a * (2.0 * PI * k * u / s + ph).cos()
                        })
                        .sum::<f64>()
                        / total;
                }
            }
        }
    }
    let color = [
        rng.random_range(0.6..=1.0),
        rng.random_range(0.6..=1.0),
        rng.random_range(0.6..=1.0),
    ];
    rgb_from_plane(size, &plane, color)
}

/// Checkerboard with period `tile` (cells of `tile/2` pixels); the top-left
/// cell holds `a`, its neighbours `b`. All channels are equal.
pub fn checkerboard(size: usize, tile: usize, a: f32, b: f32) -> Tensor {
    let cell = (tile / 2).max(1);
    let mut plane = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            plane[y * size + x] = if (y / cell + x / cell).is_multiple_of(2) { a } else { b };
        }
    }
    let data = [plane.as_slice(); 3].concat();
    Tensor::new([1, 3, size, size], data).expect("plane size")
}

fn blobs_image<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Tensor {
    let s = size as f64;
    let theta = rng.random_range(0.0..2.0 * PI);
    let (dx, dy) = (theta.cos(), theta.sin());
    let ends: Vec<[f64; 2]> = (0..3)
        .map(|_| [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)])
        .collect();
    let discs: Vec<(f64, f64, f64, [f64; 3])> = (0..rng.random_range(1..=3))
        .map(|_| {
            (
                rng.random_range(0.0..s),
                rng.random_range(0.0..s),
                rng.random_range(s / 10.0..s / 4.0),
                [
                    rng.random_range(-1.0..=1.0),
                    rng.random_range(-1.0..=1.0),
                    rng.random_range(-1.0..=1.0),
                ],
            )
        })
        .collect();
    let mut data = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (cx, cy) = (x as f64 + 0.5 - s / 2.0, y as f64 + 0.5 - s / 2.0);
            let t = ((cx * dx + cy * dy) / s + 0.5).clamp(0.0, 1.0);
            let mut px: [f64; 3] = std::array::from_fn(|c| ends[c][0] + t * (ends[c][1] - ends[c][0]));
            for (ox, oy, r, color) in &discs {
                if (x as f64 + 0.5 - ox).powi(2) + (y as f64 + 0.5 - oy).powi(2) <= r * r {
                    px = *color;
                }
            }
            for c in 0..3 {
                data[(c * size + y) * size + x] = px[c].clamp(-1.0, 1.0) as f32;
            }
        }
    }
    Tensor::new([1, 3, size, size], data).expect("plane size")
}

// ---- 8-bit conversion ---------------------------------------------------------

pub fn u8_to_unit(v: u8) -> f32 {
    f32::from(v) / 127.5 - 1.0
}

pub fn unit_to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Save a `1×3×H×W` tensor in [-1, 1] as an 8-bit RGB PNG.
pub fn save_rgb_png(image: &Tensor, path: &Path) -> Result<()> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::shape(format!("expected a 1 x 3 x H x W image, got {s}")));
    }
    let plane = s.plane();
    let d = image.data();
    let buf = ImageBuffer::from_fn(s.w as u32, s.h as u32, |x, y| {
        let i = y as usize * s.w + x as usize;
        Rgb([unit_to_u8(d[i]), unit_to_u8(d[plane + i]), unit_to_u8(d[2 * plane + i])])
    });
    buf.save(path).map_err(|e| image_error(path, e))
}

/// Save a row-major `h×w` plane of bytes as a grayscale PNG.
pub fn save_gray_png(pixels: &[u8], h: usize, w: usize, path: &Path) -> Result<()> {
    let buf = ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, pixels.to_vec())
        .ok_or_else(|| Error::shape(format!("{} bytes for a {h}x{w} image", pixels.len())))?;
    buf.save(path).map_err(|e| image_error(path, e))
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(source) => Error::io(path, source),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

/// Decode one PNG / PPM file to a `1×3×H×W` tensor in [-1, 1].
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = u8_to_unit(px[c]);
        }
    }
    Tensor::new([1, 3, h, w], data)
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pnm"))
        .unwrap_or(false)
}

/// Load every PNG / PPM file in `dir` (sorted by file name), area-resized to
/// `size×size`.
pub fn load_image_dir(dir: &Path, size: usize) -> Result<ImageSet> {
    if size == 0 {
        return Err(Error::invalid("resize target must be positive"));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    if files.is_empty() {
        return Err(Error::Image {
            path: dir.to_path_buf(),
            message: "directory contains no PNG or PPM images".into(),
        });
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    let images = files
        .iter()
        .map(|p| area_resize(&load_image(p)?, size, size))
        .collect::<Result<Vec<_>>>()?;
    ImageSet::new(Tensor::stack(&images.iter().collect::<Vec<_>>())?)
}

/// Per-axis weights of an exact area (box) resample from `src` to `dst` samples.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut w = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < src {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    w.push((i, overlap / scale));
                }
                i += 1;
            }
            w
        })
        .collect()
}

/// Area-average resample of every plane to `h×w`.
pub fn area_resize(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = x.shape();
    if h == 0 || w == 0 || s.h == 0 || s.w == 0 {
        return Err(Error::shape(format!("cannot resize {s} to {h}x{w}")));
    }
    if (s.h, s.w) == (h, w) {
        return Ok(x.clone());
    }
    let (wy, wx) = (area_weights(s.h, h), area_weights(s.w, w));
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w));
    let mut rows = vec![0.0f64; h * s.w];
    for n in 0..s.n {
        for c in 0..s.c {
            rows.iter_mut().for_each(|v| *v = 0.0);
            for (oy, ws) in wy.iter().enumerate() {
                for &(iy, wt) in ws {
                    for ix in 0..s.w {
                        rows[oy * s.w + ix] += wt * f64::from(x.at(n, c, iy, ix));
                    }
                }
            }
            for oy in 0..h {
                for (ox, ws) in wx.iter().enumerate() {
                    let v: f64 = ws.iter().map(|&(ix, wt)| wt * rows[oy * s.w + ix]).sum();
                    out.set(n, c, oy, ox, v as f32);
                }
            }
        }
    }
    Ok(out)
}

// ---- batching ---------------------------------------------------------------

/// Seeded epoch shuffler addressed by absolute sample position, so a stream
/// can be resumed from any point.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    batch: usize,
    seed: u64,
    position: u64,
    cached: Option<(u64, Vec<usize>)>,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 || batch > n {
            return Err(Error::invalid(format!(
                "batch size {batch} must be in 1..={n} (the number of images)"
            )));
        }
        Ok(BatchSampler {
            n,
            batch,
            seed,
            position: 0,
            cached: None,
        })
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn seek(&mut self, position: u64) {
        self.position = position;
    }

    fn permutation(&mut self, epoch: u64) -> &[usize] {
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.n).collect();
            perm.shuffle(&mut stream_rng(self.seed, Stream::Shuffle, epoch));
            self.cached = Some((epoch, perm));
        }
        &self.cached.as_ref().expect("just cached").1
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        let n = self.n as u64;
        let out = (0..self.batch as u64)
            .map(|k| {
                let p = self.position + k;
                self.permutation(p / n)[(p % n) as usize]
            })
            .collect();
        self.position += self.batch as u64;
        out
    }
}

/// Endless iterator of shuffled batches.
pub struct Batches<'a> {
    set: &'a ImageSet,
    sampler: BatchSampler,
}

impl Iterator for Batches<'_> {
    type Item = Tensor;

    fn next(&mut self) -> Option<Tensor> {
        let idx = self.sampler.next_indices();
        Some(self.set.gather(&idx).expect("indices in range"))
    }
}

pub fn batches(set: &ImageSet, batch: usize, seed: u64) -> Result<Batches<'_>> {
    Ok(Batches {
        set,
        sampler: BatchSampler::new(set.len(), batch, seed)?,
    })
}
