//! Procedural synthetic angiography data, PNG I/O and the unpaired loader.
//!
//! A synthetic scene is a smooth background with faint anatomy along a
//! hidden vessel tree, the binary tree mask, and the angiography obtained by
//! darkening the background under the (slightly blurred) mask. Domain A
//! keeps only backgrounds, domain B only angiographies, each from its own
//! seed stream.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent sub-seed for `(base, tag, index)`.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    mix64(mix64(mix64(base) ^ tag.wrapping_mul(0xA24B_AED4_963E_E407)) ^ index)
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const MIN_SIZE: usize = 16;

fn check_size(size: usize) -> Result<()> {
    if size < MIN_SIZE {
        return Err(Error::Precondition(format!(
            "synthetic images need size >= {MIN_SIZE}, got {size}"
        )));
    }
    Ok(())
}

/// Points along a quadratic Bezier curve, roughly half a pixel apart.
fn bezier(p0: (f64, f64), p1: (f64, f64), p2: (f64, f64)) -> Vec<(f64, f64)> {
    let len = ((p1.0 - p0.0).hypot(p1.1 - p0.1) + (p2.0 - p1.0).hypot(p2.1 - p1.1)).max(1.0);
    let n = (len * 2.0).ceil() as usize;
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            let u = 1.0 - t;
            (
                u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0,
                u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1,
            )
        })
        .collect()
}

fn border_point(rng: &mut ChaCha8Rng, size: usize) -> (f64, f64) {
    let s = (size - 1) as f64;
    let t = rng.random_range(0.0..s);
    match rng.random_range(0..4) {
        0 => (t, 0.0),
        1 => (t, s),
        2 => (0.0, t),
        _ => (s, t),
    }
}

/// Smooth band-limited intensity field with 0-2 thin dark catheter-like
/// strokes, `1 x 1 x size x size`, values in `[-0.95, 0.95]`.
pub fn gen_background(seed: u64, size: usize) -> Result<Tensor> {
    check_size(size)?;
    let mut rng = rng_for(seed);
    let n_waves = 6;
    let waves: Vec<(f64, f64, f64, f64)> = (0..n_waves)
        .map(|_| {
            let (mut fx, mut fy) = (0, 0);
            while fx == 0 && fy == 0 {
                fx = rng.random_range(-3i32..=3);
                fy = rng.random_range(0i32..=3);
            }
            (fx as f64, fy as f64, rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.04..0.16))
        })
        .collect();
    let base = rng.random_range(-0.1..0.3);
    let tau = std::f64::consts::TAU / size as f64;
    let mut out = vec![0.0; size * size];
    for yy in 0..size {
        for xx in 0..size {
            let mut v = base;
            for &(fx, fy, ph, amp) in &waves {
                v += amp * (tau * (fx * xx as f64 + fy * yy as f64) + ph).cos();
            }
            out[yy * size + xx] = v;
        }
    }
    let n_strokes = rng.random_range(0..=2);
    let mut stroke = vec![0.0f64; size * size];
    let s = size as f64;
    for _ in 0..n_strokes {
        let p0 = border_point(&mut rng, size);
        let p1 = (rng.random_range(0.2 * s..0.8 * s), rng.random_range(0.2 * s..0.8 * s));
        let p2 = (rng.random_range(0.3 * s..0.7 * s), rng.random_range(0.3 * s..0.7 * s));
        let width = 1.2;
        for (px, py) in bezier(p0, p1, p2) {
            let (x0, x1) = ((px - 2.0).floor().max(0.0) as usize, ((px + 2.0).ceil() as usize).min(size - 1));
            let (y0, y1) = ((py - 2.0).floor().max(0.0) as usize, ((py + 2.0).ceil() as usize).min(size - 1));
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    let d = (xx as f64 - px).hypot(yy as f64 - py);
                    let k = (1.0 - d / width).max(0.0);
                    let cell = &mut stroke[yy * size + xx];
                    *cell = cell.max(k);
                }
            }
        }
    }
    for (o, k) in out.iter_mut().zip(&stroke) {
        *o = (*o - 0.35 * k).clamp(-0.95, 0.95);
    }
    Tensor::new(&[1, 1, size, size], out)
}

/// Branch parameters of the vessel random walk.
struct TreeWalk<'a> {
    rng: ChaCha8Rng,
    size: usize,
    generations: usize,
    mask: &'a mut [f64],
}

impl TreeWalk<'_> {
    fn width(&self, gen: usize) -> usize {
        let t = gen as f64 / self.generations as f64;
        // thinner below 32px so small trees stay inside the fraction bound
        let scale = (self.size as f64 / 32.0).min(1.0);
        ((4.0 - 3.0 * t) * scale).round().max(1.0) as usize
    }

    fn stamp(&mut self, x: usize, y: usize, w: usize) {
        let lo = (w as isize - 1) / 2;
        for dy in -lo..(w as isize - lo) {
            for dx in -lo..(w as isize - lo) {
                let (xx, yy) = (x as isize + dx, y as isize + dy);
                if xx >= 0 && yy >= 0 && (xx as usize) < self.size && (yy as usize) < self.size {
                    self.mask[yy as usize * self.size + xx as usize] = 1.0;
                }
            }
        }
    }

    fn inside(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < self.size as f64 && y < self.size as f64
    }

    /// Walks one branch from the integer pixel `start`; children start on
    /// this branch's centerline so the union stays 4-connected.
    fn branch(&mut self, start: (usize, usize), angle: f64, gen: usize) {
        let width = self.width(gen);
        let s = self.size as f64;
        let len = s * self.rng.random_range(0.25..0.45) * 0.8f64.powi(gen as i32);
        let (mut px, mut py) = (start.0, start.1);
        let (mut fx, mut fy) = (px as f64, py as f64);
        let mut heading = angle;
        let curve = Normal::new(0.0, 0.12).expect("valid normal");
        let side_at = self.rng.random_range(0.3..0.7) * len;
        let mut side_done = gen >= self.generations || self.rng.random_bool(0.5);
        let mut travelled = 0.0;
        self.stamp(px, py, width);
        while travelled < len {
            heading += curve.sample(&mut self.rng);
            let (nx, ny) = (fx + heading.cos(), fy + heading.sin());
            if !self.inside(nx, ny) {
                return;
            }
            fx = nx;
            fy = ny;
            travelled += 1.0;
            let (tx, ty) = (fx as usize, fy as usize);
            // 4-connected centerline: x first, then y
            while px != tx {
                px = if tx > px { px + 1 } else { px - 1 };
                self.stamp(px, py, width);
            }
            while py != ty {
                py = if ty > py { py + 1 } else { py - 1 };
                self.stamp(px, py, width);
            }
            if !side_done && travelled >= side_at {
                side_done = true;
                let turn = self.rng.random_range(0.6..1.1) * if self.rng.random_bool(0.5) { 1.0 } else { -1.0 };
                self.branch((px, py), heading + turn, gen + 1);
            }
        }
        if gen < self.generations {
            let spread = self.rng.random_range(0.35..0.8);
            self.branch((px, py), heading + spread, gen + 1);
            self.branch((px, py), heading - spread, gen + 1);
        }
    }
}

/// Vessel fraction bounds of a synthetic tree mask.
pub const MASK_FRACTION: (f64, f64) = (0.01, 0.25);

/// Binary vessel tree `1 x 1 x size x size` and its root pixel `(x, y)`.
pub fn gen_vessel_tree_with_root(seed: u64, size: usize) -> Result<(Tensor, (usize, usize))> {
    check_size(size)?;
    for attempt in 0..100u64 {
        let mut rng = rng_for(derive_seed(seed, 0x7EE, attempt));
        let mut mask = vec![0.0; size * size];
        let generations = rng.random_range(2..=4);
        let (rx, ry) = border_point(&mut rng, size);
        let root = (rx as usize, ry as usize);
        let c = size as f64 / 2.0;
        let toward = (c - ry).atan2(c - rx) + rng.random_range(-0.5..0.5);
        let mut walk = TreeWalk {
            rng,
            size,
            generations,
            mask: &mut mask,
        };
        walk.branch(root, toward, 0);
        let frac = mask.iter().sum::<f64>() / mask.len() as f64;
        if (MASK_FRACTION.0..=MASK_FRACTION.1).contains(&frac) {
            return Ok((Tensor::new(&[1, 1, size, size], mask)?, root));
        }
    }
    Err(Error::Data(format!(
        "vessel tree for seed {seed} missed the fraction bound after 100 attempts"
    )))
}

pub fn gen_vessel_tree(seed: u64, size: usize) -> Result<Tensor> {
    Ok(gen_vessel_tree_with_root(seed, size)?.0)
}

/// Separable Gaussian blur (sigma 0.5, radius 1) of each `H x W` plane.
pub fn blur_mask(mask: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = mask.dims4()?;
    let e = (-2.0f64).exp();
    let k = [e / (1.0 + 2.0 * e), 1.0 / (1.0 + 2.0 * e), e / (1.0 + 2.0 * e)];
    let mut out = mask.clone();
    for plane in out.data_mut().chunks_mut(h * w).take(n * c) {
        let src = plane.to_vec();
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut v = 0.0;
                for (d, kw) in k.iter().enumerate() {
                    let xx = x as isize + d as isize - 1;
                    if xx >= 0 && (xx as usize) < w {
                        v += kw * src[y * w + xx as usize];
                    }
                }
                tmp[y * w + x] = v;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut v = 0.0;
                for (d, kw) in k.iter().enumerate() {
                    let yy = y as isize + d as isize - 1;
                    if yy >= 0 && (yy as usize) < h {
                        v += kw * tmp[yy as usize * w + x];
                    }
                }
                plane[y * w + x] = v;
            }
        }
    }
    Ok(out)
}

/// Darkens `background` toward -1 under the mask:
/// `bg * (1 - contrast m) - contrast m`, with `m` the blurred mask when
/// `blur` is set. Pixels where `m == 0` are returned unchanged.
pub fn render_angiography_with(background: &Tensor, mask: &Tensor, contrast: f64, blur: bool) -> Result<Tensor> {
    let (n, c, h, w) = background.dims4()?;
    if mask.shape() != [n, 1, h, w] {
        return Err(Error::Shape(format!(
            "mask {:?} does not fit background {:?}",
            mask.shape(),
            background.shape()
        )));
    }
    if !(contrast > 0.0 && contrast <= 1.0) {
        return Err(Error::Precondition(format!("contrast {contrast} outside (0, 1]")));
    }
    let m = if blur { blur_mask(mask)? } else { mask.clone() };
    let hw = h * w;
    let mut out = background.clone();
    for s in 0..n {
        for ch in 0..c {
            let plane = &mut out.data_mut()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
            for (i, v) in plane.iter_mut().enumerate() {
                let cm = contrast * m.data()[s * hw + i];
                *v = *v * (1.0 - cm) + -1.0 * cm;
            }
        }
    }
    Ok(out)
}

pub fn render_angiography(background: &Tensor, mask: &Tensor, contrast: f64) -> Result<Tensor> {
    render_angiography_with(background, mask, contrast, true)
}

/// Faint darkening along the vessel tree left in the vessel-free background.
pub const DEFAULT_IMPRINT: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub background: Tensor,
    pub vessel_mask: Tensor,
    pub angiography: Tensor,
    pub contrast: f64,
}

impl SynthScene {
    /// One scene: background plus anatomical imprint of the tree, tree mask
    /// and rendered angiography, all derived from `seed`.
    pub fn generate(seed: u64, size: usize, imprint: f64) -> Result<Self> {
        let bg = gen_background(derive_seed(seed, 1, 0), size)?;
        let vessel_mask = gen_vessel_tree(derive_seed(seed, 2, 0), size)?;
        let background = if imprint > 0.0 {
            let soft = blur_mask(&vessel_mask)?;
            bg.zip_map(&soft, |b, m| (b - imprint * m).clamp(-0.95, 0.95))?
        } else {
            bg
        };
        let contrast = rng_for(derive_seed(seed, 3, 0)).random_range(0.55..0.85);
        let angiography = render_angiography(&background, &vessel_mask, contrast)?;
        Ok(Self {
            background,
            vessel_mask,
            angiography,
            contrast,
        })
    }
}

fn default_imprint() -> f64 {
    DEFAULT_IMPRINT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_background: usize,
    pub n_angio: usize,
    pub n_annotated: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Images per test domain.
    #[serde(default)]
    pub n_test: usize,
    #[serde(default = "default_imprint")]
    pub imprint: f64,
}

impl DatasetSpec {
    pub fn new(n_background: usize, n_angio: usize, n_annotated: usize, image_size: usize, seed: u64) -> Self {
        Self {
            n_background,
            n_angio,
            n_annotated,
            image_size,
            seed,
            n_test: 0,
            imprint: DEFAULT_IMPRINT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % 4 != 0 {
            return Err(Error::Validation {
                field: "image_size",
                msg: "must be divisible by 4".into(),
            });
        }
        check_size(self.image_size)?;
        if !(0.0..1.0).contains(&self.imprint) {
            return Err(Error::Validation {
                field: "imprint",
                msg: "must lie in [0, 1)".into(),
            });
        }
        Ok(())
    }
}

/// Seed streams of the dataset splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    TrainA,
    TrainB,
    TestA,
    TestB,
    Seg,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::TrainA => 0xA0,
            Stream::TrainB => 0xB0,
            Stream::TestA => 0xA1,
            Stream::TestB => 0xB1,
            Stream::Seg => 0x5E,
        }
    }

    pub fn scene_seed(self, dataset_seed: u64, index: usize) -> u64 {
        derive_seed(dataset_seed, self.tag(), index as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub stream: Stream,
    pub index: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub files: Vec<ManifestEntry>,
}

pub const SPLIT_DIRS: [&str; 6] = ["trainA", "trainB", "testA", "testB", "seg/images", "seg/masks"];

/// Maps a `[-1, 1]` value to an 8-bit level.
pub fn quantize(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Maps an 8-bit level to `[-1, 1]`.
pub fn normalize(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes one `1 x C x H x W` (or `C x H x W`) tensor as 8-bit PNG. Values
/// are mapped with `to_level`; one channel gives grayscale, three RGB.
pub fn save_png_with(path: &Path, img: &Tensor, to_level: impl Fn(f64) -> u8) -> Result<()> {
    let shape = img.shape();
    let (c, h, w) = match shape.len() {
        4 if shape[0] == 1 => (shape[1], shape[2], shape[3]),
        3 => (shape[0], shape[1], shape[2]),
        _ => return Err(Error::Shape(format!("cannot save tensor {shape:?} as an image"))),
    };
    let d = img.data();
    let err = |e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    };
    match c {
        1 => {
            let buf: Vec<u8> = d.iter().map(|&v| to_level(v)).collect();
            let im: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, buf).expect("buffer size");
            im.save(path).map_err(err)
        }
        3 => {
            let mut buf = Vec::with_capacity(3 * h * w);
            for i in 0..h * w {
                for ch in 0..3 {
                    buf.push(to_level(d[ch * h * w + i]));
                }
            }
            let im: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, buf).expect("buffer size");
            im.save(path).map_err(err)
        }
        _ => Err(Error::Shape(format!("cannot save {c}-channel image"))),
    }
}

/// Saves a `[-1, 1]` image.
pub fn save_png(path: &Path, img: &Tensor) -> Result<()> {
    save_png_with(path, img, quantize)
}

/// Saves a `[0, 1]` map (attention, probabilities, masks) as 0..255.
pub fn save_unit_png(path: &Path, img: &Tensor) -> Result<()> {
    save_png_with(path, img, |v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Loads a PNG as `1 x channels x size x size` in `[-1, 1]`, converting to
/// grayscale, replicating channels and resizing bilinearly when needed.
pub fn load_png(path: &Path, channels: usize, size: usize) -> Result<Tensor> {
    let im = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_luma8();
    let im = if im.width() as usize != size || im.height() as usize != size {
        image::imageops::resize(&im, size as u32, size as u32, image::imageops::FilterType::Triangle)
    } else {
        im
    };
    let plane: Vec<f64> = im.as_raw().iter().map(|&p| normalize(p)).collect();
    let mut data = Vec::with_capacity(channels * plane.len());
    for _ in 0..channels {
        data.extend_from_slice(&plane);
    }
    Tensor::new(&[1, channels, size, size], data)
}

/// Loads a mask PNG as `1 x 1 x size x size` with values in {0, 1}.
pub fn load_mask(path: &Path, size: usize) -> Result<Tensor> {
    let m = load_png(path, 1, size)?;
    Ok(m.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
}

fn file_name(index: usize) -> String {
    format!("{index:05}.png")
}

/// Writes the synthetic dataset under `root` and returns its manifest,
/// which is also saved as `root/manifest.json`.
pub fn build_synthetic_dataset(spec: &DatasetSpec, root: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    for d in SPLIT_DIRS {
        mkdir(&root.join(d))?;
    }
    let mut files = Vec::new();
    let emit = |stream: Stream, count: usize, files: &mut Vec<ManifestEntry>| -> Result<()> {
        for i in 0..count {
            let seed = stream.scene_seed(spec.seed, i);
            let scene = SynthScene::generate(seed, spec.image_size, spec.imprint)?;
            let name = file_name(i);
            let mut write = |dir: &str, img: &Tensor, unit: bool| -> Result<()> {
                let rel = format!("{dir}/{name}");
                let path = root.join(&rel);
                if unit {
                    save_unit_png(&path, img)?;
                } else {
                    save_png(&path, img)?;
                }
                files.push(ManifestEntry {
                    path: rel,
                    stream,
                    index: i,
                    seed,
                });
                Ok(())
            };
            match stream {
                Stream::TrainA => write("trainA", &scene.background, false)?,
                Stream::TestA => write("testA", &scene.background, false)?,
                Stream::TrainB => write("trainB", &scene.angiography, false)?,
                Stream::TestB => write("testB", &scene.angiography, false)?,
                Stream::Seg => {
                    write("seg/images", &scene.angiography, false)?;
                    write("seg/masks", &scene.vessel_mask, true)?;
                }
            }
        }
        Ok(())
    };
    emit(Stream::TrainA, spec.n_background, &mut files)?;
    emit(Stream::TrainB, spec.n_angio, &mut files)?;
    emit(Stream::TestA, spec.n_test, &mut files)?;
    emit(Stream::TestB, spec.n_test, &mut files)?;
    emit(Stream::Seg, spec.n_annotated, &mut files)?;
    let manifest = DatasetManifest {
        spec: spec.clone(),
        files,
    };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads `root/manifest.json` if present.
pub fn read_manifest(root: &Path) -> Result<Option<DatasetManifest>> {
    let path = root.join("manifest.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dirs(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => ("trainA", "trainB"),
            Split::Test => ("testA", "testB"),
        }
    }
}

/// Sorted PNG paths of a directory; errors if it does not exist.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("missing directory {}", dir.display())));
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Loads every readable PNG of `dir`, skipping unreadable files with a
/// warning; fails if none could be read.
pub fn load_dir(dir: &Path, channels: usize, size: usize) -> Result<(Vec<PathBuf>, Vec<Tensor>)> {
    let paths = list_pngs(dir)?;
    let mut names = Vec::new();
    let mut imgs = Vec::new();
    for p in &paths {
        match load_png(p, channels, size) {
            Ok(t) => {
                names.push(p.clone());
                imgs.push(t);
            }
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    if imgs.is_empty() {
        return Err(Error::Data(format!("no readable images in {}", dir.display())));
    }
    Ok((names, imgs))
}

/// Two independently shuffled image streams.
#[derive(Debug, Clone)]
pub struct Unpaired {
    pub a: Vec<Tensor>,
    pub b: Vec<Tensor>,
    pub a_paths: Vec<PathBuf>,
    pub b_paths: Vec<PathBuf>,
    seed: u64,
}

pub fn load_unpaired(root: &Path, split: Split, channels: usize, size: usize, seed: u64) -> Result<Unpaired> {
    let (da, db) = split.dirs();
    let (a_paths, a) = load_dir(&root.join(da), channels, size)?;
    let (b_paths, b) = load_dir(&root.join(db), channels, size)?;
    Ok(Unpaired::new(a, b, seed).with_paths(a_paths, b_paths))
}

/// Permutation of `0..n` for one epoch of one stream.
pub fn epoch_permutation(seed: u64, stream: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(derive_seed(seed, stream, epoch)));
    idx
}

impl Unpaired {
    pub fn new(a: Vec<Tensor>, b: Vec<Tensor>, seed: u64) -> Self {
        Self {
            a,
            b,
            a_paths: Vec::new(),
            b_paths: Vec::new(),
            seed,
        }
    }

    fn with_paths(mut self, a: Vec<PathBuf>, b: Vec<PathBuf>) -> Self {
        self.a_paths = a;
        self.b_paths = b;
        self
    }

    /// Samples per epoch: the larger domain is visited once, the smaller one
    /// wraps around.
    pub fn epoch_len(&self) -> usize {
        self.a.len().max(self.b.len())
    }

    /// Indices `(a, b)` visited at position `i` of `epoch`.
    pub fn visit(&self, epoch: u64, i: usize) -> (usize, usize) {
        let pa = epoch_permutation(self.seed, 0xA, epoch, self.a.len());
        let pb = epoch_permutation(self.seed, 0xB, epoch, self.b.len());
        (pa[i % pa.len()], pb[i % pb.len()])
    }

    /// Visitation order of one epoch.
    pub fn epoch_order(&self, epoch: u64) -> Vec<(usize, usize)> {
        let pa = epoch_permutation(self.seed, 0xA, epoch, self.a.len());
        let pb = epoch_permutation(self.seed, 0xB, epoch, self.b.len());
        (0..self.epoch_len())
            .map(|i| (pa[i % pa.len()], pb[i % pb.len()]))
            .collect()
    }
}

/// Annotated images for the segmenter.
pub fn load_seg_samples(root: &Path, channels: usize, size: usize) -> Result<Vec<(Tensor, Tensor)>> {
    let imgs = list_pngs(&root.join("seg/images"))?;
    let masks_dir = root.join("seg/masks");
    if !masks_dir.is_dir() {
        return Err(Error::Data(format!("missing directory {}", masks_dir.display())));
    }
    let mut out = Vec::new();
    for p in imgs {
        let m = masks_dir.join(p.file_name().expect("file name"));
        match (load_png(&p, channels, size), load_mask(&m, size)) {
            (Ok(i), Ok(mk)) => out.push((i, mk)),
            (Err(e), _) | (_, Err(e)) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no readable segmentation pairs under {}", root.display())));
    }
    Ok(out)
}

/// Horizontal flip of every `H x W` plane.
pub fn hflip(t: &Tensor) -> Tensor {
    let shape = t.shape();
    let w = shape[shape.len() - 1];
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}
