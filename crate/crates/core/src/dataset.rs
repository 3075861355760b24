//! Image samples, University-1652 directory ingestion, seeded synthetic
//! toy datasets and view-balanced batch sampling.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use log::warn;
use ndarray::{Array3, Array4};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Capture modality. The discriminator's output order is `[Uav, Satellite]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    Uav,
    Satellite,
}

impl View {
    pub const ALL: [View; 2] = [View::Uav, View::Satellite];

    pub fn index(self) -> usize {
        match self {
            View::Uav => 0,
            View::Satellite => 1,
        }
    }

    pub fn flipped(self) -> View {
        match self {
            View::Uav => View::Satellite,
            View::Satellite => View::Uav,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            View::Uav => "uav",
            View::Satellite => "satellite",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

/// Which way the test split is read: UAV queries against a satellite gallery
/// or the transposed roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    UavToSatellite,
    SatelliteToUav,
}

/// Pixel storage: decoded in memory, or a validated file decoded on demand.
#[derive(Debug, Clone)]
pub enum Pixels {
    Loaded(Array3<f64>),
    Deferred { path: PathBuf, size: usize },
}

/// One image, `height x width x 3` with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub pixels: Pixels,
    pub view: View,
    pub location_id: usize,
    pub source_path: Option<PathBuf>,
}

impl ImageSample {
    pub fn new(pixels: Array3<f64>, view: View, location_id: usize) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h != w || c != 3 {
            return Err(Error::Shape(format!("image must be square RGB, got {h}x{w}x{c}")));
        }
        Ok(Self { pixels: Pixels::Loaded(pixels), view, location_id, source_path: None })
    }

    pub fn size(&self) -> usize {
        match &self.pixels {
            Pixels::Loaded(p) => p.dim().0,
            Pixels::Deferred { size, .. } => *size,
        }
    }

    pub fn image(&self) -> Result<Cow<'_, Array3<f64>>> {
        match &self.pixels {
            Pixels::Loaded(p) => Ok(Cow::Borrowed(p)),
            Pixels::Deferred { path, size } => read_image(path, *size).map(Cow::Owned),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    pub num_locations: usize,
    pub split: Split,
    /// Class-directory name (or synthetic label) for each location id.
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count_view(&self, view: View) -> usize {
        self.samples.iter().filter(|s| s.view == view).count()
    }

    pub fn indices_of_view(&self, view: View) -> Vec<usize> {
        self.samples.iter().enumerate().filter(|(_, s)| s.view == view).map(|(i, _)| i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            if s.location_id >= self.num_locations {
                return Err(Error::Data(format!(
                    "location id {} out of range for {} locations",
                    s.location_id, self.num_locations
                )));
            }
        }
        Ok(())
    }

    /// Sorted distinct location ids present in the samples.
    pub fn locations(&self) -> BTreeSet<usize> {
        self.samples.iter().map(|s| s.location_id).collect()
    }
}

// ---------------------------------------------------------------------------
// University-1652 layout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub image_size: usize,
    pub direction: Direction,
    /// Decode every image up front instead of on demand.
    pub eager: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SkippedFile {
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LoadReport {
    pub root: String,
    pub split: Split,
    pub num_locations: usize,
    /// `subtree -> view -> image count`
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
    pub skipped: Vec<SkippedFile>,
}

impl LoadReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn subtrees(split: Split, direction: Direction) -> Vec<(&'static str, View)> {
    match (split, direction) {
        (Split::Train, _) => vec![("train/drone", View::Uav), ("train/satellite", View::Satellite)],
        (Split::Query, Direction::UavToSatellite) => vec![("test/query_drone", View::Uav)],
        (Split::Gallery, Direction::UavToSatellite) => vec![("test/gallery_satellite", View::Satellite)],
        (Split::Query, Direction::SatelliteToUav) => vec![("test/query_satellite", View::Satellite)],
        (Split::Gallery, Direction::SatelliteToUav) => vec![("test/gallery_drone", View::Uav)],
    }
}

/// Subtrees whose class names jointly define the label space of a split.
/// Query and gallery of one direction share ids so relevance is by id.
fn label_space(split: Split, direction: Direction) -> Vec<&'static str> {
    match split {
        Split::Train => subtrees(Split::Train, direction).into_iter().map(|(d, _)| d).collect(),
        Split::Query | Split::Gallery => [Split::Query, Split::Gallery]
            .into_iter()
            .flat_map(|s| subtrees(s, direction))
            .map(|(d, _)| d)
            .collect(),
    }
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "jpg" | "jpeg" | "png"))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn class_dirs(dir: &Path) -> Result<Vec<String>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(str::to_string))
        .collect())
}

/// Decode an image file, convert to RGB and resize (bilinear) to `size x size`.
pub fn read_image(path: &Path, size: usize) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let rgb = image::imageops::resize(&img.to_rgb8(), size as u32, size as u32, FilterType::Triangle);
    Ok(Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
        rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

fn probe_image(path: &Path) -> std::result::Result<(), String> {
    image::ImageReader::open(path)
        .map_err(|e| e.to_string())?
        .with_guessed_format()
        .map_err(|e| e.to_string())?
        .into_dimensions()
        .map(|_| ())
        .map_err(|e| e.to_string())
}

/// Load one split of a University-1652-style tree.
///
/// Location ids follow the lexicographic order of class-directory names
/// across every subtree that shares the split's label space.
pub fn load_university1652(root: &Path, split: Split, opts: &LoadOptions) -> Result<(Dataset, LoadReport)> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} does not exist", root.display())));
    }
    let mut names = BTreeSet::new();
    for sub in label_space(split, opts.direction) {
        let dir = root.join(sub);
        if dir.is_dir() {
            names.extend(class_dirs(&dir)?);
        }
    }
    let class_names: Vec<String> = names.into_iter().collect();
    let ids: BTreeMap<&str, usize> = class_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();

    let mut samples = Vec::new();
    let mut counts = BTreeMap::new();
    let mut skipped = Vec::new();
    for (sub, view) in subtrees(split, opts.direction) {
        let dir = root.join(sub);
        if !dir.is_dir() {
            return Err(Error::Data(format!("missing directory {}", dir.display())));
        }
        let mut n = 0usize;
        for class in class_dirs(&dir)? {
            let class_dir = dir.join(&class);
            let files: Vec<PathBuf> = sorted_entries(&class_dir)?.into_iter().filter(|p| is_image_file(p)).collect();
            if files.is_empty() {
                return Err(Error::Data(format!("class directory {} contains no images", class_dir.display())));
            }
            for path in files {
                let pixels = if opts.eager {
                    match read_image(&path, opts.image_size) {
                        Ok(p) => Pixels::Loaded(p),
                        Err(e) => {
                            warn!("skipping unreadable image {}: {e}", path.display());
                            skipped.push(SkippedFile { path: path.display().to_string(), reason: e.to_string() });
                            continue;
                        }
                    }
                } else {
                    if let Err(reason) = probe_image(&path) {
                        warn!("skipping unreadable image {}: {reason}", path.display());
                        skipped.push(SkippedFile { path: path.display().to_string(), reason });
                        continue;
                    }
                    Pixels::Deferred { path: path.clone(), size: opts.image_size }
                };
                samples.push(ImageSample { pixels, view, location_id: ids[class.as_str()], source_path: Some(path) });
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Data(format!("no readable images under {}", dir.display())));
        }
        counts.entry(sub.to_string()).or_insert_with(BTreeMap::new).insert(view.name().to_string(), n);
    }
    let dataset = Dataset { samples, num_locations: class_names.len(), split, class_names };
    dataset.validate()?;
    let report = LoadReport {
        root: root.display().to_string(),
        split,
        num_locations: dataset.num_locations,
        counts,
        skipped,
    };
    Ok((dataset, report))
}

// ---------------------------------------------------------------------------
// Synthetic toy data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    /// Training locations.
    pub num_locations: usize,
    /// Unseen locations used for query/gallery.
    pub eval_locations: usize,
    /// Extra satellite-only gallery locations that match no query.
    pub distractors: usize,
    pub uav_per_location: usize,
    pub image_size: usize,
    pub view_shift_strength: f64,
    /// Per-image uniform jitter of the UAV heading, in degrees either way.
    pub uav_rotation_jitter_deg: f64,
    /// Per-image uniform UAV translation, as a fraction of the image side.
    pub uav_shift_jitter: f64,
    /// Amplitude scale of the location patterns.
    pub pattern_contrast: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            num_locations: 20,
            eval_locations: 10,
            distractors: 0,
            uav_per_location: 8,
            image_size: 32,
            view_shift_strength: 1.0,
            uav_rotation_jitter_deg: 0.0,
            uav_shift_jitter: 0.0,
            pattern_contrast: 0.04,
            noise_std: 0.1,
            seed: 1,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_locations < 2 {
            return Err(Error::Config("toy.num_locations must be at least 2".into()));
        }
        if self.uav_per_location < 1 {
            return Err(Error::Config("toy.uav_per_location must be at least 1".into()));
        }
        if self.eval_locations < 1 {
            return Err(Error::Config("toy.eval_locations must be at least 1".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config("toy.image_size must be at least 8".into()));
        }
        if !(self.view_shift_strength >= 0.0) || !self.view_shift_strength.is_finite() {
            return Err(Error::Config("toy.view_shift_strength must be a finite value >= 0".into()));
        }
        if !(self.uav_rotation_jitter_deg >= 0.0) || !(self.uav_shift_jitter >= 0.0) || !(self.pattern_contrast > 0.0) {
            return Err(Error::Config("toy jitter must be >= 0 and pattern contrast > 0".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("toy.noise_std must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ToyData {
    pub train: Dataset,
    pub query: Dataset,
    pub gallery: Dataset,
}

/// Rotation applied to every UAV image at unit shift strength, in degrees.
pub const TOY_UAV_ROTATION_DEG: f64 = 20.0;
/// Color mixing applied to UAV images at unit shift strength (rows sum to 1).
pub const TOY_UAV_COLOR_MIX: [[f64; 3]; 3] = [[0.2, 0.6, 0.2], [0.2, 0.2, 0.6], [0.6, 0.2, 0.2]];
pub const TOY_UAV_COLOR_OFFSET: [f64; 3] = [0.15, -0.15, 0.1];

const WAVES_PER_CHANNEL: usize = 4;

#[derive(Debug, Clone)]
struct Wave {
    fx: f64,
    fy: f64,
    amplitude: f64,
    phase: f64,
}

/// Low-frequency color pattern identifying one location.
#[derive(Debug, Clone)]
struct LocationPattern {
    base: [f64; 3],
    waves: [Vec<Wave>; 3],
}

impl LocationPattern {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let base = [0, 1, 2].map(|_| 0.5 + rng.random_range(-0.1..0.1));
        let waves = [0, 1, 2].map(|_| {
            (0..WAVES_PER_CHANNEL)
                .map(|_| {
                    let (fx, fy) = loop {
                        let f = (rng.random_range(-2i32..=2), rng.random_range(-2i32..=2));
                        if f != (0, 0) {
                            break f;
                        }
                    };
                    Wave {
                        fx: fx as f64,
                        fy: fy as f64,
                        amplitude: rng.random_range(0.3..1.0),
                        phase: rng.random_range(0.0..2.0 * PI),
                    }
                })
                .collect()
        });
        Self { base, waves }
    }

    /// Value of channel `c` at continuous coordinates in `[0, 1)^2`.
    fn value(&self, c: usize, x: f64, y: f64, contrast: f64) -> f64 {
        let s: f64 = self.waves[c]
            .iter()
            .map(|w| w.amplitude * (2.0 * PI * (w.fx * x + w.fy * y) + w.phase).sin())
            .sum();
        self.base[c] + contrast * s
    }
}

fn sample_seed(seed: u64, location: usize, view: View, index: usize) -> u64 {
    // splitmix-style mixing so every sample has its own independent stream
    let mut z = seed
        ^ (location as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ ((view.index() as u64 + 1) << 56)
        ^ (index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn render(pattern: &LocationPattern, cfg: &ToyConfig, view: View, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let n = cfg.image_size;
    let uav = view == View::Uav;
    let s = if uav { cfg.view_shift_strength } else { 0.0 };
    let jitter = |r: &mut ChaCha8Rng, w: f64| if uav && w > 0.0 { r.random_range(-w..=w) } else { 0.0 };
    let theta = (s * TOY_UAV_ROTATION_DEG + jitter(rng, cfg.uav_rotation_jitter_deg)).to_radians();
    let (tx, ty) = (jitter(rng, cfg.uav_shift_jitter), jitter(rng, cfg.uav_shift_jitter));
    let (sin, cos) = theta.sin_cos();
    let noise = (cfg.noise_std > 0.0).then(|| Normal::new(0.0, cfg.noise_std).unwrap());
    let mut img = Array3::zeros((n, n, 3));
    for yi in 0..n {
        for xi in 0..n {
            let u = (xi as f64 + 0.5) / n as f64 - 0.5;
            let v = (yi as f64 + 0.5) / n as f64 - 0.5;
            let (x, y) = (cos * u + sin * v + 0.5 + tx, -sin * u + cos * v + 0.5 + ty);
            let rgb = [0, 1, 2].map(|c| pattern.value(c, x, y, cfg.pattern_contrast));
            for c in 0..3 {
                let mixed: f64 = (0..3).map(|k| TOY_UAV_COLOR_MIX[c][k] * rgb[k]).sum::<f64>() + TOY_UAV_COLOR_OFFSET[c];
                let mut val = (1.0 - s) * rgb[c] + s * mixed;
                if let Some(d) = &noise {
                    val += d.sample(rng);
                }
                img[[yi, xi, c]] = val.clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Seeded synthetic cross-view data.
///
/// Every location gets a random low-frequency color pattern. UAV images
/// apply a fixed, location-independent rotation and color-affine transform
/// scaled by `view_shift_strength`; all images get independent pixel noise.
/// Training uses ids `0..num_locations`; query/gallery use the following
/// `eval_locations` ids, plus satellite-only distractors after those.
pub fn generate_toy_dataset(cfg: &ToyConfig) -> Result<ToyData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = cfg.num_locations + cfg.eval_locations + cfg.distractors;
    let patterns: Vec<LocationPattern> = (0..total).map(|_| LocationPattern::random(&mut rng)).collect();

    let make = |loc: usize, view: View, index: usize| -> ImageSample {
        let mut r = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, loc, view, index));
        let pixels = render(&patterns[loc], cfg, view, &mut r);
        ImageSample { pixels: Pixels::Loaded(pixels), view, location_id: loc, source_path: None }
    };
    let names = |range: std::ops::Range<usize>| range.map(|i| format!("toy{i:04}")).collect::<Vec<_>>();

    let mut train = Vec::new();
    for loc in 0..cfg.num_locations {
        for i in 0..cfg.uav_per_location {
            train.push(make(loc, View::Uav, i));
        }
        train.push(make(loc, View::Satellite, 0));
    }
    let eval_range = cfg.num_locations..cfg.num_locations + cfg.eval_locations;
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for loc in eval_range {
        for i in 0..cfg.uav_per_location {
            query.push(make(loc, View::Uav, i));
        }
        gallery.push(make(loc, View::Satellite, 0));
    }
    for loc in cfg.num_locations + cfg.eval_locations..total {
        gallery.push(make(loc, View::Satellite, 0));
    }
    let train = Dataset {
        samples: train,
        num_locations: cfg.num_locations,
        split: Split::Train,
        class_names: names(0..cfg.num_locations),
    };
    let query = Dataset { samples: query, num_locations: total, split: Split::Query, class_names: names(0..total) };
    let gallery = Dataset { samples: gallery, num_locations: total, split: Split::Gallery, class_names: names(0..total) };
    Ok(ToyData { train, query, gallery })
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Draw a view-balanced batch: `batch_size / 2` UAV and the rest satellite
/// (the odd slot goes to a coin flip). Within a view, samples are drawn
/// without replacement when the pool is large enough.
pub fn sample_batch<'a, R: Rng + ?Sized>(
    dataset: &'a Dataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<&'a ImageSample>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch size must be at least 2, got {batch_size}")));
    }
    let uav = dataset.indices_of_view(View::Uav);
    let sat = dataset.indices_of_view(View::Satellite);
    if uav.is_empty() || sat.is_empty() {
        return Err(Error::Config("training data must contain both UAV and satellite images".into()));
    }
    let mut n_uav = batch_size / 2;
    if batch_size % 2 == 1 && rng.random_bool(0.5) {
        n_uav += 1;
    }
    let mut picks = draw(&uav, n_uav, rng);
    picks.extend(draw(&sat, batch_size - n_uav, rng));
    Ok(picks.into_iter().map(|i| &dataset.samples[i]).collect())
}

fn draw<R: Rng + ?Sized>(pool: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    if k <= pool.len() {
        sample_indices(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..k).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

/// Stack samples into an `N x 3 x S x S` tensor, optionally mirroring each
/// image horizontally with probability 1/2.
pub fn batch_tensor<R: Rng + ?Sized>(samples: &[&ImageSample], mut flip_rng: Option<&mut R>) -> Result<Array4<f64>> {
    let size = samples.first().map(|s| s.size()).ok_or_else(|| Error::Data("empty batch".into()))?;
    let mut out = Array4::zeros((samples.len(), 3, size, size));
    for (n, s) in samples.iter().enumerate() {
        let img = s.image()?;
        if img.dim() != (size, size, 3) {
            return Err(Error::Shape(format!("batch mixes image sizes: {:?} vs {size}", img.dim())));
        }
        let flip = match flip_rng.as_deref_mut() {
            Some(r) => r.random_bool(0.5),
            None => false,
        };
        for y in 0..size {
            for x in 0..size {
                let sx = if flip { size - 1 - x } else { x };
                for c in 0..3 {
                    out[[n, c, y, x]] = img[[y, sx, c]];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(shift: f64) -> ToyConfig {
        ToyConfig { num_locations: 20, uav_per_location: 8, image_size: 32, view_shift_strength: shift, seed: 1, ..Default::default() }
    }

    fn channel_means(s: &ImageSample) -> [f64; 3] {
        let img = s.image().unwrap();
        let n = (img.dim().0 * img.dim().1) as f64;
        [0, 1, 2].map(|c| img.slice(ndarray::s![.., .., c]).sum() / n)
    }

    #[test]
    fn toy_generation_is_deterministic() {
        let a = generate_toy_dataset(&small_cfg(1.0)).unwrap();
        let b = generate_toy_dataset(&small_cfg(1.0)).unwrap();
        for (x, y) in a.train.samples.iter().zip(&b.train.samples).chain(a.query.samples.iter().zip(&b.query.samples)) {
            let (px, py) = (x.image().unwrap(), y.image().unwrap());
            assert!(px.iter().zip(py.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
            assert_eq!(x.location_id, y.location_id);
        }
    }

    #[test]
    fn toy_splits_use_disjoint_locations() {
        let d = generate_toy_dataset(&small_cfg(1.0)).unwrap();
        assert_eq!(d.train.len(), 20 * 9);
        assert_eq!(d.query.len(), 10 * 8);
        assert_eq!(d.gallery.len(), 10);
        assert!(d.train.locations().is_disjoint(&d.query.locations()));
        assert_eq!(d.query.locations(), d.gallery.locations());
        assert!(d.query.samples.iter().all(|s| s.view == View::Uav));
        assert!(d.gallery.samples.iter().all(|s| s.view == View::Satellite));
        d.train.validate().unwrap();
        d.query.validate().unwrap();
    }

    #[test]
    fn zero_shift_views_differ_only_by_noise() {
        let cfg = small_cfg(0.0);
        let noise = cfg.noise_std;
        let d = generate_toy_dataset(&cfg).unwrap();
        let sat = d.train.samples.iter().find(|s| s.view == View::Satellite && s.location_id == 3).unwrap();
        let uav = d.train.samples.iter().find(|s| s.view == View::Uav && s.location_id == 3).unwrap();
        let (a, b) = (sat.image().unwrap(), uav.image().unwrap());
        let diff = (&*a - &*b).mapv(|v| v * v).mean().unwrap().sqrt();
        // two independent noise draws differ with rms about sqrt(2) * noise
        assert!(diff < 2.0 * noise, "rms difference {diff}");
        // view-marginal pixel means agree to well below the noise scale
        let mean_of = |v: View| {
            let xs: Vec<f64> = d.train.samples.iter().filter(|s| s.view == v).map(|s| channel_means(s).iter().sum::<f64>() / 3.0).collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        assert!((mean_of(View::Uav) - mean_of(View::Satellite)).abs() < noise / 4.0);
    }

    #[test]
    fn unit_shift_views_are_linearly_separable_by_pixel_means() {
        let d = generate_toy_dataset(&small_cfg(1.0)).unwrap();
        let samples: Vec<&ImageSample> = d.train.samples.iter().chain(&d.query.samples).chain(&d.gallery.samples).collect();
        let feats = ndarray::Array2::from_shape_fn((samples.len(), 3), |(i, c)| channel_means(samples[i])[c]);
        let labels: Vec<bool> = samples.iter().map(|s| s.view == View::Uav).collect();
        let probe = crate::probe::LinearProbe::fit(&feats, &labels);
        let acc = probe.balanced_accuracy(&feats, &labels);
        assert!(acc > 0.9, "balanced accuracy {acc}");
    }

    #[test]
    fn batches_are_balanced_and_deterministic() {
        let d = generate_toy_dataset(&small_cfg(1.0)).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let b1 = sample_batch(&d.train, 8, &mut r1).unwrap();
        let b2 = sample_batch(&d.train, 8, &mut r2).unwrap();
        assert_eq!(b1.iter().filter(|s| s.view == View::Uav).count(), 4);
        assert_eq!(b1.iter().filter(|s| s.view == View::Satellite).count(), 4);
        let ptrs = |b: &[&ImageSample]| b.iter().map(|s| *s as *const _).collect::<Vec<_>>();
        assert_eq!(ptrs(&b1), ptrs(&b2));
        for size in [2, 3, 5, 17] {
            let b = sample_batch(&d.train, size, &mut r1).unwrap();
            assert_eq!(b.len(), size);
            assert!(b.iter().any(|s| s.view == View::Uav) && b.iter().any(|s| s.view == View::Satellite));
        }
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let d = generate_toy_dataset(&small_cfg(1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_batch(&d.train, 1, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn single_view_dataset_is_rejected() {
        let d = generate_toy_dataset(&small_cfg(1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_batch(&d.query, 4, &mut rng).is_err());
    }

    #[test]
    fn invalid_toy_config_is_rejected() {
        let mut cfg = small_cfg(1.0);
        cfg.num_locations = 1;
        assert!(generate_toy_dataset(&cfg).is_err());
        let mut cfg = small_cfg(1.0);
        cfg.uav_per_location = 0;
        assert!(generate_toy_dataset(&cfg).is_err());
        let mut cfg = small_cfg(1.0);
        cfg.view_shift_strength = -0.5;
        assert!(generate_toy_dataset(&cfg).is_err());
    }

    #[test]
    fn batch_tensor_flips_horizontally() {
        let pixels = Array3::from_shape_fn((8, 8, 3), |(y, x, c)| (y * 100 + x * 10 + c) as f64 / 1000.0);
        let s = ImageSample::new(pixels, View::Uav, 0).unwrap();
        let plain = batch_tensor::<ChaCha8Rng>(&[&s], None).unwrap();
        assert_eq!(plain[[0, 2, 1, 3]], 0.132);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut flipped_seen = false;
        for _ in 0..20 {
            let t = batch_tensor(&[&s], Some(&mut rng)).unwrap();
            if t[[0, 0, 0, 0]] != plain[[0, 0, 0, 0]] {
                assert_eq!(t[[0, 0, 0, 0]], plain[[0, 0, 0, 7]]);
                flipped_seen = true;
            }
        }
        assert!(flipped_seen);
    }

    #[test]
    fn non_square_image_is_rejected() {
        assert!(ImageSample::new(Array3::zeros((4, 5, 3)), View::Uav, 0).is_err());
    }
}
