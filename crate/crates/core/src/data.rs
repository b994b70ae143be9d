//! Deterministic desk-scale datasets.
//!
//! Procedural images combine a global two-channel color ramp (a layout shared
//! by every image, up to a small rotation, gain and offset) with random
//! translucent shapes and a faint texture so that pieces are locally distinct.
//!
//! Synthetic sequences hide an increasing chain of tokens `c_0 < ... < c_K`;
//! element `i` is `[c_i, filler, c_{i+1}]`, so consecutive elements overlap and
//! the order can only be inferred by relating elements to each other. Token
//! ids below [`RESERVED_TOKENS`] are never emitted, so no element ever carries
//! its own index.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::patches::Image;
use crate::error::{Error, Result};

pub const RESERVED_TOKENS: u32 = 16;
pub const MIN_IMAGE_SIZE: usize = 64;

/// SplitMix64 finalizer; mixes a base seed with a stream of salts.
pub fn derive_seed(base: u64, salts: &[u64]) -> u64 {
    let mut z = base;
    for &s in salts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(s.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    ProceduralImage,
    ImageDir,
    SyntheticSequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Number of items to generate (ignored for `image-dir`).
    pub count: usize,
    /// Train / val / test fractions.
    pub splits: [f64; 3],
    pub seed: u64,
    /// Side of generated or normalized images, in pixels.
    pub image_size: usize,
    pub image_dir: Option<PathBuf>,
    /// Puzzle grid sides used for every image.
    pub grid_sizes: Vec<usize>,
    pub k_min: usize,
    pub k_max: usize,
    pub vocab: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::ProceduralImage,
            count: 2000,
            splits: [0.8, 0.1, 0.1],
            seed: 0,
            image_size: 96,
            image_dir: None,
            grid_sizes: vec![3, 4],
            k_min: 3,
            k_max: 8,
            vocab: 512,
        }
    }
}

impl DatasetSpec {
    pub fn sequences() -> Self {
        Self { kind: DatasetKind::SyntheticSequence, count: 5000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.splits.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.splits.iter().any(|f| *f < 0.0) {
            return Err(Error::InvalidConfig(format!("split fractions must be >= 0 and sum to 1, got {:?}", self.splits)));
        }
        match self.kind {
            DatasetKind::ProceduralImage | DatasetKind::SyntheticSequence if self.count < 1 => {
                return Err(Error::InvalidConfig("count must be at least 1".into()));
            }
            DatasetKind::ImageDir if self.image_dir.is_none() => {
                return Err(Error::InvalidConfig("image-dir datasets need `image_dir`".into()));
            }
            _ => {}
        }
        match self.kind {
            DatasetKind::ProceduralImage | DatasetKind::ImageDir => {
                if self.image_size < MIN_IMAGE_SIZE && self.kind == DatasetKind::ProceduralImage {
                    return Err(Error::InvalidConfig(format!("image_size must be >= {MIN_IMAGE_SIZE}")));
                }
                if self.grid_sizes.is_empty() || self.grid_sizes.iter().any(|&n| n < 1 || n > self.image_size) {
                    return Err(Error::InvalidConfig(format!("bad grid sizes {:?}", self.grid_sizes)));
                }
            }
            DatasetKind::SyntheticSequence => {
                if self.k_min < 2 || self.k_max < self.k_min {
                    return Err(Error::InvalidConfig(format!("need 2 <= k_min <= k_max, got {}..{}", self.k_min, self.k_max)));
                }
                if self.vocab < min_vocab(self.k_max) {
                    return Err(Error::VocabTooSmall { vocab: self.vocab, elements: self.k_max });
                }
            }
        }
        Ok(())
    }
}

/// Deterministic split of `count` items: a seeded permutation cut by the fractions.
pub fn assign_splits(count: usize, fractions: [f64; 3], seed: u64) -> Vec<Split> {
    let n_train = (fractions[0] * count as f64).round() as usize;
    let n_val = ((fractions[1] * count as f64).round() as usize).min(count - n_train.min(count));
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5917])));
    let mut splits = vec![Split::Test; count];
    for (pos, &i) in order.iter().enumerate() {
        splits[i] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

fn smoothstep(e0: f32, e1: f32, x: f32) -> f32 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Procedural image with a global color layout and local detail.
pub fn gen_procedural_image(seed: u64, size: usize) -> Result<Image> {
    if size < MIN_IMAGE_SIZE {
        return Err(Error::ImageTooSmall {
            width: size as u32,
            height: size as u32,
            reason: format!("procedural images need at least {MIN_IMAGE_SIZE} pixels"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta: f32 = rng.random_range(-0.3..0.3);
    let (ct, st) = (theta.cos(), theta.sin());
    let gain_r: f32 = rng.random_range(0.55..0.8);
    let gain_g: f32 = rng.random_range(0.55..0.8);
    let off_r: f32 = rng.random_range(0.05..(0.95 - gain_r));
    let off_g: f32 = rng.random_range(0.05..(0.95 - gain_g));
    let base_b: f32 = rng.random_range(0.2..0.8);
    let tex_fx: f32 = rng.random_range(3.0..9.0);
    let tex_fy: f32 = rng.random_range(3.0..9.0);
    let tex_phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);

    struct Shape {
        cx: f32,
        cy: f32,
        r: f32,
        square: bool,
        color: [f32; 3],
        alpha: f32,
    }
    let n_shapes = rng.random_range(5..10);
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| Shape {
            cx: rng.random_range(0.0..1.0),
            cy: rng.random_range(0.0..1.0),
            r: rng.random_range(0.04..0.12),
            square: rng.random_bool(0.5),
            color: [rng.random(), rng.random(), rng.random()],
            alpha: rng.random_range(0.15..0.35),
        })
        .collect();

    let inv = 1.0 / size as f32;
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = ((x as f32 + 0.5) * inv, (y as f32 + 0.5) * inv);
            let (dx, dy) = (px - 0.5, py - 0.5);
            let u = (ct * dx + st * dy + 0.5).clamp(0.0, 1.0);
            let v = (-st * dx + ct * dy + 0.5).clamp(0.0, 1.0);
            let tex = 0.04 * (tex_fx * px * std::f32::consts::TAU + tex_phase).sin()
                * (tex_fy * py * std::f32::consts::TAU).cos();
            let mut c = [
                off_r + gain_r * u + tex,
                off_g + gain_g * v + tex,
                base_b + 0.15 * (u - v) - tex,
            ];
            for s in &shapes {
                let d = if s.square {
                    (px - s.cx).abs().max((py - s.cy).abs())
                } else {
                    ((px - s.cx).powi(2) + (py - s.cy).powi(2)).sqrt()
                };
                let cover = 1.0 - smoothstep(s.r * 0.85, s.r, d);
                if cover > 0.0 {
                    let a = s.alpha * cover;
                    for k in 0..3 {
                        c[k] = c[k] * (1.0 - a) + s.color[k] * a;
                    }
                }
            }
            pixels.extend(c.iter().map(|v| v.clamp(0.0, 1.0)));
        }
    }
    Ok(Image::new(size, size, pixels))
}

/// Smallest vocabulary that can hold a `k`-element sequence.
pub fn min_vocab(k: usize) -> usize {
    RESERVED_TOKENS as usize + 2 * (k + 1)
}

/// An ordered synthetic sequence and the hidden chain that generated it.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    /// Elements in ground-truth order.
    pub elements: Vec<Vec<u32>>,
    /// `c_0 < c_1 < ... < c_K`
    pub chain: Vec<u32>,
}

pub fn gen_synthetic_sequence(seed: u64, k: usize, vocab: usize) -> Result<SyntheticSequence> {
    if k < 2 {
        return Err(Error::TooFewElements { got: k, min: 2 });
    }
    if vocab < min_vocab(k) {
        return Err(Error::VocabTooSmall { vocab, elements: k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let usable = vocab - RESERVED_TOKENS as usize;
    let mut picked: Vec<u32> =
        sample(&mut rng, usable, 2 * k + 1).into_iter().map(|i| i as u32 + RESERVED_TOKENS).collect();
    let fillers = picked.split_off(k + 1);
    let mut chain = picked;
    chain.sort_unstable();
    let elements = (0..k).map(|i| vec![chain[i], fillers[i], chain[i + 1]]).collect();
    Ok(SyntheticSequence { elements, chain })
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    /// Seed for generation and for load-time shuffling.
    pub seed: u64,
    /// Element count for sequences; absent for images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    /// Source file for image-dir datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct ImageRecord {
    pub entry: ManifestEntry,
    pub image: Image,
}

#[derive(Clone, Debug)]
pub struct SequenceRecord {
    pub entry: ManifestEntry,
    /// Elements in ground-truth order.
    pub elements: Vec<Vec<u32>>,
}

#[derive(Clone, Debug)]
pub enum Dataset {
    Images { manifest: Manifest, records: Vec<ImageRecord> },
    Sequences { manifest: Manifest, records: Vec<SequenceRecord> },
}

impl Dataset {
    pub fn manifest(&self) -> &Manifest {
        match self {
            Dataset::Images { manifest, .. } | Dataset::Sequences { manifest, .. } => manifest,
        }
    }

    pub fn is_images(&self) -> bool {
        matches!(self, Dataset::Images { .. })
    }

    pub fn len(&self) -> usize {
        self.manifest().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Builds an in-memory dataset; a pure function of `spec`.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    match spec.kind {
        DatasetKind::ProceduralImage => {
            let splits = assign_splits(spec.count, spec.splits, spec.seed);
            let mut records = Vec::with_capacity(spec.count);
            for (i, split) in splits.into_iter().enumerate() {
                let seed = derive_seed(spec.seed, &[1, i as u64]);
                let entry = ManifestEntry { id: format!("img{i:05}"), split, seed, k: None, source: None };
                records.push(ImageRecord { image: gen_procedural_image(seed, spec.image_size)?, entry });
            }
            let manifest = Manifest { spec: spec.clone(), entries: records.iter().map(|r| r.entry.clone()).collect() };
            Ok(Dataset::Images { manifest, records })
        }
        DatasetKind::SyntheticSequence => {
            let splits = assign_splits(spec.count, spec.splits, spec.seed);
            let mut records = Vec::with_capacity(spec.count);
            for (i, split) in splits.into_iter().enumerate() {
                let seed = derive_seed(spec.seed, &[2, i as u64]);
                let k = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3])).random_range(spec.k_min..=spec.k_max);
                let seq = gen_synthetic_sequence(seed, k, spec.vocab)?;
                let entry = ManifestEntry { id: format!("seq{i:05}"), split, seed, k: Some(k), source: None };
                records.push(SequenceRecord { entry, elements: seq.elements });
            }
            let manifest = Manifest { spec: spec.clone(), entries: records.iter().map(|r| r.entry.clone()).collect() };
            Ok(Dataset::Sequences { manifest, records })
        }
        DatasetKind::ImageDir => {
            let dir = spec.image_dir.as_ref().expect("validated");
            load_image_dir(dir, spec)
        }
    }
}

/// Reads every decodable PNG in `dir` (alphabetical), center-crops to a square
/// and resizes to `spec.image_size`. Unreadable files are skipped with a warning.
pub fn load_image_dir(dir: &Path, spec: &DatasetSpec) -> Result<Dataset> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    let mut images = Vec::new();
    for f in files {
        match image::open(&f) {
            Ok(img) => {
                let sq = Image::from_rgb8(&img.to_rgb8()).center_square();
                let img = sq.resize_bilinear(spec.image_size, spec.image_size);
                images.push((f, img));
            }
            Err(e) => log::warn!("skipping unreadable image {}: {e}", f.display()),
        }
    }
    if images.is_empty() {
        return Err(Error::Dataset(format!("no readable PNG images in {}", dir.display())));
    }
    let splits = assign_splits(images.len(), spec.splits, spec.seed);
    let records: Vec<ImageRecord> = images
        .into_iter()
        .zip(splits)
        .enumerate()
        .map(|(i, ((path, image), split))| ImageRecord {
            entry: ManifestEntry {
                id: format!("img{i:05}"),
                split,
                seed: derive_seed(spec.seed, &[1, i as u64]),
                k: None,
                source: path.file_name().map(|n| n.to_string_lossy().into_owned()),
            },
            image,
        })
        .collect();
    let manifest = Manifest { spec: spec.clone(), entries: records.iter().map(|r| r.entry.clone()).collect() };
    Ok(Dataset::Images { manifest, records })
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SEQUENCES_FILE: &str = "sequences.jsonl";
pub const IMAGES_DIR: &str = "images";

#[derive(Serialize, Deserialize)]
struct SequenceLine {
    id: String,
    elements: Vec<Vec<u32>>,
}

/// Writes the manifest plus PNG images or line-delimited token arrays.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = serde_json::to_string_pretty(dataset.manifest())?;
    fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
    match dataset {
        Dataset::Images { records, .. } => {
            let img_dir = dir.join(IMAGES_DIR);
            fs::create_dir_all(&img_dir)?;
            for r in records {
                r.image.to_rgb8().save(img_dir.join(format!("{}.png", r.entry.id)))?;
            }
        }
        Dataset::Sequences { records, .. } => {
            let mut out = String::new();
            for r in records {
                out.push_str(&serde_json::to_string(&SequenceLine { id: r.entry.id.clone(), elements: r.elements.clone() })?);
                out.push('\n');
            }
            fs::write(dir.join(SEQUENCES_FILE), out)?;
        }
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    match manifest.spec.kind {
        DatasetKind::SyntheticSequence => {
            let text = fs::read_to_string(dir.join(SEQUENCES_FILE))?;
            let mut lines = Vec::new();
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                lines.push(serde_json::from_str::<SequenceLine>(line)?);
            }
            if lines.len() != manifest.entries.len() {
                return Err(Error::Dataset(format!(
                    "manifest lists {} sequences but {} were found",
                    manifest.entries.len(),
                    lines.len()
                )));
            }
            let records = manifest
                .entries
                .iter()
                .zip(lines)
                .map(|(e, l)| {
                    if e.id != l.id {
                        return Err(Error::Dataset(format!("id mismatch: {} vs {}", e.id, l.id)));
                    }
                    Ok(SequenceRecord { entry: e.clone(), elements: l.elements })
                })
                .collect::<Result<_>>()?;
            Ok(Dataset::Sequences { manifest, records })
        }
        DatasetKind::ProceduralImage | DatasetKind::ImageDir => {
            let mut records = Vec::with_capacity(manifest.entries.len());
            for e in &manifest.entries {
                let img = image::open(dir.join(IMAGES_DIR).join(format!("{}.png", e.id)))?;
                records.push(ImageRecord { entry: e.clone(), image: Image::from_rgb8(&img.to_rgb8()) });
            }
            Ok(Dataset::Images { manifest, records })
        }
    }
}
