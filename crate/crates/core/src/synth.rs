//! Synthetic box-scene world with an analytic embedding model.
//!
//! Scenes are `a x a` images holding square objects. A patch embedding is
//! the area-weighted mixture of the class directions of objects fully inside
//! the patch and large enough to register, plus seeded Gaussian noise; a
//! patch with no registering object embeds as a background direction.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::{self, BankError, BankKind, FeatureBank, ImageEntry, TextEntry};
use crate::cover::{generate_cc, generate_grid, generate_obj, CoverConfig, CoverError, CoverSet, ObjectBox, PatchBox};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("image {image_id}: could not place object {object} without overlap after {tries} tries")]
    Packing { image_id: u64, object: usize, tries: usize },
    #[error("could not draw {wanted} directions with |cos| <= {bound} in dim {dim}")]
    Coherence { wanted: usize, bound: f64, dim: usize },
    #[error("unknown class {0}")]
    UnknownClass(u32),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Cover(#[from] CoverError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

const PLACEMENT_TRIES: usize = 1000;
const DIRECTION_TRIES: usize = 10_000;

/// splitmix64 finaliser, used to derive independent stream seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(a << 6).wrapping_add(a >> 2);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix_all(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243f_6a88_85a3_08d3, |h, &p| mix(h, p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleRegime {
    Mix,
    SmallOnly,
    LargeOnly,
}

/// Object side range as fractions of the image side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SideRange {
    pub min_frac: f64,
    pub max_frac: f64,
}

impl SideRange {
    /// Inclusive pixel range for an image of side `a`.
    pub fn pixels(&self, a: u32) -> (u32, u32) {
        let lo = ((a as f64 * self.min_frac).ceil() as u32).max(1);
        let hi = ((a as f64 * self.max_frac).floor() as u32).min(a);
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    /// Proportional split, e.g. 7:1:2.
    Ratio { train: u32, val: u32, test: u32 },
    Counts { train: usize, val: usize, test: usize },
}

impl SplitSpec {
    fn counts(&self, n: usize) -> Result<(usize, usize, usize)> {
        match *self {
            SplitSpec::Ratio { train, val, test } => {
                let total = (train + val + test) as usize;
                if total == 0 {
                    return Err(SynthError::Config("split ratio sums to zero".into()));
                }
                let tr = (n * train as usize + total / 2) / total;
                let va = ((n * val as usize + total / 2) / total).min(n - tr);
                Ok((tr, va, n - tr - va))
            }
            SplitSpec::Counts { train, val, test } => {
                if train + val + test != n {
                    return Err(SynthError::Config(format!(
                        "split counts {train}+{val}+{test} do not sum to num_images {n}"
                    )));
                }
                Ok((train, val, test))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub name: String,
    pub num_images: usize,
    pub num_classes: usize,
    pub class_names: Option<Vec<String>>,
    pub instances_min: usize,
    pub instances_max: usize,
    pub dim: usize,
    pub image_side: u32,
    pub regime: ScaleRegime,
    pub small: SideRange,
    pub large: SideRange,
    pub noise_sigma: f64,
    /// Minimum fraction of a patch's area an object needs to register.
    pub embed_sensitivity: f64,
    pub text_jitter: f64,
    pub max_coherence: f64,
    pub allow_overlap: bool,
    pub split: SplitSpec,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            name: "synth".into(),
            num_images: 1000,
            num_classes: 138,
            class_names: None,
            instances_min: 1,
            instances_max: 50,
            dim: 64,
            image_side: 224,
            regime: ScaleRegime::Mix,
            small: SideRange { min_frac: 0.05, max_frac: 0.1 },
            large: SideRange { min_frac: 0.25, max_frac: 0.5 },
            noise_sigma: 0.01,
            embed_sensitivity: 0.02,
            text_jitter: 0.0,
            max_coherence: 0.3,
            allow_overlap: true,
            split: SplitSpec::Ratio { train: 7, val: 1, test: 2 },
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.num_images == 0 || self.num_classes == 0 || self.dim == 0 || self.image_side == 0 {
            return bad("num_images, num_classes, dim and image_side must be positive".into());
        }
        if self.instances_min == 0 || self.instances_min > self.instances_max {
            return bad(format!("instance range {}..={} is empty or starts at 0", self.instances_min, self.instances_max));
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.num_classes {
                return bad(format!("{} class names for {} classes", names.len(), self.num_classes));
            }
        }
        for (what, r) in [("small", self.small), ("large", self.large)] {
            let (lo, hi) = r.pixels(self.image_side);
            if !(r.min_frac > 0.0 && r.min_frac <= r.max_frac && r.max_frac <= 1.0) || lo > hi {
                return bad(format!("{what} side range {:?} is empty", r));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.text_jitter >= 0.0) {
            return bad("noise_sigma and text_jitter must be >= 0".into());
        }
        if !(self.embed_sensitivity > 0.0 && self.embed_sensitivity <= 1.0) {
            return bad(format!("embed_sensitivity {} outside (0, 1]", self.embed_sensitivity));
        }
        if !(self.max_coherence > 0.0 && self.max_coherence < 1.0) {
            return bad(format!("max_coherence {} outside (0, 1)", self.max_coherence));
        }
        self.split.counts(self.num_images)?;
        Ok(())
    }

    /// Inclusive pixel range of object sides under the configured regime.
    pub fn side_range(&self) -> (u32, u32) {
        let a = self.image_side;
        match self.regime {
            ScaleRegime::SmallOnly => self.small.pixels(a),
            ScaleRegime::LargeOnly => self.large.pixels(a),
            ScaleRegime::Mix => (self.small.pixels(a).0, self.large.pixels(a).1),
        }
    }

    pub fn class_name(&self, c: usize) -> String {
        match &self.class_names {
            Some(n) => n[c].clone(),
            None => format!("class_{c:03}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_id: u64,
    pub side: u32,
    pub objects: Vec<ObjectBox>,
    pub split: Split,
}

impl SceneSpec {
    /// Largest object area over image area.
    pub fn r_max(&self) -> f64 {
        let img = self.side as f64 * self.side as f64;
        self.objects.iter().map(|o| o.area() as f64 / img).fold(0.0, f64::max)
    }

    pub fn classes(&self) -> BTreeSet<u32> {
        self.objects.iter().map(|o| o.class_id).collect()
    }

    pub fn full_patch(&self) -> PatchBox {
        PatchBox::new(0, 0, self.side, self.side, 0)
    }
}

fn gaussian_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `N(0, I/d)` sample.
fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let s = 1.0 / (d as f64).sqrt();
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * s).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModel {
    pub dim: usize,
    pub class_directions: Vec<Vec<f64>>,
    pub background: Vec<f64>,
    pub noise_sigma: f64,
    pub embed_sensitivity: f64,
    pub text_jitter: f64,
    pub seed: u64,
}

impl EmbeddingModel {
    /// Draws class directions (and the background direction) by rejection
    /// until every pair satisfies the coherence bound.
    pub fn new(cfg: &WorldConfig) -> Result<Self> {
        let d = cfg.dim;
        let wanted = cfg.num_classes + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_all(&[cfg.seed, 0xd1ec]));
        let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(wanted);
        while dirs.len() < wanted {
            let mut placed = false;
            for _ in 0..DIRECTION_TRIES {
                let v = gaussian_unit(&mut rng, d);
                if dirs.iter().all(|u| dot(u, &v).abs() <= cfg.max_coherence) {
                    dirs.push(v);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(SynthError::Coherence { wanted, bound: cfg.max_coherence, dim: d });
            }
        }
        let background = dirs.pop().expect("background direction");
        Ok(Self {
            dim: d,
            class_directions: dirs,
            background,
            noise_sigma: cfg.noise_sigma,
            embed_sensitivity: cfg.embed_sensitivity,
            text_jitter: cfg.text_jitter,
            seed: cfg.seed,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_directions.len()
    }

    pub fn direction(&self, class_id: u32) -> Result<&[f64]> {
        self.class_directions.get(class_id as usize).map(Vec::as_slice).ok_or(SynthError::UnknownClass(class_id))
    }

    /// Mixture weights of the objects registering in `patch`.
    pub fn registered(&self, scene: &SceneSpec, patch: &PatchBox) -> Vec<(u32, f64)> {
        let pa = patch.area() as f64;
        scene
            .objects
            .iter()
            .filter(|o| o.inside(patch) && o.area() as f64 >= self.embed_sensitivity * pa)
            .map(|o| (o.class_id, o.area() as f64 / pa))
            .collect()
    }

    pub fn embed_patch(&self, scene: &SceneSpec, patch: &PatchBox) -> Result<Vec<f64>> {
        let d = self.dim;
        let reg = self.registered(scene, patch);
        let mut v = vec![0.0; d];
        if reg.is_empty() {
            v.copy_from_slice(&self.background);
        } else {
            for (c, w) in reg {
                let e = self.direction(c)?;
                v.iter_mut().zip(e).for_each(|(x, y)| *x += w * y);
            }
        }
        if self.noise_sigma > 0.0 {
            let key = mix_all(&[self.seed, 0x9a7c, scene.image_id, patch.x0 as u64, patch.y0 as u64, patch.x1 as u64, patch.y1 as u64]);
            let g = gaussian(&mut ChaCha8Rng::seed_from_u64(key), d);
            v.iter_mut().zip(&g).for_each(|(x, y)| *x += self.noise_sigma * y);
        }
        Ok(normalize(v))
    }

    pub fn embed_text(&self, class_id: u32) -> Result<Vec<f64>> {
        let e = self.direction(class_id)?.to_vec();
        if self.text_jitter == 0.0 {
            return Ok(e);
        }
        let g = gaussian(&mut ChaCha8Rng::seed_from_u64(mix_all(&[self.seed, 0x7e47, class_id as u64])), self.dim);
        Ok(normalize(e.iter().zip(&g).map(|(x, y)| x + self.text_jitter * y).collect()))
    }
}

/// Where an image's feature rows come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PatchSource {
    FullImage,
    Cc(CoverConfig),
    Grid { rows: u32, cols: u32 },
    Obj,
}

impl PatchSource {
    pub fn bank_kind(&self) -> BankKind {
        match self {
            PatchSource::FullImage => BankKind::ImageSingle,
            _ => BankKind::ImagePatches,
        }
    }

    pub fn tag(&self) -> String {
        match self {
            PatchSource::FullImage => "full".into(),
            PatchSource::Cc(c) => format!("cc{}", c.sensitivity_k),
            PatchSource::Grid { rows, cols } => format!("grid{rows}x{cols}"),
            PatchSource::Obj => "obj".into(),
        }
    }

    pub fn patches(&self, scene: &SceneSpec) -> Result<CoverSet> {
        let a = scene.side;
        Ok(match self {
            PatchSource::FullImage => CoverSet {
                image_w: a,
                image_h: a,
                patches: vec![scene.full_patch()],
                per_level_counts: vec![1],
                config: None,
                min_covered_side: None,
            },
            PatchSource::Cc(cfg) => {
                if cfg.image_side != a {
                    return Err(SynthError::Config(format!(
                        "cover built for side {} but image {} has side {a}",
                        cfg.image_side, scene.image_id
                    )));
                }
                generate_cc(cfg)?
            }
            PatchSource::Grid { rows, cols } => generate_grid(a, a, *rows, *cols)?,
            PatchSource::Obj => generate_obj(a, a, &scene.objects)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestObject {
    pub class: u32,
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub id: u64,
    pub side: u32,
    pub objects: Vec<ManifestObject>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub classes: Vec<String>,
    pub images: Vec<ManifestImage>,
}

impl Manifest {
    pub fn from_scenes(name: &str, classes: Vec<String>, scenes: &[SceneSpec]) -> Self {
        let images = scenes
            .iter()
            .map(|s| ManifestImage {
                id: s.image_id,
                side: s.side,
                split: s.split,
                objects: s
                    .objects
                    .iter()
                    .map(|o| ManifestObject { class: o.class_id, x0: o.x0, y0: o.y0, x1: o.x1, y1: o.y1 })
                    .collect(),
            })
            .collect();
        Self { name: name.into(), classes, images }
    }

    /// Scenes in manifest order, with every object validated.
    pub fn scenes(&self) -> Result<Vec<SceneSpec>> {
        let mut seen = BTreeSet::new();
        self.images
            .iter()
            .map(|m| {
                if !seen.insert(m.id) {
                    return Err(SynthError::Manifest(format!("duplicate image id {}", m.id)));
                }
                let objects = m
                    .objects
                    .iter()
                    .map(|o| {
                        if o.class as usize >= self.classes.len() {
                            return Err(SynthError::Manifest(format!("image {}: unknown class {}", m.id, o.class)));
                        }
                        let b = ObjectBox::new(o.x0, o.y0, o.x1, o.y1, o.class);
                        b.validate(m.side, m.side)?;
                        Ok(b)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(SceneSpec { image_id: m.id, side: m.side, objects, split: m.split })
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub scenes: Vec<SceneSpec>,
    pub model: EmbeddingModel,
}

fn place_scene(cfg: &WorldConfig, image_id: u64, split: Split) -> Result<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_all(&[cfg.seed, 0x5ce7, image_id]));
    let a = cfg.image_side;
    let (lo, hi) = cfg.side_range();
    let n = rng.random_range(cfg.instances_min..=cfg.instances_max);
    let mut objects: Vec<ObjectBox> = Vec::with_capacity(n);
    for i in 0..n {
        let class = rng.random_range(0..cfg.num_classes) as u32;
        let mut tries = 0;
        let obj = loop {
            let side = rng.random_range(lo..=hi);
            let x = rng.random_range(0..=a - side);
            let y = rng.random_range(0..=a - side);
            let o = ObjectBox::square(x, y, side, class);
            if cfg.allow_overlap || objects.iter().all(|p| !overlaps(p, &o)) {
                break o;
            }
            tries += 1;
            if tries >= PLACEMENT_TRIES {
                return Err(SynthError::Packing { image_id, object: i, tries });
            }
        };
        objects.push(obj);
    }
    Ok(SceneSpec { image_id, side: a, objects, split })
}

fn overlaps(a: &ObjectBox, b: &ObjectBox) -> bool {
    a.x0 < b.x1 && b.x0 < a.x1 && a.y0 < b.y1 && b.y0 < a.y1
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let model = EmbeddingModel::new(cfg)?;
    let n = cfg.num_images;
    let (tr, va, _) = cfg.split.counts(n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_all(&[cfg.seed, 0x5b17])));
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < tr {
            Split::Train
        } else if rank < tr + va {
            Split::Val
        } else {
            Split::Test
        };
    }
    let scenes = (0..n)
        .into_par_iter()
        .map(|i| place_scene(cfg, i as u64, splits[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok(World { config: cfg.clone(), scenes, model })
}

impl World {
    pub fn class_names(&self) -> Vec<String> {
        (0..self.config.num_classes).map(|c| self.config.class_name(c)).collect()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest::from_scenes(&self.config.name, self.class_names(), &self.scenes)
    }

    pub fn split(&self, split: Split) -> Vec<&SceneSpec> {
        self.scenes.iter().filter(|s| s.split == split).collect()
    }

    /// Feature bank for `scenes` with rows drawn from `source`.
    pub fn image_bank(&self, scenes: &[&SceneSpec], source: &PatchSource) -> Result<FeatureBank> {
        embed_scenes(&self.model, scenes, source)
    }

    pub fn text_bank(&self) -> Result<FeatureBank> {
        let mut bank = FeatureBank::new_texts(self.model.dim);
        for c in 0..self.model.num_classes() {
            let f = self.model.embed_text(c as u32)?;
            bank.texts.push(TextEntry {
                class_id: c as u32,
                name: self.config.class_name(c),
                feature: f.iter().map(|&v| v as f32).collect(),
            });
        }
        Ok(bank)
    }
}

pub fn embed_scenes(model: &EmbeddingModel, scenes: &[&SceneSpec], source: &PatchSource) -> Result<FeatureBank> {
    let images = scenes
        .par_iter()
        .map(|s| {
            let cover = source.patches(s)?;
            let rows = cover.patches.iter().map(|p| model.embed_patch(s, p)).collect::<Result<Vec<_>>>()?;
            let boxes = match source {
                PatchSource::FullImage => vec![[0.0; 4]],
                _ => cover.patches.iter().map(|p| p.normalized(s.side, s.side)).collect(),
            };
            Ok(ImageEntry::from_f64(s.image_id, boxes, &rows))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureBank { dim: model.dim, kind: source.bank_kind(), images, texts: Vec::new() })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BankPaths {
    pub manifest: PathBuf,
    pub images: PathBuf,
    pub patches: PathBuf,
    pub texts: PathBuf,
}

/// Writes the manifest plus whole-image, patch and text banks for every
/// scene of `world` into `dir`.
pub fn bank_from_world(world: &World, source: &PatchSource, dir: &Path) -> Result<BankPaths> {
    fs::create_dir_all(dir)?;
    let paths = BankPaths {
        manifest: dir.join("manifest.json"),
        images: dir.join("images_full.dfb"),
        patches: dir.join(format!("patches_{}.dfb", source.tag())),
        texts: dir.join("texts.dfb"),
    };
    fs::write(&paths.manifest, world.manifest().to_json()?)?;
    let all: Vec<&SceneSpec> = world.scenes.iter().collect();
    bank::write_bank(&paths.images, &world.image_bank(&all, &PatchSource::FullImage)?)?;
    bank::write_bank(&paths.patches, &world.image_bank(&all, source)?)?;
    bank::write_bank(&paths.texts, &world.text_bank()?)?;
    Ok(paths)
}

/// Class id to the ids of scenes containing it.
pub fn relevance<'a>(scenes: impl IntoIterator<Item = &'a SceneSpec>) -> BTreeMap<u32, BTreeSet<u64>> {
    let mut rel: BTreeMap<u32, BTreeSet<u64>> = BTreeMap::new();
    for s in scenes {
        for c in s.classes() {
            rel.entry(c).or_default().insert(s.image_id);
        }
    }
    rel
}
