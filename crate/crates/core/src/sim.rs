//! Seeded synthetic detector.
//!
//! A [`World`] holds complete hidden annotations for a train split, the
//! sparse K-shot view of them a user would actually have, and a fully
//! annotated query split. The simulated detector's quality for each class
//! is a single scalar derived from how well its training annotations cover
//! the hidden instances of that class; quality drives recall, box jitter,
//! true-positive confidence and the false-positive rate.
//!
//! Randomness comes from ChaCha8 streams keyed by `(seed, round, image_id)`
//! through a SplitMix64 mix ([`RNG_SCHEME`]), so an image's predictions do
//! not depend on which other images were requested alongside it.

use std::collections::{BTreeMap, HashMap};
use std::ops::RangeInclusive;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::boxes::{Detection, PredictionSet};
use crate::coco::{self, AnnotationRecord, CategoryRecord, Dataset, ImageRecord, Source};
use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::io::{read, write_atomic};
use crate::BBox;

pub const RNG_SCHEME: &str = "chacha8-splitmix64-v1";

/// IoU at which a training annotation counts as covering a hidden instance.
pub const COVER_IOU: f64 = 0.5;
/// Same-class boxes in a generated scene never overlap more than this.
pub const SCENE_MAX_IOU: f64 = 0.3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for one `(seed, round, image_id)` stream.
pub fn stream(seed: u64, round: u64, image_id: u64) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(splitmix64(seed) ^ round) ^ image_id);
    ChaCha8Rng::seed_from_u64(key)
}

// Round keys reserved for world construction, far from any real round.
const SCENE_STREAM: u64 = u64::MAX;
const SPLIT_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatorConfig {
    pub p_min: f64,
    pub p_max: f64,
    pub sigma_max: f64,
    pub beta: f64,
    pub lambda_fp_max: f64,
    pub lambda_fp_min: f64,
    pub conf_tp_alpha: f64,
    /// Weight of unmatched (noisy) training labels against coverage when
    /// deriving detector quality. Zero makes quality equal coverage.
    pub noise_penalty: f64,
    pub seed: u64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            p_min: 0.45,
            p_max: 0.95,
            sigma_max: 0.1,
            beta: 0.8,
            lambda_fp_max: 3.0,
            lambda_fp_min: 0.3,
            conf_tp_alpha: 10.0,
            noise_penalty: 1.5,
            seed: 0,
        }
    }
}

impl SimulatorConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("simulator: {msg}")));
        let finite = [
            self.p_min,
            self.p_max,
            self.sigma_max,
            self.beta,
            self.lambda_fp_max,
            self.lambda_fp_min,
            self.conf_tp_alpha,
            self.noise_penalty,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return bad("parameters must be finite");
        }
        if !(0.0 <= self.p_min && self.p_min <= self.p_max && self.p_max <= 1.0) {
            return bad("need 0 <= p_min <= p_max <= 1");
        }
        if self.sigma_max < 0.0 {
            return bad("sigma_max must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta must lie in [0, 1]");
        }
        if !(0.0 <= self.lambda_fp_min && self.lambda_fp_min <= self.lambda_fp_max) {
            return bad("need 0 <= lambda_fp_min <= lambda_fp_max");
        }
        if self.conf_tp_alpha < 0.0 || self.noise_penalty < 0.0 {
            return bad("conf_tp_alpha and noise_penalty must be >= 0");
        }
        Ok(())
    }

    pub fn detection_probability(&self, quality: f64) -> f64 {
        self.p_min + (self.p_max - self.p_min) * quality
    }

    pub fn jitter_scale(&self, quality: f64) -> f64 {
        self.sigma_max * (1.0 - self.beta * quality)
    }

    pub fn false_positive_rate(&self, mean_quality: f64) -> f64 {
        self.lambda_fp_max * (1.0 - mean_quality) + self.lambda_fp_min * mean_quality
    }
}

/// Parameters of [`make_world`], kept so a world can be regenerated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldParams {
    pub n_images: usize,
    pub n_classes: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub k_shot: usize,
    pub seed: u64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            n_images: 80,
            n_classes: 3,
            min_instances: 3,
            max_instances: 8,
            k_shot: 1,
            seed: 0,
        }
    }
}

impl WorldParams {
    pub fn build(&self) -> Result<World> {
        if self.min_instances > self.max_instances {
            return Err(Error::InvalidConfig("min_instances > max_instances".into()));
        }
        make_world(
            self.n_images,
            self.n_classes,
            self.min_instances..=self.max_instances,
            self.k_shot,
            self.seed,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    /// Complete annotations of the train split.
    pub hidden_gt: Dataset,
    /// The K-shot view of `hidden_gt` (same image table).
    pub visible_train: Dataset,
    /// Complete annotations of the held-out query split.
    pub query_gt: Dataset,
}

pub const IMAGE_WIDTH: u32 = 640;
pub const IMAGE_HEIGHT: u32 = 480;
const MIN_SIDE_FRAC: f64 = 0.08;
const MAX_SIDE_FRAC: f64 = 0.3;

fn random_box(rng: &mut ChaCha8Rng, width: u32, height: u32) -> BBox {
    let (wf, hf) = (width as f64, height as f64);
    let w = (rng.gen_range(MIN_SIDE_FRAC..=MAX_SIDE_FRAC) * wf).round().max(1.0);
    let h = (rng.gen_range(MIN_SIDE_FRAC..=MAX_SIDE_FRAC) * hf).round().max(1.0);
    let x = rng.gen_range(0.0..=(wf - w)).round();
    let y = rng.gen_range(0.0..=(hf - h)).round();
    BBox::new(x, y, w, h)
}

const PLACEMENT_TRIES: usize = 200;

/// Generate random scenes, split them 50/50 into train and query, and
/// derive the K-shot training view.
///
/// Per image the instance count is drawn from `instances`; each instance
/// gets a uniform class and a box inside the image overlapping no
/// same-class box by more than [`SCENE_MAX_IOU`]. An instance that cannot be
/// placed after a bounded number of attempts is skipped.
pub fn make_world(
    n_images: usize,
    n_classes: usize,
    instances: RangeInclusive<usize>,
    k_shot: usize,
    seed: u64,
) -> Result<World> {
    if n_images < 2 || n_classes == 0 || *instances.end() == 0 || instances.is_empty() {
        return Err(Error::InvalidConfig(
            "make_world needs n_images >= 2, n_classes >= 1 and a non-empty instance range".into(),
        ));
    }
    let categories: Vec<CategoryRecord> = (1..=n_classes as u64)
        .map(|c| CategoryRecord::new(c, format!("class_{c}")))
        .collect();

    let mut images = Vec::with_capacity(n_images);
    let mut annotations = Vec::new();
    let mut next_id = 1u64;
    for image_id in 1..=n_images as u64 {
        images.push(ImageRecord::new(
            image_id,
            format!("synthetic_{image_id:05}.png"),
            IMAGE_WIDTH,
            IMAGE_HEIGHT,
        ));
        let mut rng = stream(seed, SCENE_STREAM, image_id);
        let count = rng.gen_range(instances.clone());
        let mut placed: Vec<(u64, BBox)> = Vec::with_capacity(count);
        for _ in 0..count {
            let class = rng.gen_range(1..=n_classes as u64);
            for _ in 0..PLACEMENT_TRIES {
                let b = random_box(&mut rng, IMAGE_WIDTH, IMAGE_HEIGHT);
                let clear = placed
                    .iter()
                    .all(|(c, other)| *c != class || iou(&b, other) <= SCENE_MAX_IOU);
                if clear {
                    placed.push((class, b));
                    break;
                }
            }
        }
        for (class, b) in placed {
            annotations.push(AnnotationRecord::ground_truth(next_id, image_id, class, b));
            next_id += 1;
        }
    }

    let mut ids: Vec<u64> = (1..=n_images as u64).collect();
    ids.shuffle(&mut stream(seed, SPLIT_STREAM, 0));
    let mut train_ids = ids[..n_images / 2].to_vec();
    train_ids.sort_unstable();

    let restrict = |keep: &dyn Fn(u64) -> bool| Dataset {
        images: images.iter().filter(|i| keep(i.id)).cloned().collect(),
        categories: categories.clone(),
        annotations: annotations.iter().filter(|a| keep(a.image_id)).cloned().collect(),
        extra: Default::default(),
    };
    let in_train = |id: u64| train_ids.binary_search(&id).is_ok();
    let hidden_gt = restrict(&in_train);
    let query_gt = restrict(&|id| !in_train(id));
    let visible_train = coco::sample_support(&hidden_gt, k_shot, splitmix64(seed ^ 0x5EED))?;
    Ok(World {
        hidden_gt,
        visible_train,
        query_gt,
    })
}

impl World {
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("hidden_gt.json"), &self.hidden_gt.to_json())?;
        write_atomic(&dir.join("visible_train.json"), &self.visible_train.to_json())?;
        write_atomic(&dir.join("query_gt.json"), &self.query_gt.to_json())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let load = |name: &str| coco::parse_dataset(&read(&dir.join(name))?);
        Ok(Self {
            hidden_gt: load("hidden_gt.json")?,
            visible_train: load("visible_train.json")?,
            query_gt: load("query_gt.json")?,
        })
    }

    pub fn train_image_ids(&self) -> Vec<u64> {
        self.hidden_gt.image_ids()
    }

    pub fn query_image_ids(&self) -> Vec<u64> {
        self.query_gt.image_ids()
    }
}

/// How one class's training annotations relate to its hidden instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassSupervision {
    pub hidden: usize,
    /// Hidden instances matched by some training annotation.
    pub covered: usize,
    /// Training annotations that match no hidden instance.
    pub noisy: usize,
}

impl ClassSupervision {
    pub fn coverage(&self) -> f64 {
        if self.hidden == 0 {
            0.0
        } else {
            self.covered as f64 / self.hidden as f64
        }
    }

    /// Coverage minus `penalty` times the noisy-label count relative to the
    /// class size, clamped to `[0, 1]`.
    pub fn quality(&self, penalty: f64) -> f64 {
        if self.hidden == 0 {
            return 0.0;
        }
        let noise = self.noisy as f64 / self.hidden as f64;
        (self.coverage() - penalty * noise).clamp(0.0, 1.0)
    }
}

/// One-to-one greedy matching of training annotations to hidden instances
/// per `(image, class)`, highest IoU first, counted per class.
pub fn supervision(train: &Dataset, hidden_gt: &Dataset) -> Result<BTreeMap<u64, ClassSupervision>> {
    let images: std::collections::HashSet<u64> = hidden_gt.images.iter().map(|i| i.id).collect();
    let mut out: BTreeMap<u64, ClassSupervision> = hidden_gt
        .categories
        .iter()
        .map(|c| (c.id, ClassSupervision::default()))
        .collect();
    for a in &train.annotations {
        if !images.contains(&a.image_id) || !out.contains_key(&a.category_id) {
            return Err(Error::UnresolvableReference(format!(
                "training annotation {} (image {}, category {}) is outside the hidden universe",
                a.id, a.image_id, a.category_id
            )));
        }
    }

    let hidden_groups = hidden_gt.index_by_image_category();
    let train_groups = train.index_by_image_category();
    for (&(_, class), hidden_idx) in &hidden_groups {
        out.get_mut(&class).unwrap().hidden += hidden_idx.len();
    }
    for (key, train_idx) in &train_groups {
        let hidden_idx = hidden_groups.get(key).map(Vec::as_slice).unwrap_or(&[]);
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (ti, &t) in train_idx.iter().enumerate() {
            for (hi, &h) in hidden_idx.iter().enumerate() {
                let v = iou(&train.annotations[t].bbox, &hidden_gt.annotations[h].bbox);
                if v >= COVER_IOU {
                    pairs.push((v, ti, hi));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut train_used = vec![false; train_idx.len()];
        let mut hidden_used = vec![false; hidden_idx.len()];
        let mut matched = 0;
        for (_, ti, hi) in pairs {
            if !train_used[ti] && !hidden_used[hi] {
                train_used[ti] = true;
                hidden_used[hi] = true;
                matched += 1;
            }
        }
        let entry = out.get_mut(&key.1).unwrap();
        entry.covered += matched;
        entry.noisy += train_idx.len() - matched;
    }
    Ok(out)
}

/// Per-class fraction of hidden instances matched by a training annotation.
pub fn coverage(train: &Dataset, hidden_gt: &Dataset) -> Result<BTreeMap<u64, f64>> {
    Ok(supervision(train, hidden_gt)?
        .into_iter()
        .map(|(c, s)| (c, s.coverage()))
        .collect())
}

struct SceneIndex<'a> {
    images: HashMap<u64, (&'a ImageRecord, Vec<&'a AnnotationRecord>)>,
    categories: Vec<u64>,
}

impl<'a> SceneIndex<'a> {
    fn new(w: &'a World) -> Self {
        let mut images = HashMap::new();
        for d in [&w.hidden_gt, &w.query_gt] {
            for img in &d.images {
                images.insert(img.id, (img, Vec::new()));
            }
            for a in &d.annotations {
                if a.source == Source::GroundTruth {
                    if let Some((_, v)) = images.get_mut(&a.image_id) {
                        v.push(a);
                    }
                }
            }
        }
        let mut categories: Vec<u64> = w.hidden_gt.categories.iter().map(|c| c.id).collect();
        categories.sort_unstable();
        Self { images, categories }
    }
}

fn jitter(rng: &mut ChaCha8Rng, b: &BBox, scale: f64, width: u32, height: u32) -> BBox {
    let mut n = |dim: f64| {
        if scale > 0.0 {
            Normal::new(0.0, scale * dim).unwrap().sample(rng)
        } else {
            0.0
        }
    };
    let (dx, dy, dw, dh) = (n(b.w), n(b.h), n(b.w), n(b.h));
    let (wf, hf) = (width as f64, height as f64);
    let x = (b.x + dx).clamp(0.0, wf - 1.0);
    let y = (b.y + dy).clamp(0.0, hf - 1.0);
    let w = (b.w + dw).clamp(1.0, wf - x);
    let h = (b.h + dh).clamp(1.0, hf - y);
    BBox::new(x, y, w, h)
}

fn beta_sample(rng: &mut ChaCha8Rng, a: f64, b: f64) -> f64 {
    Beta::new(a, b).unwrap().sample(rng).clamp(0.0, 1.0)
}

/// Raw detections for `image_ids` from a detector whose per-class quality is
/// `cov` (missing classes count as 0).
pub fn simulate_predictions(
    w: &World,
    cov: &BTreeMap<u64, f64>,
    cfg: &SimulatorConfig,
    image_ids: &[u64],
    round: u32,
) -> Result<PredictionSet> {
    let index = SceneIndex::new(w);
    let quality = |c: u64| cov.get(&c).copied().unwrap_or(0.0).clamp(0.0, 1.0);
    let mean_quality = if index.categories.is_empty() {
        0.0
    } else {
        index.categories.iter().map(|&c| quality(c)).sum::<f64>() / index.categories.len() as f64
    };
    let fp_rate = cfg.false_positive_rate(mean_quality);

    let mut detections = Vec::new();
    for &image_id in image_ids {
        let (img, truth) = index.images.get(&image_id).ok_or_else(|| {
            Error::UnresolvableReference(format!("image {image_id} is not part of the world"))
        })?;
        let mut rng = stream(cfg.seed, round as u64, image_id);
        for a in truth {
            let q = quality(a.category_id);
            if rng.gen::<f64>() >= cfg.detection_probability(q) {
                continue;
            }
            let bbox = jitter(&mut rng, &a.bbox, cfg.jitter_scale(q), img.width, img.height);
            let score = beta_sample(&mut rng, 1.0 + cfg.conf_tp_alpha * q, 2.0);
            detections.push(Detection::new(image_id, a.category_id, bbox, score));
        }
        let n_fp = if fp_rate > 0.0 {
            Poisson::new(fp_rate).unwrap().sample(&mut rng) as usize
        } else {
            0
        };
        if index.categories.is_empty() {
            continue;
        }
        for _ in 0..n_fp {
            let class = *index.categories.choose(&mut rng).unwrap();
            let bbox = random_box(&mut rng, img.width, img.height);
            let score = beta_sample(&mut rng, 1.0, 3.0);
            detections.push(Detection::new(image_id, class, bbox, score));
        }
    }
    Ok(PredictionSet::new(round, detections))
}
