//! Class-prompted text-to-image retrieval and Recall@k.
//!
//! A class query ranks every image by cosine similarity: dot product for a
//! single feature, the best row for a multi-feature record. Recall@k counts
//! how many of the class's `n` relevant images appear in the top `n * k`.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::{BankKind, FeatureBank};
use crate::synth::{dot, SceneSpec};

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("no images to score")]
    NoImages,
    #[error("empty relevant set")]
    NoRelevant,
    #[error("k must be >= 1")]
    ZeroK,
    #[error("dimension mismatch: expected {expected}, got {got} (image {image_id})")]
    Dim { expected: usize, got: usize, image_id: u64 },
    #[error("image {image_id}: row {row} has norm {norm}")]
    NotUnit { image_id: u64, row: usize, norm: f64 },
    #[error("duplicate image id {0}")]
    Duplicate(u64),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, RetrievalError>;

pub const UNIT_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_KS: [usize; 3] = [1, 3, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    FullImage,
    Cc,
    Grid,
    Obj,
    Fused,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Features {
    Single(Vec<f64>),
    /// One feature per row.
    Multi(Vec<Vec<f64>>),
}

impl Features {
    pub fn rows(&self) -> &[Vec<f64>] {
        match self {
            Features::Single(v) => std::slice::from_ref(v),
            Features::Multi(r) => r,
        }
    }

    /// Cosine score of unit `query` against this record.
    pub fn score(&self, query: &[f64]) -> f64 {
        match self {
            Features::Single(v) => dot(v, query),
            Features::Multi(rows) => rows.iter().map(|r| dot(r, query)).fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: u64,
    pub features: Features,
    pub source: SourceTag,
}

impl ImageRecord {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.features.rows().is_empty() {
            return Err(RetrievalError::Invalid(format!("image {} has no feature rows", self.image_id)));
        }
        for (row, r) in self.features.rows().iter().enumerate() {
            if r.len() != dim {
                return Err(RetrievalError::Dim { expected: dim, got: r.len(), image_id: self.image_id });
            }
            let norm = dot(r, r).sqrt();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(RetrievalError::NotUnit { image_id: self.image_id, row, norm });
            }
        }
        Ok(())
    }
}

fn renormalized(v: impl Iterator<Item = f64>) -> Vec<f64> {
    let v: Vec<f64> = v.collect();
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Converts an image bank to records. Rows are renormalised in f64 so that
/// the f32 storage error does not leak into the unit-norm invariant.
pub fn records_from_bank(bank: &FeatureBank, source: SourceTag) -> Result<Vec<ImageRecord>> {
    let d = bank.dim;
    let single = match bank.kind {
        BankKind::ImageSingle => true,
        BankKind::ImagePatches => false,
        BankKind::Text => return Err(RetrievalError::Invalid("text bank given where an image bank is needed".into())),
    };
    Ok(bank
        .images
        .iter()
        .map(|e| {
            let mut rows: Vec<Vec<f64>> =
                e.features.chunks(d).map(|r| renormalized(r.iter().map(|&x| x as f64))).collect();
            let features = if single { Features::Single(rows.remove(0)) } else { Features::Multi(rows) };
            ImageRecord { image_id: e.image_id, features, source }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassQuery {
    pub class_id: u32,
    pub name: String,
    pub feature: Vec<f64>,
    pub relevant: BTreeSet<u64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuerySet {
    pub queries: Vec<ClassQuery>,
}

impl QuerySet {
    /// One query per text-bank class; relevance is class presence in
    /// `scenes`.
    pub fn from_texts<'a>(texts: &FeatureBank, scenes: impl IntoIterator<Item = &'a SceneSpec>) -> Result<Self> {
        if texts.kind != BankKind::Text {
            return Err(RetrievalError::Invalid("expected a text bank".into()));
        }
        let rel = crate::synth::relevance(scenes);
        let queries = texts
            .texts
            .iter()
            .map(|t| ClassQuery {
                class_id: t.class_id,
                name: t.name.clone(),
                feature: renormalized(t.feature.iter().map(|&x| x as f64)),
                relevant: rel.get(&t.class_id).cloned().unwrap_or_default(),
            })
            .collect();
        Ok(Self { queries })
    }
}

/// Ranks `images` by descending similarity to `query`; equal scores are
/// ordered by ascending image id.
pub fn score_images(query: &[f64], images: &[ImageRecord]) -> Result<Vec<(u64, f64)>> {
    if images.is_empty() {
        return Err(RetrievalError::NoImages);
    }
    let d = query.len();
    let mut ranked = Vec::with_capacity(images.len());
    for img in images {
        if let Some(r) = img.features.rows().iter().find(|r| r.len() != d) {
            return Err(RetrievalError::Dim { expected: d, got: r.len(), image_id: img.image_id });
        }
        ranked.push((img.image_id, img.features.score(query)));
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

/// `|relevant ∩ top(n·k)| / n` with `n = |relevant|`; `n·k` is capped at
/// the ranking length.
pub fn recall_at_k(ranked: &[(u64, f64)], relevant: &BTreeSet<u64>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let n = relevant.len();
    if n == 0 {
        return Err(RetrievalError::NoRelevant);
    }
    let top = n.saturating_mul(k).min(ranked.len());
    let hits = ranked[..top].iter().filter(|(id, _)| relevant.contains(id)).count();
    Ok(hits as f64 / n as f64)
}

/// Scenes whose largest object covers at most `threshold` of the image.
pub fn filter_by_rmax<'a>(scenes: impl IntoIterator<Item = &'a SceneSpec>, threshold: f64) -> Result<Vec<&'a SceneSpec>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(RetrievalError::Invalid(format!("r_max threshold {threshold} outside (0, 1]")));
    }
    Ok(scenes.into_iter().filter(|s| s.r_max() <= threshold).collect())
}

/// Log-spaced histogram over shifted similarities `(1 + s) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistConfig {
    pub bins: usize,
    /// Lower edge of the first bin; smaller values are clamped into it.
    pub min_value: f64,
}

impl Default for HistConfig {
    fn default() -> Self {
        Self { bins: 40, min_value: 1e-3 }
    }
}

impl HistConfig {
    pub fn edges(&self) -> Vec<f64> {
        let lo = self.min_value.log10();
        (0..=self.bins).map(|i| 10f64.powf(lo * (1.0 - i as f64 / self.bins as f64))).collect()
    }

    pub fn bin(&self, s: f64) -> usize {
        let v = ((1.0 + s) / 2.0).clamp(self.min_value, 1.0);
        let lo = self.min_value.log10();
        let t = (v.log10() - lo) / -lo;
        ((t * self.bins as f64) as usize).min(self.bins - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHistogram {
    pub config: HistConfig,
    pub positive: Vec<u64>,
    pub negative: Vec<u64>,
    /// Geometric means of the shifted similarities.
    pub positive_geo_mean: f64,
    pub negative_geo_mean: f64,
}

impl SimilarityHistogram {
    pub fn total(&self) -> u64 {
        self.positive.iter().chain(&self.negative).sum()
    }

    pub fn to_csv(&self) -> String {
        let edges = self.config.edges();
        let mut s = String::from("bin,lo,hi,positive,negative\n");
        for i in 0..self.config.bins {
            s.push_str(&format!("{i},{:.6e},{:.6e},{},{}\n", edges[i], edges[i + 1], self.positive[i], self.negative[i]));
        }
        s.push_str(&format!("# geo_mean_positive={:.6e} geo_mean_negative={:.6e}\n", self.positive_geo_mean, self.negative_geo_mean));
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRecall {
    pub class: u32,
    pub name: String,
    pub n: usize,
    pub recall: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSettings {
    pub source: SourceTag,
    pub ks: Vec<usize>,
    pub num_images: usize,
    pub num_queries: usize,
    pub rmax: Option<f64>,
    pub excluded: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub dataset: String,
    pub per_class: Vec<ClassRecall>,
    #[serde(rename = "macro")]
    pub macro_recall: BTreeMap<usize, f64>,
    pub settings: ReportSettings,
}

impl RetrievalReport {
    pub fn macro_at(&self, k: usize) -> Option<f64> {
        self.macro_recall.get(&k).copied()
    }

    pub fn csv_header(ks: &[usize]) -> String {
        let cols: Vec<String> = ks.iter().map(|k| format!("recall@{k}")).collect();
        format!("source,class,name,n,{}\n", cols.join(","))
    }

    pub fn to_csv_rows(&self, label: &str) -> String {
        let ks = &self.settings.ks;
        let fmt = |m: &BTreeMap<usize, f64>| ks.iter().map(|k| format!("{:.6}", m[k])).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        for c in &self.per_class {
            s.push_str(&format!("{label},{},{},{},{}\n", c.class, c.name, c.n, fmt(&c.recall)));
        }
        s.push_str(&format!("{label},macro,,,{}\n", fmt(&self.macro_recall)));
        s
    }

    pub fn to_csv(&self, label: &str) -> String {
        Self::csv_header(&self.settings.ks) + &self.to_csv_rows(label)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: RetrievalReport,
    pub histogram: SimilarityHistogram,
}

pub fn evaluate(
    dataset: &str,
    images: &[ImageRecord],
    queries: &QuerySet,
    ks: &[usize],
    hist: HistConfig,
) -> Result<Evaluation> {
    if images.is_empty() {
        return Err(RetrievalError::NoImages);
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(RetrievalError::ZeroK);
    }
    if hist.bins == 0 || !(hist.min_value > 0.0 && hist.min_value < 1.0) {
        return Err(RetrievalError::Invalid("histogram needs bins >= 1 and min_value in (0, 1)".into()));
    }
    let dim = queries.queries.first().map_or(images[0].features.rows()[0].len(), |q| q.feature.len());
    let mut ids = BTreeSet::new();
    for img in images {
        img.validate(dim)?;
        if !ids.insert(img.image_id) {
            return Err(RetrievalError::Duplicate(img.image_id));
        }
    }
    let source = images[0].source;
    let ks: Vec<usize> = ks.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();

    struct PerQuery {
        recall: Option<ClassRecall>,
        pos: Vec<u64>,
        neg: Vec<u64>,
        pos_log: (f64, u64),
        neg_log: (f64, u64),
    }

    let per: Vec<PerQuery> = queries
        .queries
        .par_iter()
        .map(|q| {
            let ranked = score_images(&q.feature, images)?;
            let relevant: BTreeSet<u64> = q.relevant.intersection(&ids).copied().collect();
            let mut out = PerQuery {
                recall: None,
                pos: vec![0; hist.bins],
                neg: vec![0; hist.bins],
                pos_log: (0.0, 0),
                neg_log: (0.0, 0),
            };
            for &(id, s) in &ranked {
                let shifted = ((1.0 + s) / 2.0).clamp(hist.min_value, 1.0).ln();
                if relevant.contains(&id) {
                    out.pos[hist.bin(s)] += 1;
                    out.pos_log.0 += shifted;
                    out.pos_log.1 += 1;
                } else {
                    out.neg[hist.bin(s)] += 1;
                    out.neg_log.0 += shifted;
                    out.neg_log.1 += 1;
                }
            }
            if !relevant.is_empty() {
                let recall = ks.iter().map(|&k| Ok((k, recall_at_k(&ranked, &relevant, k)?))).collect::<Result<_>>()?;
                out.recall = Some(ClassRecall { class: q.class_id, name: q.name.clone(), n: relevant.len(), recall });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut per_class = Vec::new();
    let mut excluded = Vec::new();
    let mut positive = vec![0; hist.bins];
    let mut negative = vec![0; hist.bins];
    let (mut pl, mut pn, mut nl, mut nn) = (0.0, 0u64, 0.0, 0u64);
    for (q, p) in queries.queries.iter().zip(per) {
        match p.recall {
            Some(r) => per_class.push(r),
            None => excluded.push(q.name.clone()),
        }
        positive.iter_mut().zip(&p.pos).for_each(|(a, b)| *a += b);
        negative.iter_mut().zip(&p.neg).for_each(|(a, b)| *a += b);
        pl += p.pos_log.0;
        pn += p.pos_log.1;
        nl += p.neg_log.0;
        nn += p.neg_log.1;
    }
    let geo = |s: f64, n: u64| if n == 0 { f64::NAN } else { (s / n as f64).exp() };
    let macro_recall = ks
        .iter()
        .map(|&k| {
            let m = if per_class.is_empty() {
                0.0
            } else {
                per_class.iter().map(|c| c.recall[&k]).sum::<f64>() / per_class.len() as f64
            };
            (k, m)
        })
        .collect();
    Ok(Evaluation {
        report: RetrievalReport {
            dataset: dataset.into(),
            per_class,
            macro_recall,
            settings: ReportSettings {
                source,
                ks,
                num_images: images.len(),
                num_queries: queries.queries.len(),
                rmax: None,
                excluded,
            },
        },
        histogram: SimilarityHistogram {
            config: hist,
            positive,
            negative,
            positive_geo_mean: geo(pl, pn),
            negative_geo_mean: geo(nl, nn),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn e(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    fn single(id: u64, v: Vec<f64>) -> ImageRecord {
        ImageRecord { image_id: id, features: Features::Single(v), source: SourceTag::FullImage }
    }

    fn set(ids: &[u64]) -> BTreeSet<u64> {
        ids.iter().copied().collect()
    }

    #[test]
    fn exact_match_ranks_first() {
        let imgs = vec![single(3, e(4, 0)), single(1, e(4, 1))];
        let r = score_images(&e(4, 1), &imgs).unwrap();
        assert_eq!(r[0], (1, 1.0));
    }

    #[test]
    fn multi_uses_max_row() {
        let img = ImageRecord { image_id: 0, features: Features::Multi(vec![e(3, 0), e(3, 1)]), source: SourceTag::Cc };
        assert_eq!(score_images(&e(3, 1), &[img]).unwrap()[0].1, 1.0);
    }

    #[test]
    fn ties_break_by_id() {
        let imgs = vec![single(9, e(2, 0)), single(2, e(2, 0)), single(5, e(2, 1))];
        let r = score_images(&e(2, 0), &imgs).unwrap();
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![2, 9, 5]);
        assert_eq!(score_images(&e(2, 0), &[]), Err(RetrievalError::NoImages));
    }

    #[test]
    fn recall_examples() {
        let ranked: Vec<(u64, f64)> = (0..10).map(|i| (i, 1.0 - i as f64 * 0.1)).collect();
        assert_eq!(recall_at_k(&ranked, &set(&[0, 1, 2]), 1).unwrap(), 1.0);
        assert_eq!(recall_at_k(&ranked, &set(&[0, 1, 2, 7]), 1).unwrap(), 0.75);
        assert_eq!(recall_at_k(&ranked, &set(&[4, 5]), 3).unwrap(), 1.0);
        assert_eq!(recall_at_k(&ranked, &set(&[]), 1), Err(RetrievalError::NoRelevant));
        assert_eq!(recall_at_k(&ranked, &set(&[1]), 0), Err(RetrievalError::ZeroK));
    }

    #[test]
    fn rmax_filter() {
        use crate::cover::ObjectBox;
        use crate::synth::Split;
        let scene = |id, side| SceneSpec {
            image_id: id,
            side: 100,
            objects: vec![ObjectBox::new(0, 0, side, 50, 0)],
            split: Split::Test,
        };
        let scenes = vec![scene(0, 100), scene(1, 40), scene(2, 10)];
        assert_eq!(filter_by_rmax(&scenes, 1.0).unwrap().len(), 3);
        let kept: Vec<u64> = filter_by_rmax(&scenes, 10f64.powf(-0.5)).unwrap().iter().map(|s| s.image_id).collect();
        assert_eq!(kept, vec![1, 2]);
        assert!(filter_by_rmax(&scenes, 0.0).is_err());
    }

    #[test]
    fn histogram_bins_cover_range() {
        let h = HistConfig::default();
        let edges = h.edges();
        assert!((edges[0] - 1e-3).abs() < 1e-15 && edges[h.bins] == 1.0);
        assert_eq!(h.bin(1.0), h.bins - 1);
        assert_eq!(h.bin(-1.0), 0);
        for s in [-0.99, -0.5, 0.0, 0.3, 0.999] {
            let b = h.bin(s);
            let v = (1.0 + s) / 2.0;
            assert!(edges[b] <= v * (1.0 + 1e-12) && v <= edges[b + 1] * (1.0 + 1e-12), "{s}");
        }
    }

    #[test]
    fn perfect_queries_recall_one() {
        let d = 8;
        let imgs: Vec<ImageRecord> = (0..16).map(|i| single(i, e(d, (i % 4) as usize))).collect();
        let queries = QuerySet {
            queries: (0..5)
                .map(|c| ClassQuery {
                    class_id: c,
                    name: format!("c{c}"),
                    feature: e(d, c as usize),
                    relevant: (0..16).filter(|i| i % 4 == c as u64).collect(),
                })
                .collect(),
        };
        let ev = evaluate("t", &imgs, &queries, &DEFAULT_KS, HistConfig::default()).unwrap();
        assert_eq!(ev.report.per_class.len(), 4);
        assert_eq!(ev.report.settings.excluded, vec!["c4".to_string()]);
        assert!(ev.report.macro_recall.values().all(|&r| r == 1.0));
        assert_eq!(ev.histogram.total(), 5 * 16);
        let json = serde_json::to_value(&ev.report).unwrap();
        assert!(json["macro"]["1"].is_number());
        assert_eq!(json["per_class"][0]["recall"]["5"], 1.0);
    }

    #[test]
    fn evaluation_ignores_image_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = 6;
        let mut imgs: Vec<ImageRecord> = (0..30)
            .map(|i| single(i, renormalized((0..d).map(|_| rng.random_range(-1.0..1.0)))))
            .collect();
        let queries = QuerySet {
            queries: (0..3)
                .map(|c| ClassQuery {
                    class_id: c,
                    name: format!("c{c}"),
                    feature: e(d, c as usize),
                    relevant: (0..30).filter(|i| i % 3 == c as u64).collect(),
                })
                .collect(),
        };
        let a = evaluate("t", &imgs, &queries, &DEFAULT_KS, HistConfig::default()).unwrap();
        imgs.reverse();
        let b = evaluate("t", &imgs, &queries, &DEFAULT_KS, HistConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_features_hit_chance() {
        let (d, n_img, n_cls) = (32, 200, 40);
        let mut gaps = 0.0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let unit = |rng: &mut ChaCha8Rng| renormalized((0..d).map(|_| rng.random_range(-1.0..1.0)));
            let imgs: Vec<ImageRecord> = (0..n_img).map(|i| single(i, unit(&mut rng))).collect();
            let mut chance = 0.0;
            let queries: Vec<ClassQuery> = (0..n_cls)
                .map(|c| {
                    let relevant: BTreeSet<u64> = (0..n_img).filter(|_| rng.random_bool(0.15)).collect();
                    chance += relevant.len() as f64 / n_img as f64;
                    ClassQuery { class_id: c, name: c.to_string(), feature: unit(&mut rng), relevant }
                })
                .collect();
            chance /= n_cls as f64;
            let ev = evaluate("t", &imgs, &QuerySet { queries }, &[1], HistConfig::default()).unwrap();
            gaps += ev.report.macro_at(1).unwrap() - chance;
        }
        assert!((gaps / 20.0).abs() < 0.02, "{}", gaps / 20.0);
    }
}
