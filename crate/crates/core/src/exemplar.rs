//! Base-class exemplar selection: clustering-based greedy coverage, plus
//! random and class-mean (herding) baselines.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::DetectorState;
use crate::error::{Error, Result};
use crate::model::{ClassId, ExposedScene};
use crate::rng::{stream, substream};

/// Network layer whose output represents an object for selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FeatureLayer {
    /// Post-CSE object feature consumed by the heads.
    #[default]
    Object,
    /// Output of the class-agnostic extractor.
    Agnostic,
}

/// Mean feature of one class's instances within one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageClassFeature {
    pub scene_id: u64,
    pub class: ClassId,
    pub feature: Vec<f64>,
}

/// For every scene and every distinct annotated class in it, the mean
/// feature at that class's ground-truth boxes. Scenes without annotations
/// contribute nothing.
pub fn extract_image_class_features(
    state: &DetectorState,
    scenes: &[ExposedScene],
    layer: FeatureLayer,
) -> Vec<ImageClassFeature> {
    let mut out = Vec::new();
    for ex in scenes {
        let mut sums: BTreeMap<ClassId, (Vec<f64>, usize)> = BTreeMap::new();
        for (_, inst) in ex.visible_instances() {
            let cache = state.forward_cached(&ex.scene, &inst.bbox);
            let f = match layer {
                FeatureLayer::Object => cache.output.obj_feature,
                FeatureLayer::Agnostic => cache.agnostic,
            };
            let e = sums.entry(inst.class).or_insert_with(|| (vec![0.0; f.len()], 0));
            for (a, b) in e.0.iter_mut().zip(&f) {
                *a += b;
            }
            e.1 += 1;
        }
        for (class, (sum, n)) in sums {
            out.push(ImageClassFeature {
                scene_id: ex.scene.scene_id,
                class,
                feature: sum.into_iter().map(|v| v / n as f64).collect(),
            });
        }
    }
    out
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

/// Index of the nearest centroid; ties go to the lower index.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

pub const KMEANS_MAX_ITER: usize = 100;

/// Lloyd's algorithm from k-means++ seeding, run to an assignment fixpoint
/// or [`KMEANS_MAX_ITER`] iterations. With fewer points than `k`, the
/// centroids are the points themselves padded with copies of the last one.
pub fn kmeans<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Result<KMeans> {
    if points.is_empty() {
        return Err(Error::Empty("k-means input"));
    }
    if k == 0 {
        return Err(Error::Config("k-means needs k >= 1".into()));
    }
    let n = points.len();
    let mut centroids: Vec<Vec<f64>> = if n < k {
        let mut c = points.to_vec();
        while c.len() < k {
            c.push(points[n - 1].clone());
        }
        c
    } else {
        plus_plus_seeds(points, k, rng)
    };

    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    let mut iterations = 0;
    if n >= k {
        while iterations < KMEANS_MAX_ITER {
            iterations += 1;
            let dim = points[0].len();
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for (p, &a) in points.iter().zip(&assignment) {
                counts[a] += 1;
                for (s, v) in sums[a].iter_mut().zip(p) {
                    *s += v;
                }
            }
            for c in 0..k {
                // an emptied cluster keeps its previous centroid
                if counts[c] > 0 {
                    centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                }
            }
            let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
            if next == assignment {
                break;
            }
            assignment = next;
        }
    }
    let inertia = points
        .iter()
        .zip(&assignment)
        .map(|(p, &a)| squared_distance(p, &centroids[a]))
        .sum();
    Ok(KMeans {
        centroids,
        assignment,
        inertia,
        iterations,
    })
}

fn plus_plus_seeds<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            while d2[pick] == 0.0 && pick > 0 {
                pick -= 1;
            }
            pick
        } else {
            // every point coincides with a centre already
            let rest: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            *rest.choose(rng).unwrap_or(&chosen[0])
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// `K` centroids per base class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCentroids {
    pub k: usize,
    pub per_class: BTreeMap<ClassId, Vec<Vec<f64>>>,
}

impl ClassCentroids {
    /// Clusters each class's image features into `k` groups. The k-means
    /// stream of `seed` is shared by all classes in ascending class order.
    pub fn fit(features: &[ImageClassFeature], classes: &[ClassId], k: usize, seed: u64) -> Result<Self> {
        let mut rng = substream(seed, stream::KMEANS);
        let mut per_class = BTreeMap::new();
        let mut sorted = classes.to_vec();
        sorted.sort();
        for c in sorted {
            let pts: Vec<Vec<f64>> = features
                .iter()
                .filter(|f| f.class == c)
                .map(|f| f.feature.clone())
                .collect();
            if pts.is_empty() {
                continue;
            }
            per_class.insert(c, kmeans(&pts, k, &mut rng)?.centroids);
        }
        Ok(ClassCentroids { k, per_class })
    }

    /// Nearest-centroid index for a feature of `class`.
    pub fn assign(&self, class: ClassId, feature: &[f64]) -> Option<usize> {
        self.per_class.get(&class).map(|cs| nearest(feature, cs))
    }

    /// `(class, cluster)` pairs that can be covered: duplicated centroids
    /// collapse onto their first occurrence.
    pub fn coverable(&self) -> BTreeSet<(ClassId, usize)> {
        let mut out = BTreeSet::new();
        for (&c, cs) in &self.per_class {
            for (i, v) in cs.iter().enumerate() {
                if !cs[..i].contains(v) {
                    out.insert((c, i));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExemplarMethod {
    None,
    /// Greedy cluster coverage.
    Clustering,
    Random,
    ClassMean,
}

impl ExemplarMethod {
    pub fn label(self) -> &'static str {
        match self {
            ExemplarMethod::None => "",
            ExemplarMethod::Clustering => "e",
            ExemplarMethod::Random => "e_r",
            ExemplarMethod::ClassMean => "e_a",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarSet {
    pub method: ExemplarMethod,
    pub seed: Option<u64>,
    /// Selected scenes in selection order.
    pub scenes: Vec<u64>,
    pub covered: BTreeSet<(ClassId, usize)>,
    /// Coverable pairs left uncovered when selection stalls.
    pub uncovered: BTreeSet<(ClassId, usize)>,
}

impl ExemplarSet {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Per-scene assignment pairs and the mean distance to the assigned
/// centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneAssignment {
    pub scene_id: u64,
    pub pairs: BTreeSet<(ClassId, usize)>,
    pub mean_distance: f64,
}

pub fn scene_assignments(features: &[ImageClassFeature], centroids: &ClassCentroids) -> Vec<SceneAssignment> {
    let mut by_scene: BTreeMap<u64, Vec<&ImageClassFeature>> = BTreeMap::new();
    for f in features {
        if centroids.per_class.contains_key(&f.class) {
            by_scene.entry(f.scene_id).or_default().push(f);
        }
    }
    by_scene
        .into_iter()
        .map(|(scene_id, fs)| {
            let mut pairs = BTreeSet::new();
            let mut total = 0.0;
            for f in &fs {
                let cs = &centroids.per_class[&f.class];
                let q = nearest(&f.feature, cs);
                pairs.insert((f.class, q));
                total += distance(&f.feature, &cs[q]);
            }
            SceneAssignment {
                scene_id,
                pairs,
                mean_distance: total / fs.len() as f64,
            }
        })
        .collect()
}

/// Repeatedly takes, among scenes none of whose assignment pairs is
/// covered yet, the one closest on average to its assigned centroids, until
/// every coverable pair is covered or no such scene remains. Ties go to the
/// smaller scene id.
pub fn select_exemplars_clustering(
    features: &[ImageClassFeature],
    centroids: &ClassCentroids,
) -> ExemplarSet {
    let candidates = scene_assignments(features, centroids);
    let target = centroids.coverable();
    let mut covered: BTreeSet<(ClassId, usize)> = BTreeSet::new();
    let mut scenes = Vec::new();
    let mut taken = vec![false; candidates.len()];
    while covered.len() < target.len() {
        let mut best: Option<usize> = None;
        for (i, cand) in candidates.iter().enumerate() {
            if taken[i] || cand.pairs.iter().any(|p| covered.contains(p)) {
                continue;
            }
            // candidates are in ascending scene id, so strict < keeps the smaller id
            if best.is_none_or(|b| cand.mean_distance < candidates[b].mean_distance) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        taken[b] = true;
        covered.extend(candidates[b].pairs.iter().copied());
        scenes.push(candidates[b].scene_id);
    }
    let uncovered = target.difference(&covered).copied().collect();
    ExemplarSet {
        method: ExemplarMethod::Clustering,
        seed: None,
        scenes,
        covered,
        uncovered,
    }
}

/// Uniform sample without replacement. Asking for more scenes than exist
/// returns them all.
pub fn select_exemplars_random(scene_ids: &[u64], count: usize, seed: u64) -> ExemplarSet {
    if count > scene_ids.len() {
        log::warn!(
            "requested {count} random exemplars but only {} scenes exist; taking all",
            scene_ids.len()
        );
    }
    let mut rng = substream(seed, stream::EXEMPLAR);
    let scenes = scene_ids
        .choose_multiple(&mut rng, count.min(scene_ids.len()))
        .copied()
        .collect();
    ExemplarSet {
        method: ExemplarMethod::Random,
        seed: Some(seed),
        scenes,
        covered: BTreeSet::new(),
        uncovered: BTreeSet::new(),
    }
}

/// Herding per class: pick `k` scenes one at a time so the running mean of
/// the picked features stays closest to the class mean. The union over
/// classes is taken step by step (every class's first pick, then every
/// second pick, ...), duplicates dropped, and cut to `budget` scenes when
/// one is given.
pub fn select_exemplars_classmean(features: &[ImageClassFeature], k: usize, budget: Option<usize>) -> ExemplarSet {
    let mut by_class: BTreeMap<ClassId, Vec<&ImageClassFeature>> = BTreeMap::new();
    for f in features {
        by_class.entry(f.class).or_default().push(f);
    }
    let orders: Vec<Vec<u64>> = by_class.into_values().map(|fs| herding_order(fs, k)).collect();
    let mut scenes: Vec<u64> = Vec::new();
    for step in 0..k {
        for order in &orders {
            if let Some(&id) = order.get(step) {
                if !scenes.contains(&id) {
                    scenes.push(id);
                }
            }
        }
    }
    if let Some(b) = budget {
        scenes.truncate(b);
    }
    ExemplarSet {
        method: ExemplarMethod::ClassMean,
        seed: None,
        scenes,
        covered: BTreeSet::new(),
        uncovered: BTreeSet::new(),
    }
}

/// Scene ids of one class's herding picks, in pick order.
fn herding_order(mut fs: Vec<&ImageClassFeature>, k: usize) -> Vec<u64> {
    fs.sort_by_key(|f| f.scene_id);
    let dim = fs[0].feature.len();
    let mut mean = vec![0.0; dim];
    for f in &fs {
        for (m, v) in mean.iter_mut().zip(&f.feature) {
            *m += v / fs.len() as f64;
        }
    }
    let mut sum = vec![0.0; dim];
    let mut picked = vec![false; fs.len()];
    let mut order = Vec::new();
    for step in 1..=k.min(fs.len()) {
        let mut best: Option<(usize, f64)> = None;
        for (i, f) in fs.iter().enumerate() {
            if picked[i] {
                continue;
            }
            let d: f64 = mean
                .iter()
                .zip(&sum)
                .zip(&f.feature)
                .map(|((m, s), v)| {
                    let r = m - (s + v) / step as f64;
                    r * r
                })
                .sum();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("k capped by candidate count");
        picked[i] = true;
        for (s, v) in sum.iter_mut().zip(&fs[i].feature) {
            *s += v;
        }
        order.push(fs[i].scene_id);
    }
    order
}

/// `(class, cluster)` pairs reached by the nearest-centroid assignments of
/// the given scenes.
pub fn coverage_of(
    scenes: &[u64],
    features: &[ImageClassFeature],
    centroids: &ClassCentroids,
) -> BTreeSet<(ClassId, usize)> {
    let wanted: BTreeSet<u64> = scenes.iter().copied().collect();
    scene_assignments(features, centroids)
        .into_iter()
        .filter(|a| wanted.contains(&a.scene_id))
        .flat_map(|a| a.pairs)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn feat(scene_id: u64, class: usize, v: &[f64]) -> ImageClassFeature {
        ImageClassFeature {
            scene_id,
            class: ClassId(class),
            feature: v.to_vec(),
        }
    }

    #[test]
    fn kmeans_k1_is_mean() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, -1.0]];
        let km = kmeans(&pts, 1, &mut substream(0, "k")).unwrap();
        assert!((km.centroids[0][0] - 2.0).abs() < 1e-12);
        assert!((km.centroids[0][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_n_equals_k_has_zero_inertia() {
        let pts = vec![vec![0.0], vec![5.0], vec![9.0]];
        let km = kmeans(&pts, 3, &mut substream(1, "k")).unwrap();
        assert_eq!(km.inertia, 0.0);
    }

    #[test]
    fn kmeans_pads_when_short() {
        let pts = vec![vec![1.0], vec![2.0]];
        let km = kmeans(&pts, 4, &mut substream(1, "k")).unwrap();
        assert_eq!(km.centroids, vec![vec![1.0], vec![2.0], vec![2.0], vec![2.0]]);
        assert!(kmeans(&[], 2, &mut substream(1, "k")).is_err());
    }

    /// Best bipartition by exhaustive enumeration.
    fn best_bipartition(pts: &[Vec<f64>]) -> f64 {
        let n = pts.len();
        let mut best = f64::INFINITY;
        for mask in 1..(1u32 << n) - 1 {
            let mut cost = 0.0;
            for side in [true, false] {
                let group: Vec<&Vec<f64>> = (0..n).filter(|i| ((mask >> i) & 1 == 1) == side).map(|i| &pts[i]).collect();
                let d = group[0].len();
                let mean: Vec<f64> = (0..d).map(|j| group.iter().map(|p| p[j]).sum::<f64>() / group.len() as f64).collect();
                cost += group.iter().map(|p| squared_distance(p, &mean)).sum::<f64>();
            }
            best = best.min(cost);
        }
        best
    }

    #[test]
    fn kmeans_two_groups_matches_exhaustive() {
        let mut rng = substream(3, "pts");
        for trial in 0..5 {
            let n = 6 + trial;
            let pts: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let off = if i % 2 == 0 { 10.0 } else { -10.0 };
                    vec![off + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
                })
                .collect();
            let km = kmeans(&pts, 2, &mut substream(trial as u64, "k")).unwrap();
            assert!((km.inertia - best_bipartition(&pts)).abs() < 1e-9);
        }
    }

    /// Exhaustive oracle: every maximal sequence of eligible picks, keeping
    /// the lexicographically smallest by (mean distance, scene id) per step.
    fn enumerate_greedy(features: &[ImageClassFeature], cent: &ClassCentroids) -> Vec<u64> {
        let mut scenes: BTreeMap<u64, Vec<&ImageClassFeature>> = BTreeMap::new();
        for f in features {
            scenes.entry(f.scene_id).or_default().push(f);
        }
        let info: Vec<(u64, BTreeSet<(ClassId, usize)>, f64)> = scenes
            .iter()
            .map(|(&id, fs)| {
                let mut pairs = BTreeSet::new();
                let mut d = 0.0;
                for f in fs {
                    let cs = &cent.per_class[&f.class];
                    let (q, dq) = cs
                        .iter()
                        .enumerate()
                        .map(|(i, c)| (i, distance(&f.feature, c)))
                        .fold((0, f64::INFINITY), |b, x| if x.1 < b.1 { x } else { b });
                    pairs.insert((f.class, q));
                    d += dq;
                }
                (id, pairs, d / fs.len() as f64)
            })
            .collect();
        let target = cent.coverable().len();
        let mut best: Option<Vec<(f64, u64)>> = None;
        fn rec(
            info: &[(u64, BTreeSet<(ClassId, usize)>, f64)],
            target: usize,
            used: &mut Vec<bool>,
            covered: &BTreeSet<(ClassId, usize)>,
            seq: &mut Vec<(f64, u64)>,
            best: &mut Option<Vec<(f64, u64)>>,
        ) {
            let eligible: Vec<usize> = (0..info.len())
                .filter(|&i| !used[i] && info[i].1.is_disjoint(covered))
                .collect();
            if covered.len() >= target || eligible.is_empty() {
                let better = match best {
                    None => true,
                    Some(b) => seq.iter().map(|x| (x.0, x.1)).partial_cmp(b.iter().copied()) == Some(std::cmp::Ordering::Less),
                };
                if better {
                    *best = Some(seq.clone());
                }
                return;
            }
            for i in eligible {
                used[i] = true;
                let mut c = covered.clone();
                c.extend(info[i].1.iter().copied());
                seq.push((info[i].2, info[i].0));
                rec(info, target, used, &c, seq, best);
                seq.pop();
                used[i] = false;
            }
        }
        rec(&info, target, &mut vec![false; info.len()], &BTreeSet::new(), &mut Vec::new(), &mut best);
        best.unwrap().into_iter().map(|x| x.1).collect()
    }

    fn random_instance(seed: u64, n_scenes: u64, n_classes: usize, k: usize) -> (Vec<ImageClassFeature>, ClassCentroids) {
        let mut rng = substream(seed, "inst");
        let mut fs = Vec::new();
        for s in 0..n_scenes {
            for c in 0..n_classes {
                if rng.random_bool(0.6) {
                    fs.push(feat(s * 3 + 1, c, &[rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]));
                }
            }
        }
        if fs.is_empty() {
            fs.push(feat(0, 0, &[0.0, 0.0]));
        }
        let classes: Vec<ClassId> = (0..n_classes).map(ClassId).collect();
        let cent = ClassCentroids::fit(&fs, &classes, k, seed).unwrap();
        (fs, cent)
    }

    #[test]
    fn greedy_matches_exhaustive_enumeration() {
        // 4 scenes, 2 classes, K = 1, hand-built
        let fs = vec![
            feat(0, 0, &[0.0]),
            feat(0, 1, &[9.0]),
            feat(1, 0, &[1.0]),
            feat(2, 1, &[10.2]),
            feat(3, 0, &[0.4]),
            feat(3, 1, &[10.1]),
        ];
        let cent = ClassCentroids::fit(&fs, &[ClassId(0), ClassId(1)], 1, 0).unwrap();
        assert_eq!(select_exemplars_clustering(&fs, &cent).scenes, enumerate_greedy(&fs, &cent));
        for seed in 0..60 {
            let (fs, cent) = random_instance(seed, 3 + seed % 6, 1 + (seed as usize % 3), 1 + (seed as usize % 2));
            let e = select_exemplars_clustering(&fs, &cent);
            assert_eq!(e.scenes, enumerate_greedy(&fs, &cent), "seed {seed}");
            assert!(e.scenes.len() <= cent.per_class.len() * cent.k);
            assert_eq!(coverage_of(&e.scenes, &fs, &cent), e.covered);
        }
    }

    #[test]
    fn identical_features_pick_smallest_scene() {
        let fs = vec![feat(5, 0, &[1.0]), feat(2, 0, &[1.0]), feat(9, 0, &[1.0])];
        let cent = ClassCentroids::fit(&fs, &[ClassId(0)], 1, 0).unwrap();
        let e = select_exemplars_clustering(&fs, &cent);
        assert_eq!(e.scenes, vec![2]);
        assert!(e.uncovered.is_empty());
    }

    #[test]
    fn duplicated_centroids_shrink_target() {
        let fs = vec![feat(0, 0, &[1.0]), feat(1, 0, &[1.0])];
        let cent = ClassCentroids::fit(&fs, &[ClassId(0)], 3, 0).unwrap();
        assert_eq!(cent.per_class[&ClassId(0)].len(), 3);
        assert_eq!(cent.coverable().len(), 1);
        let e = select_exemplars_clustering(&fs, &cent);
        assert_eq!(e.scenes, vec![0]);
    }

    #[test]
    fn stalls_and_reports_uncovered() {
        // both scenes contain class 0 in cluster 0, only scene 1 covers class 1 cluster 0
        let fs = vec![
            feat(0, 0, &[0.0]),
            feat(1, 0, &[0.1]),
            feat(1, 1, &[5.0]),
        ];
        let cent = ClassCentroids {
            k: 1,
            per_class: [(ClassId(0), vec![vec![0.0]]), (ClassId(1), vec![vec![5.0]])].into_iter().collect(),
        };
        let e = select_exemplars_clustering(&fs, &cent);
        assert_eq!(e.scenes, vec![0]);
        assert_eq!(e.uncovered, [(ClassId(1), 0)].into_iter().collect());
    }

    #[test]
    fn random_selection_contract() {
        let ids: Vec<u64> = (0..30).collect();
        let all = select_exemplars_random(&ids, 30, 1);
        let mut s = all.scenes.clone();
        s.sort();
        assert_eq!(s, ids);
        assert_eq!(select_exemplars_random(&ids, 50, 1).scenes.len(), 30);
        let a = select_exemplars_random(&ids, 6, 1);
        let b = select_exemplars_random(&ids, 6, 2);
        assert_eq!(a, select_exemplars_random(&ids, 6, 1));
        assert_ne!(a.scenes, b.scenes);
    }

    #[test]
    fn herding_first_step_is_nearest_to_mean() {
        let fs = vec![feat(0, 0, &[0.0]), feat(1, 0, &[4.0]), feat(2, 0, &[1.5]), feat(3, 0, &[10.0])];
        // mean 3.875 -> nearest is 4.0
        assert_eq!(select_exemplars_classmean(&fs, 1, None).scenes, vec![1]);
        let same = vec![feat(4, 0, &[1.0]), feat(2, 0, &[1.0]), feat(7, 0, &[1.0])];
        assert_eq!(select_exemplars_classmean(&same, 2, None).scenes, vec![2, 4]);
    }

    /// Brute-force step oracle: at each step, the candidate minimizing
    /// |mean(selected + candidate) - class mean|.
    #[test]
    fn herding_matches_stepwise_bruteforce() {
        let mut rng = substream(8, "herd");
        let fs: Vec<ImageClassFeature> = (0..7)
            .map(|i| feat(i, 0, &[rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]))
            .collect();
        let mean: Vec<f64> = (0..2).map(|j| fs.iter().map(|f| f.feature[j]).sum::<f64>() / 7.0).collect();
        let mut chosen: Vec<usize> = Vec::new();
        for _ in 0..3 {
            let mut best = (usize::MAX, f64::INFINITY);
            for i in 0..fs.len() {
                if chosen.contains(&i) {
                    continue;
                }
                let sel: Vec<usize> = chosen.iter().copied().chain([i]).collect();
                let m: Vec<f64> = (0..2)
                    .map(|j| sel.iter().map(|&s| fs[s].feature[j]).sum::<f64>() / sel.len() as f64)
                    .collect();
                let d = distance(&m, &mean);
                if d < best.1 {
                    best = (i, d);
                }
            }
            chosen.push(best.0);
        }
        let expected: Vec<u64> = chosen.iter().map(|&i| fs[i].scene_id).collect();
        assert_eq!(select_exemplars_classmean(&fs, 3, None).scenes, expected);
    }

    #[test]
    fn exemplar_set_json_round_trip() {
        let fs = vec![feat(0, 0, &[0.0]), feat(1, 0, &[3.0]), feat(1, 1, &[1.0])];
        let cent = ClassCentroids::fit(&fs, &[ClassId(0), ClassId(1)], 2, 4).unwrap();
        let e = select_exemplars_clustering(&fs, &cent);
        let back = ExemplarSet::from_json(&e.to_json().unwrap()).unwrap();
        assert_eq!(back, e);
    }
}
