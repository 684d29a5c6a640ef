//! Cross-camera bag-of-words loop detection, geometric verification and
//! 6-DoF pose-graph optimization.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use nalgebra::{DMatrix, DVector, Matrix6, Vector3, Vector6};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::descriptor::Descriptor;
use crate::geometry::{so3_log, umeyama_alignment, Pose};
use crate::init::pnp_refine_rig;

pub const VOCAB_MAGIC: &[u8; 8] = b"MCVOVOC1";
pub const DEFAULT_BRANCHING: usize = 10;
pub const DEFAULT_DEPTH: usize = 3;
pub const DEFAULT_MIN_GAP: usize = 50;
pub const DEFAULT_SCORE_FLOOR: f64 = 0.3;
pub const MIN_LOOP_INLIERS: usize = 20;
pub const MATCH_RATIO: f64 = 0.8;

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("vocabulary file: {0}")]
    Io(#[from] io::Error),
    #[error("vocabulary file: {0}")]
    Format(String),
    #[error("pose graph is disconnected: vertex {0} is unreachable from vertex 0")]
    Disconnected(usize),
    #[error("edge {0} references a missing vertex")]
    BadEdge(usize),
}

/// Binary vocabulary: the leaf words of a hierarchical k-medians tree with
/// their inverse-document-frequency weights. Descriptors are quantized to the
/// nearest word by Hamming distance.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    pub branching: usize,
    pub depth: usize,
    pub words: Vec<Descriptor>,
    pub weights: Vec<f64>,
}

fn nearest(centers: &[Descriptor], d: &Descriptor) -> (usize, u32) {
    let mut best = (0, u32::MAX);
    for (i, c) in centers.iter().enumerate() {
        let h = c.hamming(d);
        if h < best.1 {
            best = (i, h);
        }
    }
    best
}

fn k_medians(items: &[Descriptor], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Descriptor>> {
    // Seeding: first center at random, then farthest-point style sampling
    // weighted by squared distance.
    let mut centers = vec![items[rng.random_range(0..items.len())]];
    while centers.len() < k {
        let dist: Vec<f64> = items.iter().map(|d| (nearest(&centers, d).1 as f64).powi(2)).collect();
        let total: f64 = dist.iter().sum();
        if total == 0.0 {
            break;
        }
        let mut pick = rng.random::<f64>() * total;
        let mut idx = items.len() - 1;
        for (i, w) in dist.iter().enumerate() {
            if pick < *w {
                idx = i;
                break;
            }
            pick -= w;
        }
        centers.push(items[idx]);
    }
    let mut assign = vec![usize::MAX; items.len()];
    for _ in 0..10 {
        let mut changed = false;
        for (i, d) in items.iter().enumerate() {
            let a = nearest(&centers, d).0;
            if assign[i] != a {
                assign[i] = a;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Descriptor> = items.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(d, _)| d).collect();
            if !members.is_empty() {
                *center = Descriptor::majority(members);
            }
        }
    }
    let mut groups = vec![Vec::new(); centers.len()];
    for (d, &a) in items.iter().zip(&assign) {
        groups[a].push(*d);
    }
    groups.retain(|g| !g.is_empty());
    groups
}

fn build_node(items: &[Descriptor], k: usize, levels: usize, rng: &mut ChaCha8Rng, words: &mut Vec<Descriptor>) {
    if levels == 0 || items.len() <= k {
        if levels > 0 && items.len() > 1 {
            // Too few descriptors to split further: each distinct one is a word.
            let mut uniq = items.to_vec();
            uniq.sort();
            uniq.dedup();
            words.extend(uniq);
        } else {
            words.push(Descriptor::majority(items));
        }
        return;
    }
    for group in k_medians(items, k, rng) {
        build_node(&group, k, levels - 1, rng, words);
    }
}

impl Vocabulary {
    /// Hierarchical k-medians under Hamming distance, deterministic per seed.
    pub fn build(descriptors: &[Descriptor], branching: usize, depth: usize, seed: u64) -> Self {
        assert!(branching >= 2 && depth >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut words = Vec::new();
        if !descriptors.is_empty() {
            build_node(descriptors, branching, depth, &mut rng, &mut words);
        }
        let mut counts = vec![0usize; words.len()];
        for d in descriptors {
            counts[nearest(&words, d).0] += 1;
        }
        let n = descriptors.len().max(1) as f64;
        let weights = counts.iter().map(|&c| (n / c.max(1) as f64).ln()).collect();
        Self {
            branching,
            depth,
            words,
            weights,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn quantize(&self, d: &Descriptor) -> usize {
        nearest(&self.words, d).0
    }

    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        w.write_all(VOCAB_MAGIC)?;
        for v in [self.branching, self.depth, self.words.len()] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for (d, wt) in self.words.iter().zip(&self.weights) {
            w.write_all(&d.to_bytes())?;
            w.write_all(&wt.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, LoopError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != VOCAB_MAGIC {
            return Err(LoopError::Format("bad magic".into()));
        }
        let mut u = [0u8; 4];
        let mut header = [0usize; 3];
        for h in &mut header {
            r.read_exact(&mut u)?;
            *h = u32::from_le_bytes(u) as usize;
        }
        let [branching, depth, count] = header;
        let mut words = Vec::with_capacity(count);
        let mut weights = Vec::with_capacity(count);
        for _ in 0..count {
            let mut b = [0u8; 32];
            r.read_exact(&mut b)?;
            let mut f = [0u8; 8];
            r.read_exact(&mut f)?;
            let wt = f64::from_le_bytes(f);
            if !(wt >= 0.0) {
                return Err(LoopError::Format(format!("negative weight {wt}")));
            }
            words.push(Descriptor::from_bytes(&b));
            weights.push(wt);
        }
        Ok(Self {
            branching,
            depth,
            words,
            weights,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), LoopError> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, LoopError> {
        Self::read_from(io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Sparse L1-normalized tf-idf histogram keyed by word index.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct BowVector(pub BTreeMap<usize, f64>);

impl BowVector {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn l1_norm(&self) -> f64 {
        self.0.values().map(|v| v.abs()).sum()
    }
}

/// Bag of words of descriptors pooled across all cameras of a bundle.
pub fn bow_vector<'a>(descriptors: impl IntoIterator<Item = &'a Descriptor>, vocab: &Vocabulary) -> BowVector {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut total = 0usize;
    for d in descriptors {
        *counts.entry(vocab.quantize(d)).or_default() += 1;
        total += 1;
    }
    if total == 0 {
        return BowVector::default();
    }
    let mut v: BTreeMap<usize, f64> = counts
        .iter()
        .map(|(&w, &c)| (w, c as f64 / total as f64 * vocab.weights[w]))
        .collect();
    let mut norm: f64 = v.values().sum();
    if norm <= 0.0 {
        // Every word is uninformative: fall back to plain term frequency.
        v = counts.iter().map(|(&w, &c)| (w, c as f64 / total as f64)).collect();
        norm = 1.0;
    }
    for x in v.values_mut() {
        *x /= norm;
    }
    v.retain(|_, x| *x > 0.0);
    BowVector(v)
}

/// Similarity `1 - |a - b|_1 / 2` in `[0, 1]`.
pub fn bow_score(a: &BowVector, b: &BowVector) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut diff = 0.0;
    for (w, x) in &a.0 {
        diff += (x - b.0.get(w).copied().unwrap_or(0.0)).abs();
    }
    for (w, y) in &b.0 {
        if !a.0.contains_key(w) {
            diff += y.abs();
        }
    }
    (1.0 - 0.5 * diff).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyframeFeature {
    pub camera: usize,
    pub descriptor: Descriptor,
    /// Unit ray in the camera frame.
    pub ray: Vector3<f64>,
    /// Landmark position in the keyframe's body frame, when triangulated.
    pub point: Option<Vector3<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyframeBundle {
    pub id: usize,
    pub frame: usize,
    /// `world_T_body` at insertion time.
    pub pose: Pose,
    pub features: Vec<KeyframeFeature>,
    pub bow: BowVector,
}

impl KeyframeBundle {
    pub fn new(id: usize, frame: usize, pose: Pose, features: Vec<KeyframeFeature>, vocab: &Vocabulary) -> Self {
        let bow = bow_vector(features.iter().map(|f| &f.descriptor), vocab);
        Self {
            id,
            frame,
            pose,
            features,
            bow,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopCandidate {
    pub query: usize,
    pub matched: usize,
    pub score: f64,
    /// `match_body_T_query_body` once verified.
    pub relative: Option<Pose>,
    pub inliers: usize,
}

/// Database candidates at least `min_gap` keyframes older than the query whose
/// score reaches `floor` times the query's similarity to its previous
/// keyframe. Best three, highest score first.
pub fn query_loop_candidates(
    database: &[KeyframeBundle],
    query: &KeyframeBundle,
    min_gap: usize,
    floor: f64,
) -> Vec<LoopCandidate> {
    let reference = database
        .iter()
        .filter(|k| k.id < query.id)
        .max_by_key(|k| k.id)
        .map(|k| bow_score(&k.bow, &query.bow))
        .unwrap_or(1.0);
    let mut out: Vec<LoopCandidate> = database
        .iter()
        .filter(|k| k.id + min_gap <= query.id)
        .map(|k| LoopCandidate {
            query: query.id,
            matched: k.id,
            score: bow_score(&k.bow, &query.bow),
            relative: None,
            inliers: 0,
        })
        .filter(|c| c.score > 0.0 && c.score >= floor * reference)
        .collect();
    out.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.matched.cmp(&b.matched)));
    out.truncate(3);
    out
}

/// Mutual nearest-neighbour matches under Hamming distance with a ratio test.
pub fn match_descriptors(a: &[KeyframeFeature], b: &[KeyframeFeature], ratio: f64) -> Vec<(usize, usize)> {
    let best = |from: &[KeyframeFeature], to: &[KeyframeFeature], i: usize| -> Option<usize> {
        let (mut b1, mut b2, mut idx) = (u32::MAX, u32::MAX, None);
        for (j, f) in to.iter().enumerate() {
            let h = from[i].descriptor.hamming(&f.descriptor);
            if h < b1 {
                b2 = b1;
                b1 = h;
                idx = Some(j);
            } else if h < b2 {
                b2 = h;
            }
        }
        idx.filter(|_| b2 == u32::MAX || (b1 as f64) < ratio * b2 as f64)
    };
    (0..a.len())
        .filter_map(|i| {
            let j = best(a, b, i)?;
            (best(b, a, j) == Some(i)).then_some((i, j))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyParams {
    pub min_inliers: usize,
    pub ratio: f64,
    /// Angular reprojection threshold (radians).
    pub angle_threshold: f64,
    /// 3D consistency threshold for the alignment hypotheses (meters).
    pub point_threshold: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for VerifyParams {
    fn default() -> Self {
        Self {
            min_inliers: MIN_LOOP_INLIERS,
            ratio: MATCH_RATIO,
            angle_threshold: 0.02,
            point_threshold: 0.5,
            iterations: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Rejection {
    TooFewMatches(usize),
    TooFewInliers(usize),
    RefinementFailed,
}

/// Geometric check of a loop candidate.
///
/// Descriptor matches between the bundles give 3D-3D correspondences; a
/// three-point rigid RANSAC proposes `match_T_query`, which is refined by
/// multi-camera PnP of the match keyframe's points against the query rays.
/// Accepted when at least `min_inliers` correspondences agree.
pub fn verify_loop(
    candidate: &LoopCandidate,
    query: &KeyframeBundle,
    matched: &KeyframeBundle,
    cameras_in_body: &[Pose],
    params: &VerifyParams,
) -> Result<LoopCandidate, Rejection> {
    let pairs: Vec<(usize, usize)> = match_descriptors(&query.features, &matched.features, params.ratio)
        .into_iter()
        .filter(|&(i, j)| query.features[i].point.is_some() && matched.features[j].point.is_some())
        .collect();
    if pairs.len() < params.min_inliers.max(3) {
        return Err(Rejection::TooFewMatches(pairs.len()));
    }
    let qp: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| query.features[i].point.unwrap()).collect();
    let mp: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| matched.features[j].point.unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ ((query.id as u64) << 32 | matched.id as u64));
    let mut best: Option<(usize, Pose)> = None;
    for _ in 0..params.iterations {
        let idx = sample(&mut rng, pairs.len(), 3).into_vec();
        let src: Vec<_> = idx.iter().map(|&k| qp[k]).collect();
        let dst: Vec<_> = idx.iter().map(|&k| mp[k]).collect();
        let Some((t, _)) = umeyama_alignment(&src, &dst, false) else { continue };
        let count = (0..pairs.len())
            .filter(|&k| (t.transform_point(&qp[k]) - mp[k]).norm() < params.point_threshold)
            .count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, t));
        }
    }
    let (count, guess) = best.ok_or(Rejection::TooFewInliers(0))?;
    if count < params.min_inliers {
        return Err(Rejection::TooFewInliers(count));
    }
    let reproj_inliers = |t: &Pose| -> Vec<usize> {
        (0..pairs.len())
            .filter(|&k| {
                let f = &query.features[pairs[k].0];
                let pq = t.inverse_transform_point(&mp[k]);
                let pc = cameras_in_body[f.camera].inverse_transform_point(&pq);
                pc.norm() > 0.0 && pc.normalize().angle(&f.ray) < params.angle_threshold
            })
            .collect()
    };
    let mut pose = guess;
    let mut inliers = reproj_inliers(&pose);
    for _ in 0..3 {
        if inliers.len() < params.min_inliers {
            return Err(Rejection::TooFewInliers(inliers.len()));
        }
        let pts: Vec<_> = inliers.iter().map(|&k| mp[k]).collect();
        let rays: Vec<_> = inliers.iter().map(|&k| query.features[pairs[k].0].ray).collect();
        let exts: Vec<_> = inliers.iter().map(|&k| cameras_in_body[query.features[pairs[k].0].camera]).collect();
        pose = pnp_refine_rig(&pts, &rays, &exts, &pose).map_err(|_| Rejection::RefinementFailed)?;
        let next = reproj_inliers(&pose);
        if next == inliers {
            break;
        }
        inliers = next;
    }
    if inliers.len() < params.min_inliers {
        return Err(Rejection::TooFewInliers(inliers.len()));
    }
    Ok(LoopCandidate {
        relative: Some(pose),
        inliers: inliers.len(),
        ..candidate.clone()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeKind {
    Sequential,
    Loop,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseEdge {
    pub from: usize,
    pub to: usize,
    /// Measured `T_from^-1 T_to`.
    pub measurement: Pose,
    pub information: Matrix6<f64>,
    pub kind: EdgeKind,
}

/// Rotation standard deviation (radians) behind [`edge_information`].
pub const EDGE_SIGMA_ROTATION: f64 = 0.002;
/// Translation standard deviation (meters) behind [`edge_information`].
pub const EDGE_SIGMA_TRANSLATION: f64 = 0.01;

/// Default edge information; it also sets the meaning of the whitened Huber
/// threshold.
pub fn edge_information() -> Matrix6<f64> {
    let (r, t) = (EDGE_SIGMA_ROTATION.powi(-2), EDGE_SIGMA_TRANSLATION.powi(-2));
    Matrix6::from_diagonal(&Vector6::new(r, r, r, t, t, t))
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PoseGraph {
    pub vertices: Vec<Pose>,
    pub edges: Vec<PoseEdge>,
    /// Huber threshold (whitened units) applied to loop edges.
    pub huber: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PoseGraphReport {
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
}

fn edge_residual(e: &PoseEdge, a: &Pose, b: &Pose) -> Vector6<f64> {
    let err = e.measurement.inverse().compose(&a.inverse().compose(b));
    let mut r = Vector6::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&so3_log(&err.rotation));
    r.fixed_rows_mut::<3>(3).copy_from(&err.translation);
    r
}

impl PoseGraph {
    pub fn new(vertices: Vec<Pose>) -> Self {
        Self {
            vertices,
            edges: Vec::new(),
            huber: 1.0,
        }
    }

    pub fn add_edge(&mut self, from: usize, to: usize, measurement: Pose, information: Matrix6<f64>, kind: EdgeKind) {
        self.edges.push(PoseEdge {
            from,
            to,
            measurement,
            information,
            kind,
        });
    }

    /// Sequential chain edges measured from the current vertices.
    pub fn chain(vertices: Vec<Pose>) -> Self {
        let mut g = Self::new(vertices);
        for i in 1..g.vertices.len() {
            let m = g.vertices[i - 1].inverse().compose(&g.vertices[i]);
            g.add_edge(i - 1, i, m, edge_information(), EdgeKind::Sequential);
        }
        g
    }

    fn check(&self) -> Result<(), LoopError> {
        let n = self.vertices.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for (i, e) in self.edges.iter().enumerate() {
            if e.from >= n || e.to >= n {
                return Err(LoopError::BadEdge(i));
            }
            let (a, b) = (find(&mut parent, e.from), find(&mut parent, e.to));
            parent[a] = b;
        }
        for v in 1..n {
            if find(&mut parent, v) != find(&mut parent, 0) {
                return Err(LoopError::Disconnected(v));
            }
        }
        Ok(())
    }

    fn edge_cost(&self, e: &PoseEdge, r: &Vector6<f64>) -> (f64, f64) {
        let s = r.dot(&(e.information * r));
        if e.kind == EdgeKind::Loop && s > self.huber * self.huber {
            let rs = s.sqrt();
            (2.0 * self.huber * rs - self.huber * self.huber, self.huber / rs)
        } else {
            (s, 1.0)
        }
    }

    pub fn cost(&self) -> f64 {
        self.edges
            .iter()
            .map(|e| self.edge_cost(e, &edge_residual(e, &self.vertices[e.from], &self.vertices[e.to])).0)
            .sum()
    }

    /// Damped Gauss-Newton over all vertices but the first, until the step
    /// norm drops below `1e-8`.
    pub fn optimize(&mut self, max_iters: usize) -> Result<PoseGraphReport, LoopError> {
        self.check()?;
        let n = self.vertices.len();
        let mut report = PoseGraphReport::default();
        let mut cost = self.cost();
        report.cost_trace.push(cost);
        if n < 2 {
            return Ok(report);
        }
        let dim = 6 * (n - 1);
        let mut mu = 1e-6;
        let h = 1e-7;
        while report.iterations < max_iters {
            report.iterations += 1;
            let mut hm = DMatrix::<f64>::zeros(dim, dim);
            let mut g = DVector::<f64>::zeros(dim);
            for e in &self.edges {
                let (a, b) = (self.vertices[e.from], self.vertices[e.to]);
                let r = edge_residual(e, &a, &b);
                let (_, w) = self.edge_cost(e, &r);
                let mut ja = Matrix6::zeros();
                let mut jb = Matrix6::zeros();
                for k in 0..6 {
                    let mut d = Vector6::zeros();
                    d[k] = h;
                    let ret = |p: &Pose, s: f64| p.retract(&(d * s).fixed_rows::<3>(0).into(), &(d * s).fixed_rows::<3>(3).into());
                    ja.set_column(k, &((edge_residual(e, &ret(&a, 1.0), &b) - edge_residual(e, &ret(&a, -1.0), &b)) / (2.0 * h)));
                    jb.set_column(k, &((edge_residual(e, &a, &ret(&b, 1.0)) - edge_residual(e, &a, &ret(&b, -1.0))) / (2.0 * h)));
                }
                let blocks = [(e.from, ja), (e.to, jb)];
                for (vi, ji) in &blocks {
                    if *vi == 0 {
                        continue;
                    }
                    let oi = 6 * (vi - 1);
                    let mut gv = g.rows_mut(oi, 6);
                    gv += ji.transpose() * e.information * r * w;
                    for (vj, jj) in &blocks {
                        if *vj == 0 {
                            continue;
                        }
                        let oj = 6 * (vj - 1);
                        let mut hv = hm.view_mut((oi, oj), (6, 6));
                        hv += ji.transpose() * e.information * jj * w;
                    }
                }
            }
            let mut accepted = false;
            let mut step_norm = f64::INFINITY;
            for _ in 0..10 {
                let mut damped = hm.clone();
                for i in 0..dim {
                    damped[(i, i)] += mu * (1.0 + hm[(i, i)]);
                }
                let Some(step) = damped.cholesky().map(|c| c.solve(&-&g)) else {
                    mu *= 10.0;
                    continue;
                };
                step_norm = step.norm();
                let mut cand = self.clone();
                for v in 1..n {
                    let o = 6 * (v - 1);
                    cand.vertices[v] = cand.vertices[v].retract(&step.fixed_rows::<3>(o).into(), &step.fixed_rows::<3>(o + 3).into());
                }
                let new_cost = cand.cost();
                if new_cost <= cost {
                    self.vertices = cand.vertices;
                    cost = new_cost;
                    report.cost_trace.push(cost);
                    mu = (mu * 0.3).max(1e-12);
                    accepted = true;
                    break;
                }
                mu *= 10.0;
            }
            if !accepted || step_norm < 1e-8 {
                break;
            }
        }
        Ok(report)
    }
}

/// Keyframe database with its vocabulary and verified loops.
#[derive(Clone, Debug)]
pub struct LoopDatabase {
    pub vocab: Vocabulary,
    pub keyframes: Vec<KeyframeBundle>,
    pub min_gap: usize,
    pub floor: f64,
    pub verify: VerifyParams,
}

impl LoopDatabase {
    pub fn new(vocab: Vocabulary) -> Self {
        Self {
            vocab,
            keyframes: Vec::new(),
            min_gap: DEFAULT_MIN_GAP,
            floor: DEFAULT_SCORE_FLOOR,
            verify: VerifyParams::default(),
        }
    }

    /// Inserts a keyframe and returns the best verified loop it closes, if any.
    pub fn insert(&mut self, frame: usize, pose: Pose, features: Vec<KeyframeFeature>, cameras_in_body: &[Pose]) -> (usize, Option<LoopCandidate>) {
        let id = self.keyframes.len();
        let kf = KeyframeBundle::new(id, frame, pose, features, &self.vocab);
        let mut found = None;
        for cand in query_loop_candidates(&self.keyframes, &kf, self.min_gap, self.floor) {
            if let Ok(v) = verify_loop(&cand, &kf, &self.keyframes[cand.matched], cameras_in_body, &self.verify) {
                found = Some(v);
                break;
            }
        }
        self.keyframes.push(kf);
        (id, found)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;

    fn random_descriptors(n: usize, seed: u64) -> Vec<Descriptor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Descriptor::random(&mut rng)).collect()
    }

    #[test]
    fn two_word_vocabulary() {
        let v = Vocabulary::build(&[Descriptor::zeros(), Descriptor::ones()], 2, 1, 0);
        let mut words = v.words.clone();
        words.sort();
        assert_eq!(words, vec![Descriptor::zeros(), Descriptor::ones()]);
        assert!(v.weights.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn vocabulary_is_deterministic_and_covers_training() {
        let d = random_descriptors(2000, 1);
        let a = Vocabulary::build(&d, 10, 3, 5);
        let b = Vocabulary::build(&d, 10, 3, 5);
        assert_eq!(a, b);
        assert!(a.len() > 100 && a.len() <= 1000);
        let mut used = vec![false; a.len()];
        for x in &d {
            used[a.quantize(x)] = true;
        }
        assert!(used.iter().filter(|&&u| u).count() > a.len() / 2);
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let v = Vocabulary::build(&random_descriptors(500, 2), 5, 2, 1);
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], VOCAB_MAGIC);
        assert_eq!(buf.len(), 8 + 12 + 40 * v.len());
        assert_eq!(Vocabulary::read_from(&buf[..]).unwrap(), v);
        assert!(Vocabulary::read_from(&b"NOTAVOCAB000"[..]).is_err());
    }

    #[test]
    fn bow_properties() {
        let d = random_descriptors(600, 3);
        let v = Vocabulary::build(&d, 6, 2, 0);
        let one = bow_vector([&d[0]], &v);
        assert_eq!(one.0.len(), 1);
        assert!((one.l1_norm() - 1.0).abs() < 1e-12);

        let a = bow_vector(&d[0..50], &v);
        let b = bow_vector(&d[50..100], &v);
        let ab = bow_vector(&d[0..100], &v);
        let mut support: Vec<usize> = a.0.keys().chain(b.0.keys()).copied().collect();
        support.sort();
        support.dedup();
        assert_eq!(ab.0.keys().copied().collect::<Vec<_>>(), support);

        let ba = bow_vector(d[50..100].iter().chain(&d[0..50]), &v);
        assert_eq!(ab, ba);
        assert!((bow_score(&a, &a) - 1.0).abs() < 1e-12);
        assert!((bow_score(&a, &b) - bow_score(&b, &a)).abs() < 1e-12);
        assert!(bow_vector(std::iter::empty(), &v).is_empty());
    }

    fn bundle(id: usize, descs: &[Descriptor], vocab: &Vocabulary) -> KeyframeBundle {
        let features = descs
            .iter()
            .map(|d| KeyframeFeature {
                camera: 0,
                descriptor: *d,
                ray: Vector3::z(),
                point: None,
            })
            .collect();
        KeyframeBundle::new(id, id, Pose::identity(), features, vocab)
    }

    #[test]
    fn query_respects_gap_and_ranks_identical_first() {
        let d = random_descriptors(3000, 4);
        let v = Vocabulary::build(&d, 10, 2, 0);
        let db: Vec<_> = (0..60).map(|i| bundle(i, &d[i * 50..i * 50 + 50], &v)).collect();
        let q = bundle(60, &d[0..50], &v);
        let c = query_loop_candidates(&db, &q, 50, 0.0);
        assert_eq!(c[0].matched, 0);
        assert!((c[0].score - 1.0).abs() < 1e-12);
        assert!(c.iter().all(|x| x.matched + 50 <= 60));
        let young = bundle(30, &d[0..50], &v);
        assert!(query_loop_candidates(&db, &young, 50, 0.0).iter().all(|x| x.matched + 50 <= 30));
    }

    #[test]
    fn chain_without_loops_is_unchanged() {
        let verts: Vec<Pose> = (0..10)
            .map(|i| Pose::new(UnitQuaternion::from_euler_angles(0.0, 0.0, 0.1 * i as f64), Vector3::new(i as f64, 0.5 * i as f64, 0.0)))
            .collect();
        let mut g = PoseGraph::chain(verts.clone());
        g.optimize(20).unwrap();
        for (a, b) in g.vertices.iter().zip(&verts) {
            assert!((a.translation - b.translation).norm() < 1e-12);
        }
        assert_eq!(g.vertices[0], verts[0]);
    }

    #[test]
    fn disconnected_graph_is_an_error() {
        let mut g = PoseGraph::new(vec![Pose::identity(); 3]);
        g.add_edge(0, 1, Pose::identity(), Matrix6::identity(), EdgeKind::Sequential);
        assert!(matches!(g.optimize(5), Err(LoopError::Disconnected(2))));
    }
}
