//! Feature bookkeeping, the 3-priority quadtree selector, parallax and
//! spatial-distribution statistics.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector2;
use thiserror::Error;

use crate::dataset::Observation;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrontendError {
    #[error("frame {got} does not follow frame {last}")]
    NonConsecutiveFrame { last: usize, got: usize },
    #[error("camera {0} is not part of the table")]
    UnknownCamera(usize),
}

/// Default suppression radius around tracked features (pixels).
pub const DEFAULT_SUPPRESSION_RADIUS: f64 = 10.0;
/// Quadtree cells are never split below this side length (pixels).
pub const MIN_CELL_SIDE: f64 = 8.0;
/// Default grid size for [`compute_sfd`].
pub const DEFAULT_SFD_GRID: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn image(width: u32, height: u32) -> Self {
        Self::new(0.0, 0.0, width as f64, height as f64)
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= self.x0 && p.x < self.x1 && p.y >= self.y0 && p.y < self.y1
    }

    fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    fn height(&self) -> f64 {
        self.y1 - self.y0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureCandidate {
    pub pixel: Vector2<f64>,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackedFeature {
    pub id: u64,
    pub pixel: Vector2<f64>,
    pub age: usize,
}

/// Deterministic pseudo detector response in `[0, 1)` for a track.
///
/// Simulated and ingested tracks carry no detector score, so one is derived
/// from the track identity; identical inputs always score identically.
pub fn feature_score(camera: usize, track_id: u64) -> f64 {
    let h = crate::sim::derive_seed(track_id, 0xF00D + camera as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

struct QuadNode {
    rect: Rect,
    path: Vec<u8>,
    candidates: Vec<usize>,
    tracked: usize,
}

impl QuadNode {
    fn count(&self) -> usize {
        self.candidates.len() + self.tracked
    }

    fn splittable(&self) -> bool {
        self.count() > 1 && self.rect.width().min(self.rect.height()) >= 2.0 * MIN_CELL_SIDE
    }
}

/// Z-order comparison of leaf origins via their child-index paths.
fn z_order(a: &[u8], b: &[u8]) -> Ordering {
    let n = a.len().max(b.len());
    for i in 0..n {
        let (x, y) = (a.get(i).copied().unwrap_or(0), b.get(i).copied().unwrap_or(0));
        match x.cmp(&y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Higher count first, then z-order of origin.
fn priority(a: &QuadNode, b: &QuadNode) -> Ordering {
    b.count().cmp(&a.count()).then_with(|| z_order(&a.path, &b.path))
}

fn split(node: QuadNode, tracked: &[Vector2<f64>], candidates: &[FeatureCandidate]) -> Vec<QuadNode> {
    let r = node.rect;
    let (mx, my) = (0.5 * (r.x0 + r.x1), 0.5 * (r.y0 + r.y1));
    let quadrant = |p: &Vector2<f64>| -> usize { (p.y >= my) as usize * 2 + (p.x >= mx) as usize };
    let mut kids: Vec<QuadNode> = (0..4u8)
        .map(|q| {
            let (left, top) = (q % 2 == 0, q < 2);
            let mut path = node.path.clone();
            path.push(q);
            QuadNode {
                rect: Rect::new(
                    if left { r.x0 } else { mx },
                    if top { r.y0 } else { my },
                    if left { mx } else { r.x1 },
                    if top { my } else { r.y1 },
                ),
                path,
                candidates: Vec::new(),
                tracked: 0,
            }
        })
        .collect();
    for &c in &node.candidates {
        kids[quadrant(&candidates[c].pixel)].candidates.push(c);
    }
    for t in tracked.iter().filter(|t| r.contains(t)) {
        kids[quadrant(t)].tracked += 1;
    }
    kids.retain(|k| k.count() > 0);
    kids
}

/// Selects up to `target_count` new features with the 3-priority quadtree.
///
/// 1. The tree is refined by splitting the leaf holding the most features
///    until it has at least `target_count` occupied leaves or no leaf can be
///    split further.
/// 2. Candidates within `suppression_radius` of a tracked feature are dropped,
///    and leaves that already hold a tracked feature receive nothing new.
/// 3. Each remaining leaf contributes its highest-score candidate.
///
/// Returns candidate indices. Ties are broken by the lowest index.
pub fn select_features_3priority(
    tracked: &[TrackedFeature],
    candidates: &[FeatureCandidate],
    bounds: Rect,
    target_count: usize,
    suppression_radius: f64,
) -> Vec<usize> {
    if candidates.is_empty() || target_count == 0 {
        return Vec::new();
    }
    let tracked_px: Vec<Vector2<f64>> = tracked
        .iter()
        .map(|t| t.pixel)
        .filter(|p| bounds.contains(p))
        .collect();
    let rho_sq = suppression_radius * suppression_radius;
    let survivors: Vec<usize> = (0..candidates.len())
        .filter(|&i| {
            let p = &candidates[i].pixel;
            bounds.contains(p) && tracked_px.iter().all(|t| (t - p).norm_squared() >= rho_sq)
        })
        .collect();
    if survivors.is_empty() {
        return Vec::new();
    }
    let mut leaves = vec![QuadNode {
        rect: bounds,
        path: Vec::new(),
        candidates: survivors,
        tracked: tracked_px.len(),
    }];
    while leaves.len() < target_count {
        let Some(idx) = (0..leaves.len())
            .filter(|&i| leaves[i].splittable())
            .min_by(|&a, &b| priority(&leaves[a], &leaves[b]))
        else {
            break;
        };
        let node = leaves.swap_remove(idx);
        leaves.extend(split(node, &tracked_px, candidates));
    }
    leaves.sort_by(priority);
    let occupied = leaves.iter().filter(|l| l.tracked > 0).count();
    let budget = target_count.saturating_sub(occupied);
    leaves
        .iter()
        .filter(|l| l.tracked == 0 && !l.candidates.is_empty())
        .map(|l| {
            *l.candidates
                .iter()
                .min_by(|&&a, &&b| {
                    candidates[b]
                        .score
                        .partial_cmp(&candidates[a].score)
                        .unwrap_or(Ordering::Equal)
                        .then(a.cmp(&b))
                })
                .expect("non-empty leaf")
        })
        .take(budget)
        .collect()
}

/// Baseline selector: the `target_count` highest-score candidates.
pub fn select_features_by_score(candidates: &[FeatureCandidate], target_count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..candidates.len()).collect();
    idx.sort_by(|&a, &b| {
        candidates[b]
            .score
            .partial_cmp(&candidates[a].score)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(target_count);
    idx
}

/// Spatial feature distribution: variance of per-cell counts on a `grid x grid` partition.
pub fn compute_sfd(features: &[Vector2<f64>], bounds: Rect, grid: usize) -> f64 {
    assert!(grid >= 1);
    let mut counts = vec![0usize; grid * grid];
    let (cw, ch) = (bounds.width() / grid as f64, bounds.height() / grid as f64);
    for p in features.iter().filter(|p| bounds.contains(p)) {
        let gx = (((p.x - bounds.x0) / cw) as usize).min(grid - 1);
        let gy = (((p.y - bounds.y0) / ch) as usize).min(grid - 1);
        counts[gy * grid + gx] += 1;
    }
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<usize>() as f64 / n;
    counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n
}

/// Observations of one feature track in frame order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Track {
    pub points: Vec<(usize, Vector2<f64>)>,
}

impl Track {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn first_frame(&self) -> Option<usize> {
        self.points.first().map(|p| p.0)
    }

    pub fn last_frame(&self) -> Option<usize> {
        self.points.last().map(|p| p.0)
    }

    pub fn at(&self, frame: usize) -> Option<Vector2<f64>> {
        self.points
            .binary_search_by(|p| p.0.cmp(&frame))
            .ok()
            .map(|i| self.points[i].1)
    }

    /// Lifespan restricted to frames in `[start, end]`.
    pub fn lifespan_within(&self, start: usize, end: usize) -> usize {
        self.points.iter().filter(|p| p.0 >= start && p.0 <= end).count()
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct UpdateReport {
    /// Mean displacement from the previous frame, per camera (pixels).
    pub mean_parallax: Vec<f64>,
    pub diagnostics: Vec<String>,
}

/// Per-camera feature tracks, keyed by track id.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct FeatureTrackTable {
    cameras: Vec<BTreeMap<u64, Track>>,
    last_frame: Option<usize>,
}

impl FeatureTrackTable {
    pub fn new(num_cameras: usize) -> Self {
        Self {
            cameras: vec![BTreeMap::new(); num_cameras],
            last_frame: None,
        }
    }

    /// Builds a table from observations sorted by frame. Non-monotonic or
    /// duplicate rows are skipped.
    pub fn from_observations(num_cameras: usize, observations: &[Observation]) -> Self {
        let mut table = Self::new(num_cameras);
        for o in observations {
            let Some(cam) = table.cameras.get_mut(o.camera) else {
                continue;
            };
            let track = cam.entry(o.track_id).or_default();
            if track.last_frame().is_none_or(|l| l < o.frame) {
                track.points.push((o.frame, o.pixel));
            }
            table.last_frame = Some(table.last_frame.map_or(o.frame, |l| l.max(o.frame)));
        }
        table
    }

    pub fn num_cameras(&self) -> usize {
        self.cameras.len()
    }

    pub fn last_frame(&self) -> Option<usize> {
        self.last_frame
    }

    pub fn tracks(&self, camera: usize) -> &BTreeMap<u64, Track> {
        &self.cameras[camera]
    }

    /// Appends frame `frame_index` given `(track id, pixel)` lists per camera.
    ///
    /// A track id repeated within one camera and frame is rejected after its
    /// first occurrence and reported in the diagnostics.
    pub fn update(
        &mut self,
        frame_index: usize,
        per_camera: &[Vec<(u64, Vector2<f64>)>],
    ) -> Result<UpdateReport, FrontendError> {
        if let Some(last) = self.last_frame {
            if frame_index != last + 1 {
                return Err(FrontendError::NonConsecutiveFrame {
                    last,
                    got: frame_index,
                });
            }
        }
        if per_camera.len() > self.cameras.len() {
            return Err(FrontendError::UnknownCamera(per_camera.len() - 1));
        }
        let mut report = UpdateReport {
            mean_parallax: vec![0.0; self.cameras.len()],
            diagnostics: Vec::new(),
        };
        for (c, obs) in per_camera.iter().enumerate() {
            let mut seen = BTreeSet::new();
            let (mut sum, mut n) = (0.0, 0usize);
            for &(id, px) in obs {
                if !seen.insert(id) {
                    report
                        .diagnostics
                        .push(format!("camera {c} frame {frame_index}: duplicate track id {id} rejected"));
                    continue;
                }
                let track = self.cameras[c].entry(id).or_default();
                if let Some(&(f, prev)) = track.points.last() {
                    if f + 1 == frame_index {
                        sum += (px - prev).norm();
                        n += 1;
                    }
                }
                track.points.push((frame_index, px));
            }
            report.mean_parallax[c] = if n > 0 { sum / n as f64 } else { 0.0 };
        }
        self.last_frame = Some(frame_index);
        Ok(report)
    }

    /// Mean pixel displacement between frames `start` and `end` over tracks
    /// observed in both.
    pub fn window_parallax(&self, camera: usize, start: usize, end: usize) -> f64 {
        let (mut sum, mut n) = (0.0, 0usize);
        for t in self.cameras[camera].values() {
            if let (Some(a), Some(b)) = (t.at(start), t.at(end)) {
                sum += (b - a).norm();
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Drops observations older than `frame` and tracks left empty.
    pub fn prune_before(&mut self, frame: usize) {
        for cam in &mut self.cameras {
            cam.retain(|_, t| {
                t.points.retain(|p| p.0 >= frame);
                !t.points.is_empty()
            });
        }
    }
}

/// Mean track lifespan within `[start, end]` over tracks alive in that span.
pub fn track_stability(table: &FeatureTrackTable, camera: usize, start: usize, end: usize) -> f64 {
    let spans: Vec<usize> = table
        .tracks(camera)
        .values()
        .map(|t| t.lifespan_within(start, end))
        .filter(|&l| l > 0)
        .collect();
    if spans.is_empty() {
        0.0
    } else {
        spans.iter().sum::<usize>() as f64 / spans.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cand(x: f64, y: f64, score: f64) -> FeatureCandidate {
        FeatureCandidate {
            pixel: Vector2::new(x, y),
            score,
        }
    }

    fn tracked(x: f64, y: f64) -> TrackedFeature {
        TrackedFeature {
            id: 0,
            pixel: Vector2::new(x, y),
            age: 3,
        }
    }

    const BOUNDS: Rect = Rect { x0: 0.0, y0: 0.0, x1: 640.0, y1: 480.0 };

    #[test]
    fn four_quadrants_all_selected() {
        let c = [cand(100.0, 100.0, 1.0), cand(500.0, 100.0, 1.0), cand(100.0, 400.0, 1.0), cand(500.0, 400.0, 1.0)];
        let mut sel = select_features_3priority(&[], &c, BOUNDS, 4, 10.0);
        sel.sort();
        assert_eq!(sel, vec![0, 1, 2, 3]);
    }

    #[test]
    fn candidate_near_tracked_is_suppressed() {
        let c = [cand(105.0, 100.0, 9.0), cand(500.0, 400.0, 1.0)];
        let sel = select_features_3priority(&[tracked(100.0, 100.0)], &c, BOUNDS, 4, 10.0);
        assert_eq!(sel, vec![1]);
    }

    #[test]
    fn clustered_quadrant_hand_trace() {
        // Ten candidates packed in the top-left quadrant with scores 1..10,
        // one candidate in each other quadrant. The root splits once (13
        // features, 4 occupied leaves >= K = 4), then every leaf yields its best.
        let mut c: Vec<FeatureCandidate> = (0..10)
            .map(|i| cand(40.0 + 20.0 * i as f64, 60.0 + 10.0 * i as f64, (i + 1) as f64))
            .collect();
        c.push(cand(500.0, 100.0, 0.5));
        c.push(cand(100.0, 400.0, 0.5));
        c.push(cand(500.0, 400.0, 0.5));
        let mut sel = select_features_3priority(&[], &c, BOUNDS, 4, 10.0);
        sel.sort();
        assert_eq!(sel, vec![9, 10, 11, 12]);
    }

    #[test]
    fn empty_candidates_yield_empty_selection() {
        assert!(select_features_3priority(&[], &[], BOUNDS, 10, 10.0).is_empty());
    }

    #[test]
    fn leaves_with_tracked_features_get_nothing() {
        // 11 px apart: outside the radius but inside one minimum-size cell.
        let c = [cand(111.0, 100.0, 1.0), cand(500.0, 400.0, 1.0)];
        let sel = select_features_3priority(&[tracked(100.0, 100.0)], &c, BOUNDS, 4, 10.0);
        assert_eq!(sel, vec![1]);
    }

    #[test]
    fn score_baseline_takes_top_k() {
        let c = [cand(1.0, 1.0, 0.3), cand(2.0, 2.0, 0.9), cand(3.0, 3.0, 0.9), cand(4.0, 4.0, 0.1)];
        assert_eq!(select_features_by_score(&c, 2), vec![1, 2]);
    }

    #[test]
    fn sfd_examples() {
        let b = Rect::new(0.0, 0.0, 8.0, 8.0);
        let one_per_cell: Vec<_> = (0..64).map(|i| Vector2::new((i % 8) as f64 + 0.5, (i / 8) as f64 + 0.5)).collect();
        assert_eq!(compute_sfd(&one_per_cell, b, 8), 0.0);
        let clumped = vec![Vector2::new(1.0, 1.0); 4];
        assert_eq!(compute_sfd(&clumped, b, 2), 3.0);
    }

    #[test]
    fn parallax_per_frame() {
        let mut t = FeatureTrackTable::new(1);
        let mut last = 0.0;
        for f in 0..10 {
            let obs: Vec<_> = (0..5u64).map(|i| (i, Vector2::new(10.0 * i as f64 + 3.0 * f as f64, 4.0 * f as f64))).collect();
            last = t.update(f, &[obs]).unwrap().mean_parallax[0];
        }
        assert!((last - 5.0).abs() < 1e-12);
        assert!((t.window_parallax(0, 0, 9) - 45.0).abs() < 1e-12);

        let mut s = FeatureTrackTable::new(1);
        for f in 0..3 {
            let r = s.update(f, &[vec![(1, Vector2::new(5.0, 5.0))]]).unwrap();
            assert_eq!(r.mean_parallax[0], 0.0);
        }
    }

    #[test]
    fn duplicate_ids_and_gaps_are_rejected() {
        let mut t = FeatureTrackTable::new(1);
        let r = t.update(0, &[vec![(1, Vector2::new(1.0, 1.0)), (1, Vector2::new(2.0, 2.0))]]).unwrap();
        assert_eq!(r.diagnostics.len(), 1);
        assert_eq!(t.tracks(0)[&1].len(), 1);
        assert!(matches!(t.update(5, &[vec![]]), Err(FrontendError::NonConsecutiveFrame { .. })));
    }

    #[test]
    fn stability_ranks_long_tracks_higher() {
        let mut t = FeatureTrackTable::new(2);
        for f in 0..10 {
            let a = vec![(1, Vector2::new(1.0, 1.0)), (2, Vector2::new(5.0, 1.0))];
            let b: Vec<_> = (0..2).map(|k| ((f / 2) * 10 + k, Vector2::new(1.0, 1.0))).collect();
            t.update(f as usize, &[a, b]).unwrap();
        }
        assert_eq!(track_stability(&t, 0, 0, 9), 10.0);
        assert_eq!(track_stability(&t, 1, 0, 9), 2.0);
    }

    fn arb_candidates() -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
        prop::collection::vec((0.0f64..640.0, 0.0f64..480.0, 0.0f64..1.0), 0..200)
    }

    proptest! {
        #[test]
        fn selector_respects_radius_and_budget(
            cands in arb_candidates(),
            tr in prop::collection::vec((0.0f64..640.0, 0.0f64..480.0), 0..30),
            k in 1usize..80,
        ) {
            let c: Vec<_> = cands.iter().map(|&(x, y, s)| cand(x, y, s)).collect();
            let t: Vec<_> = tr.iter().map(|&(x, y)| tracked(x, y)).collect();
            let sel = select_features_3priority(&t, &c, BOUNDS, k, 10.0);
            prop_assert!(sel.len() <= k);
            for &i in &sel {
                for f in &t {
                    prop_assert!((c[i].pixel - f.pixel).norm() >= 10.0);
                }
            }
            prop_assert_eq!(sel.clone(), select_features_3priority(&t, &c, BOUNDS, k, 10.0));
        }

        #[test]
        fn well_separated_candidates_fill_budget(k in 1usize..40, n in 1usize..40) {
            // One candidate per 64-pixel grid cell is always separable.
            let c: Vec<_> = (0..n).map(|i| cand(32.0 + 64.0 * (i % 10) as f64, 32.0 + 64.0 * (i / 10) as f64, 0.5)).collect();
            let sel = select_features_3priority(&[], &c, BOUNDS, k, 10.0);
            prop_assert_eq!(sel.len(), k.min(n));
        }
    }
}
