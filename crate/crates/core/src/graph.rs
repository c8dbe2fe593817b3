//! Spatiotemporal skeleton graph and spatial-configuration partitioning.
//!
//! Each joint's 1-hop neighbourhood is split into three subsets by comparing
//! the neighbour's mean distance from the body's gravity centre with the
//! root's: equal (root), closer (centripetal), farther (centrifugal). Each
//! subset becomes one adjacency matrix whose rows are normalized by the
//! subset cardinality.

use std::collections::{BTreeMap, BTreeSet};

use crate::autodiff::Tensor;
use crate::cycles::GaitCycle;
use crate::error::{Error, Result};
use crate::skeleton::{Keypoint, SkeletonLayout};

/// Number of spatial subsets under spatial-configuration partitioning.
pub const SUBSETS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionConfig {
    pub spatial_distance: usize,
    /// Temporal window length (odd).
    pub temporal_range: usize,
    pub radius_tolerance: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            spatial_distance: 1,
            temporal_range: 9,
            radius_tolerance: 1e-9,
        }
    }
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spatial_distance < 1 {
            return Err(Error::Parameter("spatial distance must be >= 1".into()));
        }
        if self.temporal_range.is_multiple_of(2) {
            return Err(Error::Parameter(format!(
                "temporal range must be odd, got {}",
                self.temporal_range
            )));
        }
        Ok(())
    }

    fn half_window(&self) -> usize {
        self.temporal_range / 2
    }
}

/// Joints within `max_hops` of `joint`, including the joint itself.
pub fn spatial_neighbors(layout: &SkeletonLayout, joint: usize, max_hops: usize) -> Result<BTreeSet<usize>> {
    let n = layout.joint_count();
    if joint >= n {
        return Err(Error::JointIndex { index: joint, len: n });
    }
    let hops = &layout.hop_distances()[joint];
    Ok((0..n).filter(|&j| hops[j] <= max_hops).collect())
}

/// The spatiotemporal neighbour set of node `(frame, joint)`: spatial
/// neighbours in the same frame plus the same joint within the temporal
/// half-window, clipped to `[0, frames)`. Pairs are `(frame, joint)`.
pub fn st_neighbors(
    layout: &SkeletonLayout,
    joint: usize,
    frame: usize,
    config: &PartitionConfig,
    frames: usize,
) -> Result<BTreeSet<(usize, usize)>> {
    let mut set: BTreeSet<(usize, usize)> = spatial_neighbors(layout, joint, config.spatial_distance)?
        .into_iter()
        .map(|j| (frame, j))
        .collect();
    let half = config.half_window();
    let lo = frame.saturating_sub(half);
    let hi = (frame + half).min(frames.saturating_sub(1));
    set.extend((lo..=hi).map(|q| (q, joint)));
    Ok(set)
}

/// Per-joint mean distance from the per-frame gravity centre.
#[derive(Debug, Clone, PartialEq)]
pub struct GravityRadii {
    pub r: Vec<f64>,
}

impl GravityRadii {
    pub fn from_frames<'a, I>(frames: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [Keypoint]>,
    {
        let mut sums: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for kps in frames {
            if count == 0 {
                sums = vec![0.0; kps.len()];
            } else if kps.len() != sums.len() {
                return Err(Error::Shape(format!(
                    "frame with {} joints among frames with {}",
                    kps.len(),
                    sums.len()
                )));
            }
            let n = kps.len() as f64;
            let cx = kps.iter().map(|k| k.x).sum::<f64>() / n;
            let cy = kps.iter().map(|k| k.y).sum::<f64>() / n;
            for (s, k) in sums.iter_mut().zip(kps) {
                *s += (k.x - cx).hypot(k.y - cy);
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::Empty("gravity radii need at least one frame".into()));
        }
        Ok(Self {
            r: sums.into_iter().map(|s| s / count as f64).collect(),
        })
    }
}

/// Radii averaged over every frame of the training cycles.
pub fn gravity_radii(train_cycles: &[GaitCycle]) -> Result<GravityRadii> {
    if train_cycles.is_empty() {
        return Err(Error::Empty("gravity radii need at least one training cycle".into()));
    }
    GravityRadii::from_frames(
        train_cycles
            .iter()
            .flat_map(|c| c.frames.iter().map(|f| f.as_slice())),
    )
}

/// Subset of neighbour `j` relative to root `i`: 0 same radius, 1 closer to
/// the gravity centre, 2 farther.
pub fn spatial_partition_label(i: usize, j: usize, radii: &GravityRadii, tol: f64) -> u8 {
    let (ri, rj) = (radii.r[i], radii.r[j]);
    if (rj - ri).abs() <= tol {
        0
    } else if rj < ri {
        1
    } else {
        2
    }
}

/// Label of neighbour `(q, j)` of node `(t, i)` over the whole
/// spatiotemporal window: `spatial + (q - t + half) * SUBSETS`.
pub fn st_label(
    i: usize,
    t: usize,
    j: usize,
    q: usize,
    radii: &GravityRadii,
    config: &PartitionConfig,
) -> usize {
    let spatial = spatial_partition_label(i, j, radii, config.radius_tolerance) as usize;
    let offset = q as isize - t as isize + config.half_window() as isize;
    debug_assert!(offset >= 0, "q outside the temporal window of t");
    spatial + offset as usize * SUBSETS
}

/// Three row-normalized adjacency matrices, one per spatial subset.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedGraph {
    /// `[SUBSETS, J, J]`; `adjacency[k][i][j]` weights neighbour `j` of root `i`.
    pub adjacency: Tensor,
    /// Subset of every connected `(root, neighbour)` pair.
    pub labels: BTreeMap<(usize, usize), u8>,
    pub radii: GravityRadii,
}

impl PartitionedGraph {
    pub fn joint_count(&self) -> usize {
        self.adjacency.shape()[1]
    }

    pub fn entry(&self, k: usize, i: usize, j: usize) -> f64 {
        let n = self.joint_count();
        self.adjacency.data()[(k * n + i) * n + j]
    }
}

pub fn build_partitioned_adjacency(
    layout: &SkeletonLayout,
    radii: &GravityRadii,
    tol: f64,
) -> Result<PartitionedGraph> {
    let n = layout.joint_count();
    if radii.r.len() != n {
        return Err(Error::Shape(format!(
            "{} radii for a {n}-joint layout",
            radii.r.len()
        )));
    }
    if radii.r.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::Validation("radii must be finite and non-negative".into()));
    }
    let hops = layout.hop_distances();
    let mut labels = BTreeMap::new();
    let mut data = vec![0.0; SUBSETS * n * n];
    for i in 0..n {
        let mut subsets: [Vec<usize>; SUBSETS] = Default::default();
        for j in (0..n).filter(|&j| hops[i][j] <= 1) {
            let k = if i == j { 0 } else { spatial_partition_label(i, j, radii, tol) };
            labels.insert((i, j), k);
            subsets[k as usize].push(j);
        }
        for (k, members) in subsets.iter().enumerate() {
            let z = members.len() as f64;
            for &j in members {
                data[(k * n + i) * n + j] = 1.0 / z;
            }
        }
    }
    Ok(PartitionedGraph {
        adjacency: Tensor::new(vec![SUBSETS, n, n], data)?,
        labels,
        radii: radii.clone(),
    })
}

/// Convenience: layout plus training cycles to graph.
pub fn graph_from_cycles(
    layout: &SkeletonLayout,
    train_cycles: &[GaitCycle],
    config: &PartitionConfig,
) -> Result<PartitionedGraph> {
    config.validate()?;
    let radii = gravity_radii(train_cycles)?;
    build_partitioned_adjacency(layout, &radii, config.radius_tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line3() -> SkeletonLayout {
        SkeletonLayout::tree(vec!["a".into(), "b".into(), "c".into()], vec![(0, 1), (1, 2)]).unwrap()
    }

    fn bfs_oracle(layout: &SkeletonLayout, src: usize, max: usize) -> BTreeSet<usize> {
        let mut seen = BTreeSet::from([src]);
        let mut frontier = vec![src];
        for _ in 0..max {
            let mut next = Vec::new();
            for &u in &frontier {
                for &(a, b) in layout.edges() {
                    for (x, y) in [(a, b), (b, a)] {
                        if x == u && seen.insert(y) {
                            next.push(y);
                        }
                    }
                }
            }
            frontier = next;
        }
        seen
    }

    #[test]
    fn spatial_neighbor_cases() {
        let layout = SkeletonLayout::openpose18();
        assert_eq!(spatial_neighbors(&layout, 4, 0).unwrap(), BTreeSet::from([4]));
        assert_eq!(spatial_neighbors(&layout, 1, 1).unwrap(), bfs_oracle(&layout, 1, 1));
        assert_eq!(spatial_neighbors(&layout, 1, 1).unwrap(), BTreeSet::from([0, 1, 2, 5]));
        assert_eq!(spatial_neighbors(&layout, 7, 17).unwrap().len(), 18);
        assert!(matches!(
            spatial_neighbors(&layout, 18, 1),
            Err(Error::JointIndex { index: 18, len: 18 })
        ));
    }

    #[test]
    fn st_neighbor_cases() {
        let layout = SkeletonLayout::openpose18();
        let narrow = PartitionConfig { temporal_range: 1, ..Default::default() };
        let set = st_neighbors(&layout, 1, 3, &narrow, 10).unwrap();
        let expected: BTreeSet<_> = [0, 1, 2, 5].into_iter().map(|j| (3, j)).collect();
        assert_eq!(set, expected);

        let wide = PartitionConfig::default();
        let set = st_neighbors(&layout, 4, 0, &wide, 64).unwrap();
        let temporal: BTreeSet<_> = set.iter().filter(|(_, j)| *j == 4).map(|(q, _)| *q).collect();
        assert_eq!(temporal, (0..=4).collect());
    }

    #[test]
    fn st_neighbors_match_predicate_scan() {
        let layout = SkeletonLayout::openpose18();
        let hops = layout.hop_distances();
        let config = PartitionConfig { temporal_range: 3, ..Default::default() };
        let frames = 6;
        for t in 0..frames as usize {
            for i in 0..18 {
                let brute: BTreeSet<_> = (0..frames)
                    .flat_map(|q| (0..18).map(move |j| (q, j)))
                    .filter(|&(q, j)| (q == t && hops[j][i] <= 1) || (j == i && q.abs_diff(t) <= 1))
                    .collect();
                assert_eq!(st_neighbors(&layout, i, t, &config, frames).unwrap(), brute);
            }
        }
    }

    fn kp(x: f64, y: f64) -> Keypoint {
        Keypoint::new(x, y, 1.0)
    }

    #[test]
    fn radii_cases() {
        let frame = [kp(0.0, 0.0), kp(2.0, 0.0)];
        let r = GravityRadii::from_frames([&frame[..]]).unwrap();
        assert_eq!(r.r, vec![1.0, 1.0]);
        let same = [kp(3.0, 3.0); 4];
        let r = GravityRadii::from_frames([&same[..], &same[..]]).unwrap();
        assert_eq!(r.r, vec![0.0; 4]);
        assert!(gravity_radii(&[]).is_err());
    }

    #[test]
    fn collinear_partition_labels() {
        let frame = [kp(0.0, 0.0), kp(1.0, 0.0), kp(2.0, 0.0)];
        let radii = GravityRadii::from_frames([&frame[..]]).unwrap();
        assert_eq!(radii.r, vec![1.0, 0.0, 1.0]);
        assert_eq!(spatial_partition_label(1, 1, &radii, 1e-9), 0);
        assert_eq!(spatial_partition_label(1, 0, &radii, 1e-9), 2);
        assert_eq!(spatial_partition_label(0, 1, &radii, 1e-9), 1);
        assert_eq!(spatial_partition_label(0, 2, &radii, 1e-9), 0);
    }

    #[test]
    fn st_label_cases() {
        let frame = [kp(0.0, 0.0), kp(1.0, 0.0), kp(2.0, 0.0)];
        let radii = GravityRadii::from_frames([&frame[..]]).unwrap();
        let c = PartitionConfig::default();
        assert_eq!(st_label(1, 10, 1, 10, &radii, &c), 4 * 3);
        // neighbour 0 of root 1 is farther: spatial label 2
        assert_eq!(st_label(1, 10, 0, 6, &radii, &c), 2);
        // neighbour 1 of root 0 is closer: spatial label 1
        assert_eq!(st_label(0, 10, 1, 14, &radii, &c), 25);
    }

    #[test]
    fn single_joint_graph() {
        let layout = SkeletonLayout::tree(vec!["only".into()], vec![]).unwrap();
        let g = build_partitioned_adjacency(&layout, &GravityRadii { r: vec![0.0] }, 1e-9).unwrap();
        assert_eq!(g.adjacency.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn line_graph_matches_hand_tables() {
        // r = [1, 0, 1]: root 0 sees {0} same and {1} closer; root 1 sees
        // {1} same and {0, 2} farther; root 2 mirrors root 0.
        let layout = line3();
        let g = build_partitioned_adjacency(&layout, &GravityRadii { r: vec![1.0, 0.0, 1.0] }, 1e-9).unwrap();
        let a0 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let a1 = [[0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let a2 = [[0.0, 0.0, 0.0], [0.5, 0.0, 0.5], [0.0, 0.0, 0.0]];
        for (k, table) in [a0, a1, a2].iter().enumerate() {
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(g.entry(k, i, j), table[i][j], "A{k}[{i}][{j}]");
                }
            }
        }
        assert_eq!(g.labels[&(1, 0)], 2);
        assert_eq!(g.labels[&(0, 1)], 1);
        assert!(!g.labels.contains_key(&(0, 2)));
    }

    proptest! {
        #[test]
        fn openpose_graph_support_and_row_sums(r in proptest::collection::vec(0.0f64..2.0, 18)) {
            let layout = SkeletonLayout::openpose18();
            let g = build_partitioned_adjacency(&layout, &GravityRadii { r }, 1e-9).unwrap();
            for i in 0..18 {
                let support = bfs_oracle(&layout, i, 1);
                for j in 0..18 {
                    let total: f64 = (0..3).map(|k| g.entry(k, i, j)).sum();
                    prop_assert_eq!(total > 0.0, support.contains(&j));
                    // exactly one subset per neighbour
                    let hits = (0..3).filter(|&k| g.entry(k, i, j) > 0.0).count();
                    prop_assert_eq!(hits, usize::from(support.contains(&j)));
                }
                for k in 0..3 {
                    let s: f64 = (0..18).map(|j| g.entry(k, i, j)).sum();
                    prop_assert!(s == 0.0 || (s - 1.0).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn radii_translation_and_scale(
            pts in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 18),
            dx in -5.0f64..5.0, dy in -5.0f64..5.0, s in 0.1f64..4.0,
        ) {
            let base: Vec<Keypoint> = pts.iter().map(|&(x, y)| kp(x, y)).collect();
            let moved: Vec<Keypoint> = pts.iter().map(|&(x, y)| kp(x + dx, y + dy)).collect();
            let scaled: Vec<Keypoint> = pts.iter().map(|&(x, y)| kp(s * x, s * y)).collect();
            let r0 = GravityRadii::from_frames([&base[..]]).unwrap();
            let r1 = GravityRadii::from_frames([&moved[..]]).unwrap();
            let r2 = GravityRadii::from_frames([&scaled[..]]).unwrap();
            for i in 0..18 {
                prop_assert!((r0.r[i] - r1.r[i]).abs() < 1e-12 * 10.0);
                prop_assert!((s * r0.r[i] - r2.r[i]).abs() < 1e-12 * 10.0);
            }
        }

        #[test]
        fn st_label_is_injective_per_node(
            r in proptest::collection::vec(0.0f64..2.0, 18),
            i in 0usize..18, t in 0usize..64,
        ) {
            let layout = SkeletonLayout::openpose18();
            let radii = GravityRadii { r };
            let c = PartitionConfig::default();
            let set = st_neighbors(&layout, i, t, &c, 64).unwrap();
            let mut seen = BTreeMap::new();
            for (q, j) in set {
                let l = st_label(i, t, j, q, &radii, &c);
                prop_assert!(l < 3 * c.temporal_range);
                let key = (spatial_partition_label(i, j, &radii, c.radius_tolerance), q);
                if let Some(prev) = seen.insert(l, key) {
                    prop_assert_eq!(prev, key);
                }
            }
        }
    }
}
