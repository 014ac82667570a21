//! Neighborhood construction: radius (ball) queries for the conv receptive
//! fields and k-NN queries for the grouping branch.
//!
//! A uniform grid with cubic cells accelerates both query kinds and stays
//! exact: queries scan the cells overlapping the search region and check
//! true distances. Candidate ordering is pinned to (squared distance, index)
//! so capped and k-limited results are deterministic.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Uniform-grid acceleration structure over a borrowed position array.
#[derive(Debug)]
pub struct SpatialIndex<'a> {
    positions: &'a [[f32; 3]],
    cell_size: f32,
    origin: [f32; 3],
    grid: BTreeMap<[i32; 3], Vec<u32>>,
    cell_max: [i32; 3],
}

impl<'a> SpatialIndex<'a> {
    pub fn build(positions: &'a [[f32; 3]], cell_size: f32) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidArgument("cannot index an empty cloud".into()));
        }
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "cell_size must be a positive finite length, got {cell_size}"
            )));
        }
        let mut origin = [f32::INFINITY; 3];
        for (i, p) in positions.iter().enumerate() {
            for k in 0..3 {
                if !p[k].is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "non-finite coordinate in point {i}"
                    )));
                }
                origin[k] = origin[k].min(p[k]);
            }
        }
        let mut grid: BTreeMap<[i32; 3], Vec<u32>> = BTreeMap::new();
        let mut cell_max = [0i32; 3];
        for (i, p) in positions.iter().enumerate() {
            let cell = cell_of(p, &origin, cell_size);
            for k in 0..3 {
                cell_max[k] = cell_max[k].max(cell[k]);
            }
            grid.entry(cell).or_default().push(i as u32);
        }
        Ok(SpatialIndex {
            positions,
            cell_size,
            origin,
            grid,
            cell_max,
        })
    }

    pub fn cell_size(&self) -> f32 {
        self.cell_size
    }

    pub fn n_points(&self) -> usize {
        self.positions.len()
    }

    pub fn occupied_cells(&self) -> impl Iterator<Item = (&[i32; 3], &Vec<u32>)> {
        self.grid.iter()
    }

    fn check_center(&self, center_idx: usize) -> Result<()> {
        if center_idx >= self.positions.len() {
            return Err(Error::InvalidArgument(format!(
                "center index {center_idx} out of range for {} points",
                self.positions.len()
            )));
        }
        Ok(())
    }

    /// All points within `r` of the center (boundary included, center and
    /// coincident points excluded). With `cap`, keeps the nearest `cap`
    /// (ties by lower index). Results are sorted by (distance, index).
    pub fn ball_query(&self, center_idx: usize, r: f32, cap: Option<usize>) -> Result<Neighbors> {
        self.check_center(center_idx)?;
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "radius must be a positive finite length, got {r}"
            )));
        }
        let center = self.positions[center_idx];
        let r_sq = r * r;
        let mut candidates: Vec<(f32, u32)> = Vec::new();
        let lo = cell_of(
            &[center[0] - r, center[1] - r, center[2] - r],
            &self.origin,
            self.cell_size,
        );
        let hi = cell_of(
            &[center[0] + r, center[1] + r, center[2] + r],
            &self.origin,
            self.cell_size,
        );
        for cx in lo[0].max(0)..=hi[0].min(self.cell_max[0]) {
            for cy in lo[1].max(0)..=hi[1].min(self.cell_max[1]) {
                for cz in lo[2].max(0)..=hi[2].min(self.cell_max[2]) {
                    let Some(cell) = self.grid.get(&[cx, cy, cz]) else {
                        continue;
                    };
                    for &j in cell {
                        if j as usize == center_idx {
                            continue;
                        }
                        let d_sq = dist_sq(&center, &self.positions[j as usize]);
                        // d == 0 means a coincident duplicate: the edge
                        // direction is undefined, so it is skipped.
                        if d_sq > 0.0 && d_sq <= r_sq {
                            candidates.push((d_sq, j));
                        }
                    }
                }
            }
        }
        candidates.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        if let Some(cap) = cap {
            candidates.truncate(cap);
        }
        Ok(Neighbors::from_candidates(&center, self.positions, candidates))
    }

    /// The `k` nearest points by Euclidean distance, excluding the center,
    /// ties broken by lower index. When fewer than `k` other points exist
    /// the list is padded by repeating the nearest one (the center itself
    /// for a single-point cloud).
    pub fn knn_query(&self, center_idx: usize, k: usize) -> Result<Vec<u32>> {
        self.check_center(center_idx)?;
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let center = self.positions[center_idx];
        let center_cell = cell_of(&center, &self.origin, self.cell_size);
        let max_shell = (0..3)
            .map(|a| center_cell[a].max(self.cell_max[a] - center_cell[a]))
            .max()
            .unwrap_or(0);

        let mut candidates: Vec<(f32, u32)> = Vec::new();
        let mut sorted_up_to = 0usize;
        for shell in 0..=max_shell {
            self.scan_shell(&center, center_idx, center_cell, shell, &mut candidates);
            if candidates.len() >= k {
                // Any unscanned point is farther than shell * cell_size away.
                let reach = shell as f32 * self.cell_size;
                candidates.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite distances"));
                sorted_up_to = candidates.len();
                if candidates[k - 1].0 <= reach * reach {
                    break;
                }
            }
        }
        if candidates.len() != sorted_up_to {
            candidates.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        }

        let mut out: Vec<u32> = candidates.iter().take(k).map(|&(_, j)| j).collect();
        if out.len() < k {
            let filler = out.first().copied().unwrap_or(center_idx as u32);
            out.resize(k, filler);
        }
        Ok(out)
    }

    /// Collects candidates from the cells at Chebyshev distance `shell`.
    fn scan_shell(
        &self,
        center: &[f32; 3],
        center_idx: usize,
        center_cell: [i32; 3],
        shell: i32,
        candidates: &mut Vec<(f32, u32)>,
    ) {
        let lo = [
            center_cell[0] - shell,
            center_cell[1] - shell,
            center_cell[2] - shell,
        ];
        let hi = [
            center_cell[0] + shell,
            center_cell[1] + shell,
            center_cell[2] + shell,
        ];
        for cx in lo[0].max(0)..=hi[0].min(self.cell_max[0]) {
            for cy in lo[1].max(0)..=hi[1].min(self.cell_max[1]) {
                for cz in lo[2].max(0)..=hi[2].min(self.cell_max[2]) {
                    let on_boundary = (cx - center_cell[0]).abs() == shell
                        || (cy - center_cell[1]).abs() == shell
                        || (cz - center_cell[2]).abs() == shell;
                    if !on_boundary {
                        continue;
                    }
                    let Some(cell) = self.grid.get(&[cx, cy, cz]) else {
                        continue;
                    };
                    for &j in cell {
                        if j as usize == center_idx {
                            continue;
                        }
                        candidates.push((dist_sq(center, &self.positions[j as usize]), j));
                    }
                }
            }
        }
    }
}

#[inline]
fn cell_of(p: &[f32; 3], origin: &[f32; 3], cell_size: f32) -> [i32; 3] {
    let mut c = [0i32; 3];
    for k in 0..3 {
        c[k] = libm::floorf((p[k] - origin[k]) / cell_size) as i32;
    }
    c
}

#[inline]
fn dist_sq(a: &[f32; 3], b: &[f32; 3]) -> f32 {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    let dz = b[2] - a[2];
    dx * dx + dy * dy + dz * dz
}

/// One query point's neighbor list with cached edge geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbors {
    pub indices: Vec<u32>,
    /// Edge vectors `q - p`.
    pub edges: Vec<[f32; 3]>,
    pub dists: Vec<f32>,
}

impl Neighbors {
    fn from_candidates(
        center: &[f32; 3],
        positions: &[[f32; 3]],
        candidates: Vec<(f32, u32)>,
    ) -> Neighbors {
        let mut indices = Vec::with_capacity(candidates.len());
        let mut edges = Vec::with_capacity(candidates.len());
        let mut dists = Vec::with_capacity(candidates.len());
        for (d_sq, j) in candidates {
            let q = positions[j as usize];
            indices.push(j);
            edges.push([q[0] - center[0], q[1] - center[1], q[2] - center[2]]);
            dists.push(libm::sqrtf(d_sq));
        }
        Neighbors {
            indices,
            edges,
            dists,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Ball neighborhoods of every point of a cloud at one radius, flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodSet {
    radius: f32,
    offsets: Vec<u32>,
    indices: Vec<u32>,
    edges: Vec<[f32; 3]>,
    dists: Vec<f32>,
}

/// Borrowed view of one point's neighbors inside a [`NeighborhoodSet`].
#[derive(Debug, Clone, Copy)]
pub struct NeighborhoodView<'a> {
    pub indices: &'a [u32],
    pub edges: &'a [[f32; 3]],
    pub dists: &'a [f32],
}

impl NeighborhoodSet {
    /// Builds the radius-`r` neighborhood of every point, using a grid with
    /// `cell_size = r` so each ball query scans at most 27 cells.
    pub fn build(positions: &[[f32; 3]], radius: f32, cap: Option<usize>) -> Result<Self> {
        let index = SpatialIndex::build(positions, radius)?;
        let mut set = NeighborhoodSet {
            radius,
            offsets: Vec::with_capacity(positions.len() + 1),
            indices: Vec::new(),
            edges: Vec::new(),
            dists: Vec::new(),
        };
        set.offsets.push(0);
        for p in 0..positions.len() {
            let nb = index.ball_query(p, radius, cap)?;
            set.indices.extend_from_slice(&nb.indices);
            set.edges.extend_from_slice(&nb.edges);
            set.dists.extend_from_slice(&nb.dists);
            set.offsets.push(set.indices.len() as u32);
        }
        Ok(set)
    }

    pub fn radius(&self) -> f32 {
        self.radius
    }

    pub fn n_points(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn edge_count(&self) -> usize {
        self.indices.len()
    }

    pub fn neighbors(&self, p: usize) -> NeighborhoodView<'_> {
        let lo = self.offsets[p] as usize;
        let hi = self.offsets[p + 1] as usize;
        NeighborhoodView {
            indices: &self.indices[lo..hi],
            edges: &self.edges[lo..hi],
            dists: &self.dists[lo..hi],
        }
    }

    /// Concatenates per-cloud sets into one batch set, offsetting indices.
    pub fn stack(sets: &[&NeighborhoodSet]) -> Result<NeighborhoodSet> {
        let first = sets
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let mut out = NeighborhoodSet {
            radius: first.radius,
            offsets: alloc::vec![0],
            indices: Vec::new(),
            edges: Vec::new(),
            dists: Vec::new(),
        };
        let mut base = 0u32;
        for set in sets {
            if set.radius != first.radius {
                return Err(Error::InvalidArgument(
                    "stacking neighborhoods with different radii".into(),
                ));
            }
            for p in 0..set.n_points() {
                let v = set.neighbors(p);
                out.indices.extend(v.indices.iter().map(|&j| j + base));
                out.edges.extend_from_slice(v.edges);
                out.dists.extend_from_slice(v.dists);
                out.offsets.push(out.indices.len() as u32);
            }
            base += set.n_points() as u32;
        }
        Ok(out)
    }
}
