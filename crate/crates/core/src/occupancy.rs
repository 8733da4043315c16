//! Occupancy grid and the sparsity priors derived from it: per-vertex area of
//! effect (AOE), hash-fusion weights, slot validity and projected voxel
//! features (PVF).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LevelGeometry, PlaneAxis, SignTable};

pub const DEFAULT_OCCUPANCY_THRESHOLD: f64 = 1e-2;
pub const DEFAULT_OCCUPANCY_RESOLUTION: u32 = 32;
/// Samples per axis inside a cell when deriving occupancy from a field.
pub const OCCUPANCY_STENCIL: usize = 2;
/// PVF value for columns without a contributing vertex.
pub const PVF_NEUTRAL: f32 = 0.5;
/// Side of a vertex's AOE footprint, in cells of its own level. The footprint
/// is the block of cells incident to the vertex.
pub const FOOTPRINT_CELLS: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    resolution: u32,
    cells: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(resolution: u32, cells: Vec<bool>) -> Result<Self> {
        if resolution == 0 || resolution > u16::MAX as u32 {
            return Err(Error::Config(format!(
                "occupancy resolution {resolution} out of range"
            )));
        }
        if cells.len() != (resolution as usize).pow(3) {
            return Err(Error::WidthMismatch {
                expected: (resolution as usize).pow(3),
                got: cells.len(),
            });
        }
        Ok(OccupancyGrid { resolution, cells })
    }

    pub fn full(resolution: u32) -> Self {
        OccupancyGrid {
            resolution,
            cells: vec![true; (resolution as usize).pow(3)],
        }
    }

    pub fn from_fn(resolution: u32, mut f: impl FnMut([u32; 3]) -> bool) -> Self {
        let r = resolution;
        let mut cells = Vec::with_capacity((r as usize).pow(3));
        for z in 0..r {
            for y in 0..r {
                for x in 0..r {
                    cells.push(f([x, y, z]));
                }
            }
        }
        OccupancyGrid {
            resolution,
            cells,
        }
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    #[inline]
    pub fn cell_index(&self, c: [u32; 3]) -> usize {
        let r = self.resolution as usize;
        c[0] as usize + r * (c[1] as usize + r * c[2] as usize)
    }

    #[inline]
    pub fn is_occupied(&self, c: [u32; 3]) -> bool {
        self.cells[self.cell_index(c)]
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn occupied_cells(&self) -> Vec<[u32; 3]> {
        let r = self.resolution as usize;
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c)
            .map(|(i, _)| [(i % r) as u32, ((i / r) % r) as u32, (i / (r * r)) as u32])
            .collect()
    }

    /// Cell containing a normalized position; the upper boundary belongs to
    /// the last cell.
    #[inline]
    pub fn cell_of(&self, pos: &[f64; 3]) -> [u32; 3] {
        let r = self.resolution;
        let mut c = [0u32; 3];
        for a in 0..3 {
            c[a] = ((pos[a].clamp(0.0, 1.0) * r as f64).floor() as u32).min(r - 1);
        }
        c
    }

    pub fn contains_point(&self, pos: &[f64; 3]) -> bool {
        self.is_occupied(self.cell_of(pos))
    }

    /// Volume of the intersection between an axis-aligned box and the union
    /// of occupied cells. The box is clipped to the unit cube.
    pub fn overlap_volume(&self, lo: [f64; 3], hi: [f64; 3]) -> f64 {
        let r = self.resolution as f64;
        let mut ranges = [(0u32, 0u32); 3];
        let mut lens: [Vec<f64>; 3] = Default::default();
        for a in 0..3 {
            let l = lo[a].max(0.0);
            let h = hi[a].min(1.0);
            if h <= l {
                return 0.0;
            }
            let first = ((l * r).floor() as u32).min(self.resolution - 1);
            let last = (((h * r).ceil() as u32).max(1) - 1).min(self.resolution - 1);
            ranges[a] = (first, last);
            lens[a] = (first..=last)
                .map(|i| {
                    let c0 = i as f64 / r;
                    let c1 = (i + 1) as f64 / r;
                    (h.min(c1) - l.max(c0)).max(0.0)
                })
                .collect();
        }
        let mut vol = 0.0;
        for (k, &lz) in (ranges[2].0..=ranges[2].1).zip(&lens[2]) {
            if lz == 0.0 {
                continue;
            }
            for (j, &ly) in (ranges[1].0..=ranges[1].1).zip(&lens[1]) {
                if ly == 0.0 {
                    continue;
                }
                for (i, &lx) in (ranges[0].0..=ranges[0].1).zip(&lens[0]) {
                    if lx > 0.0 && self.is_occupied([i, j, k]) {
                        vol += lx * ly * lz;
                    }
                }
            }
        }
        vol
    }

    /// Area of effect of a lattice vertex on a 3D level of `resolution` cells
    /// per axis: overlap between the cells incident to the vertex and the
    /// occupied space.
    pub fn aoe(&self, vertex: [u32; 3], resolution: u32) -> f64 {
        let (lo, hi) = footprint(vertex, resolution);
        self.overlap_volume(lo, hi)
    }

    /// Packed little-endian bit array, x fastest, preceded by the resolution
    /// as u16.
    pub fn to_packed_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(2 + self.cells.len().div_ceil(8));
        out.extend_from_slice(&(self.resolution as u16).to_le_bytes());
        out.extend(pack_bits(&self.cells));
        out
    }

    pub fn from_packed_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 2 {
            return Err(Error::Truncated);
        }
        let r = u16::from_le_bytes([bytes[0], bytes[1]]) as u32;
        let n = (r as usize).pow(3);
        let body = &bytes[2..];
        if body.len() < n.div_ceil(8) {
            return Err(Error::Truncated);
        }
        OccupancyGrid::new(r, unpack_bits(body, n))
    }
}

pub(crate) fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub(crate) fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

fn footprint(vertex: [u32; 3], resolution: u32) -> ([f64; 3], [f64; 3]) {
    let half = FOOTPRINT_CELLS / (2.0 * resolution as f64);
    let mut lo = [0.0; 3];
    let mut hi = [0.0; 3];
    for a in 0..3 {
        let c = vertex[a] as f64 / resolution as f64;
        lo[a] = c - half;
        hi[a] = c + half;
    }
    (lo, hi)
}

/// Marks a cell occupied when `|field|` exceeds `threshold` anywhere on a
/// regular stencil inside the cell.
pub fn derive_occupancy(
    field: impl Fn(&[f64; 3]) -> f64 + Sync,
    resolution: u32,
    threshold: f64,
) -> Result<OccupancyGrid> {
    let r = resolution as usize;
    let ns = OCCUPANCY_STENCIL;
    let cells: Vec<bool> = (0..r * r * r)
        .into_par_iter()
        .map(|i| {
            let c = [i % r, (i / r) % r, i / (r * r)];
            for s in 0..ns.pow(3) {
                let o = [s % ns, (s / ns) % ns, s / (ns * ns)];
                let mut p = [0.0; 3];
                for a in 0..3 {
                    p[a] = (c[a] as f64 + (o[a] as f64 + 0.5) / ns as f64) / r as f64;
                }
                if field(&p).abs() > threshold {
                    return true;
                }
            }
            false
        })
        .collect();
    let grid = OccupancyGrid::new(resolution, cells)?;
    if grid.occupied_count() == 0 {
        return Err(Error::EmptyOccupancy);
    }
    Ok(grid)
}

/// Normalized hash-fusion weights from the AOEs of one slot's vertices.
pub fn fusion_weights(aoes: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = aoes.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidSlot { level: 0, slot: 0 });
    }
    Ok(aoes.iter().map(|&a| a / total).collect())
}

/// How vertices are judged relevant when deciding which slots are coded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValidityCriterion {
    /// Vertex counts when its AOE is positive.
    #[default]
    AreaOfEffect,
    /// Vertex counts only when the occupancy cell containing it is occupied.
    /// Discards too much; kept for the ablation.
    CellMembership,
}

/// Per-level hash-fusion table: for every slot, the contributing vertices
/// (ascending lattice order) and their normalized weights. Slots with no
/// contributor are invalid and never coded.
#[derive(Clone, Debug)]
pub struct LevelFusion {
    geometry: LevelGeometry,
    offsets: Vec<usize>,
    vertices: Vec<u32>,
    weights: Vec<f64>,
}

impl LevelFusion {
    /// Fusion table of a 3D level weighted by AOE.
    pub fn volume(geometry: LevelGeometry, occ: &OccupancyGrid, criterion: ValidityCriterion) -> Self {
        assert_eq!(geometry.rank, 3);
        let n1 = geometry.vertices_per_axis() as usize;
        let slabs: Vec<Vec<(u32, f64)>> = (0..n1)
            .into_par_iter()
            .map(|z| {
                let mut out = Vec::new();
                for y in 0..n1 {
                    for x in 0..n1 {
                        let v = [x as u32, y as u32, z as u32];
                        let a = occ.aoe(v, geometry.resolution);
                        let keep = match criterion {
                            ValidityCriterion::AreaOfEffect => a > 0.0,
                            ValidityCriterion::CellMembership => {
                                occ.contains_point(&geometry.vertex_position(&v))
                            }
                        };
                        if keep {
                            let w = match criterion {
                                ValidityCriterion::AreaOfEffect => a,
                                ValidityCriterion::CellMembership => 1.0,
                            };
                            out.push((geometry.linear_index(&v) as u32, w));
                        }
                    }
                }
                out
            })
            .collect();
        Self::from_contributors(geometry, slabs.into_iter().flatten())
    }

    /// Fusion table of a 2D level: every colliding vertex counts equally.
    pub fn plane(geometry: LevelGeometry) -> Self {
        assert_eq!(geometry.rank, 2);
        let n = geometry.vertex_count();
        Self::from_contributors(geometry, (0..n).map(|i| (i as u32, 1.0)))
    }

    fn from_contributors(geometry: LevelGeometry, contributors: impl Iterator<Item = (u32, f64)>) -> Self {
        let items: Vec<(u32, f64)> = contributors.collect();
        let slots: Vec<u32> = items
            .iter()
            .map(|&(v, _)| geometry.slot_of(&geometry.vertex_at(v as usize)) as u32)
            .collect();
        let mut offsets = vec![0usize; geometry.table_size + 1];
        for &s in &slots {
            offsets[s as usize + 1] += 1;
        }
        for i in 0..geometry.table_size {
            offsets[i + 1] += offsets[i];
        }
        let mut cursor = offsets.clone();
        let mut vertices = vec![0u32; items.len()];
        let mut raw = vec![0f64; items.len()];
        for (&(v, a), &s) in items.iter().zip(&slots) {
            let at = &mut cursor[s as usize];
            vertices[*at] = v;
            raw[*at] = a;
            *at += 1;
        }
        let mut weights = raw;
        for s in 0..geometry.table_size {
            let span = offsets[s]..offsets[s + 1];
            let total: f64 = weights[span.clone()].iter().sum();
            for w in &mut weights[span] {
                *w /= total;
            }
        }
        LevelFusion {
            geometry,
            offsets,
            vertices,
            weights,
        }
    }

    pub fn geometry(&self) -> &LevelGeometry {
        &self.geometry
    }

    pub fn num_slots(&self) -> usize {
        self.geometry.table_size
    }

    #[inline]
    pub fn is_valid(&self, slot: usize) -> bool {
        self.offsets[slot + 1] > self.offsets[slot]
    }

    /// Contributing vertices (linear lattice indices) and their weights.
    #[inline]
    pub fn slot(&self, slot: usize) -> (&[u32], &[f64]) {
        let span = self.offsets[slot]..self.offsets[slot + 1];
        (&self.vertices[span.clone()], &self.weights[span])
    }

    pub fn valid_slots(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_slots()).filter(|&s| self.is_valid(s))
    }

    pub fn valid_slot_count(&self) -> usize {
        self.valid_slots().count()
    }

    /// All contributing vertices in slot order.
    pub fn contributing_vertices(&self) -> &[u32] {
        &self.vertices
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.num_slots()).map(|s| self.is_valid(s)).collect()
    }
}

/// Which slots of each level are coded.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotValidity {
    pub masks: Vec<Vec<bool>>,
    /// Valid slots times feature dimension, summed over levels.
    pub valid_theta: usize,
    /// All table entries times feature dimension, valid or not.
    pub total_theta: usize,
}

pub fn validity_masks(fusions: &[LevelFusion], feature_dim: usize) -> SlotValidity {
    let masks: Vec<Vec<bool>> = fusions.iter().map(LevelFusion::mask).collect();
    let valid_theta = masks
        .iter()
        .map(|m| m.iter().filter(|&&v| v).count() * feature_dim)
        .sum();
    let total_theta = fusions.iter().map(|f| f.num_slots() * feature_dim).sum();
    SlotValidity {
        masks,
        valid_theta,
        total_theta,
    }
}

/// Projected voxel features: per-plane, per-dimension frequency of +1 among
/// the AOE-positive vertices of the finest 3D level.
#[derive(Clone, Debug, PartialEq)]
pub struct Pvf {
    resolution: u32,
    feature_dim: usize,
    planes: [Vec<f32>; 3],
}

impl Pvf {
    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn plane(&self, axis: PlaneAxis) -> &[f32] {
        &self.planes[axis.index()]
    }

    /// Values at one plane vertex `(a, b)`.
    pub fn at(&self, axis: PlaneAxis, a: u32, b: u32) -> &[f32] {
        let n = self.resolution as usize + 1;
        let i = (a as usize + n * b as usize) * self.feature_dim;
        &self.planes[axis.index()][i..i + self.feature_dim]
    }

    /// Bilinear sample at a normalized plane position.
    pub fn sample(&self, axis: PlaneAxis, pos: &[f64; 2], out: &mut [f32]) {
        let geom = LevelGeometry {
            rank: 2,
            resolution: self.resolution,
            table_size: (self.resolution as usize + 1).pow(2),
            hashed: false,
        };
        let f = self.feature_dim;
        let plane = &self.planes[axis.index()];
        let corners = geom.corners(pos);
        let mut acc = [0f64; 8];
        for (slot, w) in corners.iter() {
            for (a, &v) in acc[..f].iter_mut().zip(&plane[slot * f..(slot + 1) * f]) {
                *a += w * v as f64;
            }
        }
        for (o, a) in out.iter_mut().zip(&acc[..f]) {
            *o = *a as f32;
        }
    }
}

/// Projects the finest 3D level onto the three axis planes. `contributors`
/// lists the vertices (linear lattice indices) whose AOE is positive; all
/// others are omitted.
pub fn project_pvf<S: SignTable + ?Sized>(finest: &S, contributors: &[u32]) -> Pvf {
    let geom = *finest.geometry();
    let f = finest.feature_dim();
    let n = geom.vertices_per_axis() as usize;
    let mut plus = [vec![0u32; n * n * f], vec![0u32; n * n * f], vec![0u32; n * n * f]];
    let mut count = [vec![0u32; n * n], vec![0u32; n * n], vec![0u32; n * n]];
    for &lin in contributors {
        let v = geom.vertex_at(lin as usize);
        let signs = finest.slot_signs(geom.slot_of(&v));
        for axis in PlaneAxis::ALL {
            let [a, b] = axis.axes();
            let cell = v[a] as usize + n * v[b] as usize;
            count[axis.index()][cell] += 1;
            let row = &mut plus[axis.index()][cell * f..(cell + 1) * f];
            for (p, &s) in row.iter_mut().zip(signs) {
                *p += (s > 0) as u32;
            }
        }
    }
    let planes = PlaneAxis::ALL.map(|axis| {
        let i = axis.index();
        let mut out = vec![PVF_NEUTRAL; n * n * f];
        for cell in 0..n * n {
            let c = count[i][cell];
            if c > 0 {
                for d in 0..f {
                    out[cell * f + d] = plus[i][cell * f + d] as f32 / c as f32;
                }
            }
        }
        out
    });
    Pvf {
        resolution: geom.resolution,
        feature_dim: f,
        planes,
    }
}
