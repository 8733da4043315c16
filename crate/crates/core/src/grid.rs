//! Multi-resolution grids: resolution schedule, spatial hashing, inverse hash
//! mapping, interpolation over binarized features, and the straight-through
//! sign binarizer.
//!
//! A level of resolution `R` has `R` cells and `R + 1` vertices per axis;
//! vertex `v` sits at normalized coordinate `v / R`. Levels whose vertex count
//! exceeds the table size are hashed, smaller ones are indexed row-major
//! (x fastest).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hash multipliers for x, y and z.
pub const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

/// Half-width of the uniform latent initialization.
pub const LATENT_INIT_SCALE: f32 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PlaneAxis {
    Xy,
    Xz,
    Yz,
}

impl PlaneAxis {
    pub const ALL: [PlaneAxis; 3] = [PlaneAxis::Xy, PlaneAxis::Xz, PlaneAxis::Yz];

    /// Indices of the two 3D axes spanning the plane.
    pub fn axes(self) -> [usize; 2] {
        match self {
            PlaneAxis::Xy => [0, 1],
            PlaneAxis::Xz => [0, 2],
            PlaneAxis::Yz => [1, 2],
        }
    }

    /// The 3D axis collapsed by projecting onto this plane.
    pub fn normal_axis(self) -> usize {
        match self {
            PlaneAxis::Xy => 2,
            PlaneAxis::Xz => 1,
            PlaneAxis::Yz => 0,
        }
    }

    pub fn project(self, pos: &[f64; 3]) -> [f64; 2] {
        let [a, b] = self.axes();
        [pos[a], pos[b]]
    }

    pub fn index(self) -> usize {
        match self {
            PlaneAxis::Xy => 0,
            PlaneAxis::Xz => 1,
            PlaneAxis::Yz => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PlaneAxis::Xy => "xy",
            PlaneAxis::Xz => "xz",
            PlaneAxis::Yz => "yz",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridDims {
    Volume,
    Plane(PlaneAxis),
}

impl GridDims {
    pub fn rank(self) -> usize {
        match self {
            GridDims::Volume => 3,
            GridDims::Plane(_) => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub dims: GridDims,
    pub num_levels: usize,
    pub min_res: u32,
    pub max_res: u32,
    pub table_size_log2: u32,
    pub feature_dim: usize,
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_levels == 0 {
            return Err(Error::Config("grid needs at least one level".into()));
        }
        if self.min_res == 0 {
            return Err(Error::Config("resolution must be positive".into()));
        }
        if self.max_res < self.min_res {
            return Err(Error::Config(format!(
                "max_res {} is below min_res {}",
                self.max_res, self.min_res
            )));
        }
        if !matches!(self.feature_dim, 1 | 2 | 4 | 8) {
            return Err(Error::Config(format!(
                "feature_dim must be 1, 2, 4 or 8, got {}",
                self.feature_dim
            )));
        }
        if self.table_size_log2 == 0 || self.table_size_log2 > 30 {
            return Err(Error::Config(format!(
                "table_size_log2 must be in 1..=30, got {}",
                self.table_size_log2
            )));
        }
        Ok(())
    }

    pub fn geometries(&self) -> Result<Vec<LevelGeometry>> {
        let rank = self.dims.rank();
        Ok(level_resolutions(self)?
            .into_iter()
            .map(|res| LevelGeometry::new(rank, res, self.table_size_log2))
            .collect())
    }
}

/// Geometric resolution schedule from `min_res` to `max_res`.
pub fn level_resolutions(cfg: &GridConfig) -> Result<Vec<u32>> {
    cfg.validate()?;
    if cfg.num_levels == 1 {
        return Ok(vec![cfg.min_res]);
    }
    let growth = (cfg.max_res as f64 / cfg.min_res as f64).powf(1.0 / (cfg.num_levels - 1) as f64);
    let mut out = Vec::with_capacity(cfg.num_levels);
    for l in 0..cfg.num_levels {
        let res = if l + 1 == cfg.num_levels {
            cfg.max_res
        } else {
            (cfg.min_res as f64 * growth.powi(l as i32)).round() as u32
        };
        if let Some(&prev) = out.last() {
            if res <= prev {
                return Err(Error::Config(format!(
                    "{} levels between {} and {} do not give strictly increasing resolutions",
                    cfg.num_levels, cfg.min_res, cfg.max_res
                )));
            }
        }
        out.push(res);
    }
    Ok(out)
}

/// Shape of a single level: lattice size and feature table size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelGeometry {
    pub rank: usize,
    pub resolution: u32,
    pub table_size: usize,
    pub hashed: bool,
}

impl LevelGeometry {
    pub fn new(rank: usize, resolution: u32, table_size_log2: u32) -> Self {
        assert!(rank == 2 || rank == 3, "rank must be 2 or 3");
        let vertices = (resolution as u64 + 1).pow(rank as u32);
        let cap = 1u64 << table_size_log2;
        LevelGeometry {
            rank,
            resolution,
            table_size: vertices.min(cap) as usize,
            hashed: vertices > cap,
        }
    }

    pub fn vertices_per_axis(&self) -> u32 {
        self.resolution + 1
    }

    pub fn vertex_count(&self) -> usize {
        (self.resolution as usize + 1).pow(self.rank as u32)
    }

    pub fn contains(&self, vertex: &[u32; 3]) -> bool {
        vertex[..self.rank].iter().all(|&c| c <= self.resolution)
            && vertex[self.rank..].iter().all(|&c| c == 0)
    }

    /// Row-major index of a vertex, x fastest.
    pub fn linear_index(&self, vertex: &[u32; 3]) -> usize {
        let n = self.vertices_per_axis() as usize;
        vertex[0] as usize + n * (vertex[1] as usize + n * vertex[2] as usize)
    }

    pub fn vertex_at(&self, linear: usize) -> [u32; 3] {
        let n = self.vertices_per_axis() as usize;
        let x = linear % n;
        let y = (linear / n) % n;
        let z = if self.rank == 3 { linear / (n * n) } else { 0 };
        [x as u32, y as u32, z as u32]
    }

    /// Normalized position of a vertex; unused trailing coordinates are zero.
    pub fn vertex_position(&self, vertex: &[u32; 3]) -> [f64; 3] {
        let r = self.resolution as f64;
        let mut p = [0.0; 3];
        for a in 0..self.rank {
            p[a] = vertex[a] as f64 / r;
        }
        p
    }

    /// Table slot of a vertex, rejecting vertices outside the lattice.
    pub fn spatial_hash(&self, vertex: [u32; 3]) -> Result<usize> {
        if !self.contains(&vertex) {
            return Err(Error::VertexOutOfBounds {
                vertex,
                resolution: self.resolution,
            });
        }
        Ok(self.slot_of(&vertex))
    }

    /// Unchecked slot lookup for vertices known to be on the lattice.
    #[inline]
    pub fn slot_of(&self, vertex: &[u32; 3]) -> usize {
        if !self.hashed {
            return self.linear_index(vertex);
        }
        let mut h = 0u32;
        for a in 0..self.rank {
            h ^= vertex[a].wrapping_mul(HASH_PRIMES[a]);
        }
        // hashed tables are always a power of two
        (h as usize) & (self.table_size - 1)
    }

    /// Surrounding vertices of `pos` with their multilinear weights.
    pub fn corners(&self, pos: &[f64]) -> Corners {
        let r = self.resolution as f64;
        let mut base = [0u32; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..self.rank {
            let s = pos[a].clamp(0.0, 1.0) * r;
            let i = (s.floor() as u32).min(self.resolution - 1);
            base[a] = i;
            frac[a] = s - i as f64;
        }
        let count = 1usize << self.rank;
        let mut out = Corners {
            slots: [0; 8],
            weights: [0.0; 8],
            len: count,
        };
        for c in 0..count {
            let mut v = [0u32; 3];
            let mut w = 1.0;
            for a in 0..self.rank {
                let hi = (c >> a) & 1 == 1;
                v[a] = base[a] + hi as u32;
                w *= if hi { frac[a] } else { 1.0 - frac[a] };
            }
            out.slots[c] = self.slot_of(&v);
            out.weights[c] = w;
        }
        out
    }
}

/// Corner slots and interpolation weights around a query point.
#[derive(Clone, Copy, Debug)]
pub struct Corners {
    pub slots: [usize; 8],
    pub weights: [f64; 8],
    pub len: usize,
}

impl Corners {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.slots[..self.len]
            .iter()
            .copied()
            .zip(self.weights[..self.len].iter().copied())
    }
}

/// Read access to the binarized table of one level.
pub trait SignTable {
    fn geometry(&self) -> &LevelGeometry;
    fn feature_dim(&self) -> usize;
    fn slot_signs(&self, slot: usize) -> &[i8];
}

/// Multilinear blend of the corner sign vectors around `pos`, written to `out`.
pub fn interpolate<S: SignTable + ?Sized>(table: &S, pos: &[f64], out: &mut [f32]) {
    let f = table.feature_dim();
    debug_assert_eq!(out.len(), f);
    let corners = table.geometry().corners(pos);
    let mut acc = [0.0f64; 8];
    for (slot, w) in corners.iter() {
        for (a, &s) in acc[..f].iter_mut().zip(table.slot_signs(slot)) {
            *a += w * s as f64;
        }
    }
    for (o, a) in out.iter_mut().zip(&acc[..f]) {
        *o = *a as f32;
    }
}

#[inline]
pub fn binarize(latent: f32) -> i8 {
    if latent >= 0.0 {
        1
    } else {
        -1
    }
}

/// Straight-through (hard-tanh) gradient of [`binarize`].
#[inline]
pub fn ste_grad(latent: f32, upstream: f32) -> f32 {
    if latent.abs() <= 1.0 {
        upstream
    } else {
        0.0
    }
}

/// One level's feature table: continuous latents and their sign view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelEmbedding {
    geometry: LevelGeometry,
    feature_dim: usize,
    latent: Vec<f32>,
    signs: Vec<i8>,
}

impl LevelEmbedding {
    pub fn random<R: Rng>(geometry: LevelGeometry, feature_dim: usize, rng: &mut R) -> Self {
        let latent = (0..geometry.table_size * feature_dim)
            .map(|_| rng.gen_range(-LATENT_INIT_SCALE..=LATENT_INIT_SCALE))
            .collect();
        Self::from_latent(geometry, feature_dim, latent)
    }

    pub fn from_latent(geometry: LevelGeometry, feature_dim: usize, latent: Vec<f32>) -> Self {
        assert_eq!(latent.len(), geometry.table_size * feature_dim);
        let signs = latent.iter().map(|&x| binarize(x)).collect();
        LevelEmbedding {
            geometry,
            feature_dim,
            latent,
            signs,
        }
    }

    /// Table reconstructed from signs alone; latents become exactly ±1.
    pub fn from_signs(geometry: LevelGeometry, feature_dim: usize, signs: Vec<i8>) -> Self {
        assert_eq!(signs.len(), geometry.table_size * feature_dim);
        let latent = signs.iter().map(|&s| s as f32).collect();
        let signs = signs.into_iter().map(|s| if s >= 0 { 1 } else { -1 }).collect();
        LevelEmbedding {
            geometry,
            feature_dim,
            latent,
            signs,
        }
    }

    pub fn geometry(&self) -> &LevelGeometry {
        &self.geometry
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn resolution(&self) -> u32 {
        self.geometry.resolution
    }

    pub fn hashed(&self) -> bool {
        self.geometry.hashed
    }

    pub fn latent(&self) -> &[f32] {
        &self.latent
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    /// Mutates the latents and re-derives the signs.
    pub fn update_latent(&mut self, f: impl FnOnce(&mut [f32])) {
        f(&mut self.latent);
        for (s, &x) in self.signs.iter_mut().zip(&self.latent) {
            *s = binarize(x);
        }
    }

    pub fn interpolate(&self, pos: &[f64], out: &mut [f32]) {
        interpolate(self, pos, out)
    }
}

impl SignTable for LevelEmbedding {
    fn geometry(&self) -> &LevelGeometry {
        &self.geometry
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    #[inline]
    fn slot_signs(&self, slot: usize) -> &[i8] {
        &self.signs[slot * self.feature_dim..(slot + 1) * self.feature_dim]
    }
}

/// Slot → vertices mapping obtained by hashing every lattice vertex.
#[derive(Clone, Debug)]
pub struct InverseHashMap {
    geometry: LevelGeometry,
    offsets: Vec<usize>,
    vertices: Vec<u32>,
}

impl InverseHashMap {
    pub fn build(geometry: LevelGeometry) -> Self {
        let n = geometry.vertex_count();
        let slots: Vec<u32> = (0..n)
            .map(|i| geometry.slot_of(&geometry.vertex_at(i)) as u32)
            .collect();
        let mut offsets = vec![0usize; geometry.table_size + 1];
        for &s in &slots {
            offsets[s as usize + 1] += 1;
        }
        for i in 0..geometry.table_size {
            offsets[i + 1] += offsets[i];
        }
        let mut cursor = offsets.clone();
        let mut vertices = vec![0u32; n];
        for (i, &s) in slots.iter().enumerate() {
            vertices[cursor[s as usize]] = i as u32;
            cursor[s as usize] += 1;
        }
        InverseHashMap {
            geometry,
            offsets,
            vertices,
        }
    }

    pub fn geometry(&self) -> &LevelGeometry {
        &self.geometry
    }

    pub fn num_slots(&self) -> usize {
        self.geometry.table_size
    }

    /// Collision count K of a slot.
    pub fn collisions(&self, slot: usize) -> usize {
        self.offsets[slot + 1] - self.offsets[slot]
    }

    pub fn slot_vertices(&self, slot: usize) -> impl Iterator<Item = [u32; 3]> + '_ {
        self.vertices[self.offsets[slot]..self.offsets[slot + 1]]
            .iter()
            .map(|&i| self.geometry.vertex_at(i as usize))
    }

    pub fn total_vertices(&self) -> usize {
        self.vertices.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(levels: usize, lo: u32, hi: u32) -> GridConfig {
        GridConfig {
            dims: GridDims::Volume,
            num_levels: levels,
            min_res: lo,
            max_res: hi,
            table_size_log2: 15,
            feature_dim: 2,
        }
    }

    #[test]
    fn resolution_schedule() {
        let r = level_resolutions(&cfg(12, 16, 512)).unwrap();
        assert_eq!(r.len(), 12);
        assert_eq!((r[0], r[11]), (16, 512));
        assert!(r.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(level_resolutions(&cfg(1, 16, 16)).unwrap(), vec![16]);
        assert_eq!(
            level_resolutions(&cfg(4, 128, 1024)).unwrap(),
            vec![128, 256, 512, 1024]
        );
        assert!(matches!(
            level_resolutions(&cfg(3, 32, 16)),
            Err(Error::Config(_))
        ));
        // too many levels for the range to stay strictly increasing
        assert!(level_resolutions(&cfg(10, 16, 18)).is_err());
    }

    #[test]
    fn row_major_slots() {
        // four vertices per axis
        let g = LevelGeometry::new(3, 3, 15);
        assert!(!g.hashed);
        assert_eq!(g.spatial_hash([1, 2, 3]).unwrap(), 1 + 2 * 4 + 3 * 16);
        assert!(matches!(
            g.spatial_hash([4, 0, 0]),
            Err(Error::VertexOutOfBounds { .. })
        ));
    }

    #[test]
    fn hashed_origin_and_pigeonhole() {
        let g = LevelGeometry::new(3, 8, 6);
        assert!(g.hashed);
        assert_eq!(g.spatial_hash([0, 0, 0]).unwrap(), 0);
        let mut seen = vec![false; g.table_size];
        let mut collided = false;
        for i in 0..g.vertex_count() {
            let s = g.slot_of(&g.vertex_at(i));
            collided |= std::mem::replace(&mut seen[s], true);
        }
        assert!(collided);
    }

    #[test]
    fn inverse_map_conservation() {
        let g = LevelGeometry::new(3, 4, 15);
        let m = InverseHashMap::build(g);
        assert_eq!(m.num_slots(), 125);
        assert!((0..125).all(|s| m.collisions(s) == 1));

        let g = LevelGeometry::new(3, 8, 6);
        let m = InverseHashMap::build(g);
        let total: usize = (0..m.num_slots()).map(|s| m.collisions(s)).sum();
        assert_eq!(total, 729);
        for s in 0..m.num_slots() {
            for v in m.slot_vertices(s) {
                assert_eq!(g.spatial_hash(v).unwrap(), s);
            }
        }
    }

    #[test]
    fn plane_inverse_map() {
        let g = LevelGeometry::new(2, 40, 9);
        assert!(g.hashed);
        let m = InverseHashMap::build(g);
        assert_eq!(m.total_vertices(), 41 * 41);
        let mut count = vec![0usize; 41 * 41];
        for s in 0..m.num_slots() {
            for v in m.slot_vertices(s) {
                assert_eq!(v[2], 0);
                count[g.linear_index(&v)] += 1;
            }
        }
        assert!(count.iter().all(|&c| c == 1));
    }

    #[test]
    fn interpolation_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = LevelGeometry::new(3, 4, 15);
        let lvl = LevelEmbedding::random(g, 2, &mut rng);
        let mut out = [0f32; 2];
        let v = [1, 2, 3];
        lvl.interpolate(&g.vertex_position(&v), &mut out);
        let s = lvl.slot_signs(g.slot_of(&v));
        assert_eq!(out, [s[0] as f32, s[1] as f32]);

        let ones = LevelEmbedding::from_signs(g, 2, vec![1; 250]);
        ones.interpolate(&[0.37, 0.91, 0.05], &mut out);
        assert_eq!(out, [1.0, 1.0]);

        // cell center: plain mean of the eight corners
        let pos = [1.5 / 4.0, 0.5 / 4.0, 2.5 / 4.0];
        lvl.interpolate(&pos, &mut out);
        let mut mean = [0f64; 2];
        for c in 0..8u32 {
            let v = [1 + (c & 1), (c >> 1) & 1, 2 + ((c >> 2) & 1)];
            let s = lvl.slot_signs(g.slot_of(&v));
            mean[0] += s[0] as f64 / 8.0;
            mean[1] += s[1] as f64 / 8.0;
        }
        assert!((out[0] as f64 - mean[0]).abs() < 1e-6);
        assert!((out[1] as f64 - mean[1]).abs() < 1e-6);
    }

    #[test]
    fn binarize_and_ste() {
        assert_eq!(binarize(0.3), 1);
        assert_eq!(binarize(-0.7), -1);
        assert_eq!(binarize(0.0), 1);
        assert_eq!(binarize(-0.0), 1);
        // surrogate is clamp(x, -1, 1); its central difference is 1 inside, 0 outside
        let surrogate = |x: f64| x.clamp(-1.0, 1.0);
        let h = 1e-6;
        for (x, up) in [(0.5f32, 0.8f32), (1.5, 0.8), (-0.2, -2.0), (-3.0, 1.0)] {
            let fd = (surrogate(x as f64 + h) - surrogate(x as f64 - h)) / (2.0 * h);
            assert!((ste_grad(x, up) as f64 - fd * up as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn update_latent_refreshes_signs() {
        let g = LevelGeometry::new(2, 3, 15);
        let mut lvl = LevelEmbedding::from_latent(g, 1, vec![0.1; 16]);
        lvl.update_latent(|l| l[5] = -2.0);
        assert_eq!(lvl.signs()[5], -1);
        assert_eq!(lvl.signs()[4], 1);
    }

    proptest::proptest! {
        #[test]
        fn weights_are_convex(x in 0.0f64..=1.0, y in 0.0f64..=1.0, z in 0.0f64..=1.0, res in 1u32..40, rank in 2usize..=3) {
            let g = LevelGeometry::new(rank, res, 10);
            let c = g.corners(&[x, y, z]);
            let sum: f64 = c.weights[..c.len].iter().sum();
            proptest::prop_assert!((sum - 1.0).abs() < 1e-12);
            proptest::prop_assert!(c.weights[..c.len].iter().all(|&w| w >= 0.0));
        }

        #[test]
        fn forward_always_binary(latent in proptest::collection::vec(-1e6f32..1e6, 1..64)) {
            for x in latent {
                let s = binarize(x);
                proptest::prop_assert!(s == 1 || s == -1);
            }
        }
    }
}
