//! Probability prediction for binarized tables.
//!
//! Each 3D level `l > 1` is predicted from features interpolated out of up to
//! `L_c` coarser levels plus the level's +1 frequency; tri-plane levels
//! additionally see the projected voxel features of the finest 3D level.
//! Per-vertex predictions of colliding vertices are blended into one
//! probability per slot with the hash-fusion weights.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::entropy::clamp_prob;
use crate::error::{Error, Result};
use crate::grid::{interpolate, PlaneAxis, SignTable};
use crate::nn::{Activation, DenseNet};
use crate::occupancy::{LevelFusion, Pvf};

pub const FUSER_HIDDEN: usize = 32;
/// Slots per work item when predicting a whole level.
const CHUNK_SLOTS: usize = 2048;

/// Which context models are switched off in favour of the per-level
/// frequency.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    #[default]
    #[serde(rename = "none")]
    None,
    /// Level-wise context of the tri-plane levels.
    #[serde(rename = "2d")]
    Planes,
    /// Level-wise context of the 3D levels.
    #[serde(rename = "3d")]
    Volume,
    /// Projected-voxel (dimension-wise) context of the tri-plane levels.
    #[serde(rename = "dim")]
    Dimension,
    #[serde(rename = "all")]
    All,
}

impl Ablation {
    pub fn code(self) -> u8 {
        match self {
            Ablation::None => 0,
            Ablation::Planes => 1,
            Ablation::Volume => 2,
            Ablation::Dimension => 3,
            Ablation::All => 4,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Ablation::None,
            1 => Ablation::Planes,
            2 => Ablation::Volume,
            3 => Ablation::Dimension,
            4 => Ablation::All,
            _ => return Err(Error::Corrupt(format!("ablation code {c}"))),
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Ablation::None,
            "2d" => Ablation::Planes,
            "3d" => Ablation::Volume,
            "dim" => Ablation::Dimension,
            "all" => Ablation::All,
            _ => {
                return Err(Error::Unknown {
                    what: "ablation",
                    name: s.into(),
                })
            }
        })
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::None => "none",
            Ablation::Planes => "2d",
            Ablation::Volume => "3d",
            Ablation::Dimension => "dim",
            Ablation::All => "all",
        })
    }
}

/// How one level's probabilities are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CodingMode {
    /// Every feature coded with the level's +1 frequency.
    Frequency,
    Volume { context_levels: usize },
    Plane { context_levels: usize, pvf: bool },
}

impl CodingMode {
    pub fn input_width(self, feature_dim: usize) -> usize {
        match self {
            CodingMode::Frequency => 0,
            CodingMode::Volume { context_levels } => feature_dim * context_levels + 1,
            CodingMode::Plane { context_levels, pvf } => {
                feature_dim * context_levels + 1 + if pvf { feature_dim } else { 0 }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextConfig {
    pub feature_dim: usize,
    /// Number of previous levels used as context (`L_c`).
    pub context_levels: usize,
    /// First 3D level (1-based) coded with the frequency baseline (`L_d`).
    pub disable_from: usize,
    pub ablation: Ablation,
    pub volume_levels: usize,
    pub plane_levels: usize,
}

impl ContextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_levels == 0 {
            return Err(Error::Config("context_levels must be at least 1".into()));
        }
        if self.disable_from == 0 || self.disable_from > self.volume_levels + 1 {
            return Err(Error::Config(format!(
                "disable_from must be in 1..={}, got {}",
                self.volume_levels + 1,
                self.disable_from
            )));
        }
        Ok(())
    }

    /// Mode of 3D level `level` (0-based).
    pub fn volume_mode(&self, level: usize) -> CodingMode {
        let off = matches!(self.ablation, Ablation::Volume | Ablation::All);
        if level == 0 || off || level + 1 >= self.disable_from {
            CodingMode::Frequency
        } else {
            CodingMode::Volume {
                context_levels: self.context_levels.min(level),
            }
        }
    }

    /// Mode of tri-plane level `level` (0-based); identical for all planes.
    pub fn plane_mode(&self, level: usize) -> CodingMode {
        let ctx = if matches!(self.ablation, Ablation::Planes | Ablation::All) {
            0
        } else {
            self.context_levels.min(level)
        };
        let pvf = !matches!(self.ablation, Ablation::Dimension | Ablation::All);
        if ctx == 0 && !pvf {
            CodingMode::Frequency
        } else {
            CodingMode::Plane {
                context_levels: ctx,
                pvf,
            }
        }
    }

    /// Distinct fuser modes in serialization order.
    pub fn fuser_modes(&self) -> Vec<CodingMode> {
        let mut modes: Vec<CodingMode> = (0..self.volume_levels)
            .map(|l| self.volume_mode(l))
            .chain((0..self.plane_levels).map(|l| self.plane_mode(l)))
            .filter(|m| *m != CodingMode::Frequency)
            .collect();
        modes.sort();
        modes.dedup();
        modes
    }
}

/// Tiny network mapping a context vector to per-dimension probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextFuser {
    pub net: DenseNet<f32>,
}

impl ContextFuser {
    /// Three affine layers with hidden width 32 for 3D levels, a single
    /// affine layer for tri-plane levels; sigmoid output in both cases.
    pub fn zeros(mode: CodingMode, feature_dim: usize) -> Self {
        let width = mode.input_width(feature_dim);
        let net = match mode {
            CodingMode::Volume { .. } => DenseNet::zeros(
                &[width, FUSER_HIDDEN, FUSER_HIDDEN, feature_dim],
                &[Activation::LeakyRelu, Activation::LeakyRelu, Activation::Sigmoid],
            ),
            CodingMode::Plane { .. } => DenseNet::zeros(&[width, feature_dim], &[Activation::Sigmoid]),
            CodingMode::Frequency => panic!("frequency mode has no fuser"),
        };
        ContextFuser { net }
    }

    pub fn init<R: Rng>(mode: CodingMode, feature_dim: usize, rng: &mut R) -> Self {
        let z = Self::zeros(mode, feature_dim);
        ContextFuser {
            net: DenseNet::kaiming(z.net.widths(), z.net.activations(), rng),
        }
    }

    pub fn input_width(&self) -> usize {
        self.net.input_width()
    }

    /// Forward pass over a batch of context rows; outputs are raw sigmoid
    /// values in single precision.
    pub fn predict(&self, rows: &[f32], batch: usize) -> Result<Vec<f32>> {
        self.net.predict(rows, batch)
    }
}

/// All context fusers of a model, keyed by coding mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextModel {
    pub config: ContextConfig,
    fusers: BTreeMap<ModeKey, ContextFuser>,
}

/// Serializable stand-in for [`CodingMode`] as a map key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
struct ModeKey(u8, u8, bool);

impl From<CodingMode> for ModeKey {
    fn from(m: CodingMode) -> Self {
        match m {
            CodingMode::Frequency => ModeKey(0, 0, false),
            CodingMode::Volume { context_levels } => ModeKey(1, context_levels as u8, false),
            CodingMode::Plane { context_levels, pvf } => ModeKey(2, context_levels as u8, pvf),
        }
    }
}

impl ContextModel {
    pub fn init<R: Rng>(config: ContextConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let fusers = config
            .fuser_modes()
            .into_iter()
            .map(|m| (ModeKey::from(m), ContextFuser::init(m, config.feature_dim, rng)))
            .collect();
        Ok(ContextModel { config, fusers })
    }

    pub fn zeros(config: ContextConfig) -> Result<Self> {
        config.validate()?;
        let fusers = config
            .fuser_modes()
            .into_iter()
            .map(|m| (ModeKey::from(m), ContextFuser::zeros(m, config.feature_dim)))
            .collect();
        Ok(ContextModel { config, fusers })
    }

    pub fn fuser(&self, mode: CodingMode) -> Option<&ContextFuser> {
        self.fusers.get(&mode.into())
    }

    pub fn fuser_mut(&mut self, mode: CodingMode) -> Option<&mut ContextFuser> {
        self.fusers.get_mut(&mode.into())
    }

    pub fn fuser_count(&self) -> usize {
        self.fusers.len()
    }

    pub fn volume_fuser_count(&self) -> usize {
        self.fusers.keys().filter(|k| k.0 == 1).count()
    }

    pub fn param_count(&self) -> usize {
        self.fusers.values().map(|f| f.net.param_count()).sum()
    }

    /// All fuser parameters in serialization order.
    pub fn params(&self) -> Vec<f32> {
        self.fusers.values().flat_map(|f| f.net.params().iter().copied()).collect()
    }

    pub fn set_params(&mut self, params: &[f32]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::WidthMismatch {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut at = 0;
        for f in self.fusers.values_mut() {
            let n = f.net.param_count();
            f.net.set_params(&params[at..at + n])?;
            at += n;
        }
        Ok(())
    }

    pub fn modes(&self) -> Vec<CodingMode> {
        self.config.fuser_modes()
    }
}

/// +1 frequency over the valid slots of a level; `None` when nothing is valid.
pub fn frequency(signs: &[i8], feature_dim: usize, valid: impl Fn(usize) -> bool) -> Option<f64> {
    let mut plus = 0usize;
    let mut n = 0usize;
    for (slot, row) in signs.chunks_exact(feature_dim).enumerate() {
        if valid(slot) {
            n += feature_dim;
            plus += row.iter().filter(|&&s| s > 0).count();
        }
    }
    (n > 0).then(|| plus as f64 / n as f64)
}

/// Frequencies travel as 16-bit fixed point.
pub fn quantize_frequency(f: f64) -> u16 {
    (f.clamp(0.0, 1.0) * 65535.0).round() as u16
}

pub fn dequantize_frequency(q: u16) -> f64 {
    q as f64 / 65535.0
}

/// Everything needed to predict one level.
pub struct LevelInputs<'a, S> {
    /// All levels of the grid family being coded (3D levels or one plane).
    pub levels: &'a [S],
    pub level: usize,
    pub fusion: &'a LevelFusion,
    pub frequency: f64,
    /// Projected features and plane, for tri-plane levels.
    pub pvf: Option<(&'a Pvf, PlaneAxis)>,
}

impl<S> Clone for LevelInputs<'_, S> {
    fn clone(&self) -> Self {
        LevelInputs { ..*self }
    }
}

impl<S> Copy for LevelInputs<'_, S> {}

/// Context vector of a vertex at normalized `pos` on `level`, reading only
/// levels `level - context_levels .. level` of `levels`.
pub fn write_context<S: SignTable>(
    mode: CodingMode,
    levels: &[S],
    level: usize,
    frequency: f64,
    pvf: Option<(&Pvf, PlaneAxis)>,
    pos: &[f64; 3],
    out: &mut [f32],
) {
    let (ctx, pvf_on, query): (usize, bool, &[f64]) = match mode {
        CodingMode::Volume { context_levels } => (context_levels, false, &pos[..]),
        CodingMode::Plane { context_levels, pvf } => (context_levels, pvf, &pos[..2]),
        CodingMode::Frequency => return,
    };
    let f = levels[level].feature_dim();
    let mut at = 0;
    for j in level - ctx..level {
        interpolate(&levels[j], query, &mut out[at..at + f]);
        at += f;
    }
    out[at] = frequency as f32;
    at += 1;
    if pvf_on {
        let (pvf, axis) = pvf.expect("tri-plane mode needs projected features");
        pvf.sample(axis, &[pos[0], pos[1]], &mut out[at..at + f]);
    }
}

/// Context rows for a set of slots: one row per contributing vertex, slots in
/// the given order, vertices in lattice order.
pub struct ContextBatch {
    pub rows: Vec<f32>,
    pub width: usize,
    /// Row range of each requested slot.
    pub spans: Vec<(usize, usize)>,
    /// Fusion weight of each row.
    pub weights: Vec<f64>,
}

impl ContextBatch {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

pub fn gather_contexts<S: SignTable>(mode: CodingMode, inputs: &LevelInputs<'_, S>, slots: &[usize]) -> ContextBatch {
    let f = inputs.levels[inputs.level].feature_dim();
    let width = mode.input_width(f);
    let geom = inputs.fusion.geometry();
    let mut rows = Vec::new();
    let mut spans = Vec::with_capacity(slots.len());
    let mut weights = Vec::new();
    let mut buf = vec![0f32; width];
    for &slot in slots {
        let (verts, w) = inputs.fusion.slot(slot);
        let start = weights.len();
        for (&v, &wk) in verts.iter().zip(w) {
            let pos = geom.vertex_position(&geom.vertex_at(v as usize));
            write_context(
                mode,
                inputs.levels,
                inputs.level,
                inputs.frequency,
                inputs.pvf,
                &pos,
                &mut buf,
            );
            rows.extend_from_slice(&buf);
            weights.push(wk);
        }
        spans.push((start, weights.len()));
    }
    ContextBatch {
        rows,
        width,
        spans,
        weights,
    }
}

/// Hash fusion: per-slot weighted sum of per-vertex probabilities.
pub fn fuse(batch: &ContextBatch, vertex_probs: &[f32], feature_dim: usize) -> Vec<f64> {
    let mut out = vec![0f64; batch.spans.len() * feature_dim];
    for (i, &(a, b)) in batch.spans.iter().enumerate() {
        let dst = &mut out[i * feature_dim..(i + 1) * feature_dim];
        for r in a..b {
            let w = batch.weights[r];
            for (d, &p) in dst.iter_mut().zip(&vertex_probs[r * feature_dim..(r + 1) * feature_dim]) {
                *d += w * p as f64;
            }
        }
    }
    out
}

/// Clamped coding probabilities (`feature_dim` per slot) of the given slots.
pub fn slot_probabilities<S: SignTable + Sync>(
    model: &ContextModel,
    mode: CodingMode,
    inputs: &LevelInputs<'_, S>,
    slots: &[usize],
) -> Result<Vec<f64>> {
    let f = model.config.feature_dim;
    if let Some(&bad) = slots.iter().find(|&&s| !inputs.fusion.is_valid(s)) {
        return Err(Error::InvalidSlot {
            level: inputs.level,
            slot: bad,
        });
    }
    if mode == CodingMode::Frequency {
        return Ok(vec![clamp_prob(inputs.frequency); slots.len() * f]);
    }
    let fuser = model
        .fuser(mode)
        .ok_or_else(|| Error::Config(format!("no fuser for {mode:?}")))?;
    let chunks: Vec<Result<Vec<f64>>> = slots
        .par_chunks(CHUNK_SLOTS)
        .map(|chunk| {
            let batch = gather_contexts(mode, inputs, chunk);
            let probs = fuser.predict(&batch.rows, batch.len())?;
            Ok(fuse(&batch, &probs, f).into_iter().map(clamp_prob).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(slots.len() * f);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Context vector of one vertex (the `F·L_c + 1` layout for 3D levels).
pub fn assemble_level_context<S: SignTable>(
    vertex: [u32; 3],
    level: usize,
    levels: &[S],
    frequency: f64,
    context_levels: usize,
) -> Result<Vec<f32>> {
    if level == 0 {
        return Err(Error::Config("the first level has no coarser context".into()));
    }
    let ctx = context_levels.min(level);
    let mode = CodingMode::Volume { context_levels: ctx };
    let geom = levels[level].geometry();
    if !geom.contains(&vertex) {
        return Err(Error::VertexOutOfBounds {
            vertex,
            resolution: geom.resolution,
        });
    }
    let pos = geom.vertex_position(&vertex);
    let mut out = vec![0f32; mode.input_width(levels[level].feature_dim())];
    write_context(mode, levels, level, frequency, None, &pos, &mut out);
    Ok(out)
}

/// Clamped per-vertex probabilities from one context vector.
pub fn predict_vertex(fuser: &ContextFuser, context: &[f32]) -> Result<Vec<f64>> {
    if context.len() != fuser.input_width() {
        return Err(Error::WidthMismatch {
            expected: fuser.input_width(),
            got: context.len(),
        });
    }
    Ok(fuser.predict(context, 1)?.into_iter().map(|p| clamp_prob(p as f64)).collect())
}

/// Hash fusion of already computed vertex probabilities.
pub fn fuse_slot(weights: &[f64], vertex_probs: &[Vec<f64>]) -> Result<Vec<f64>> {
    if weights.is_empty() || weights.len() != vertex_probs.len() {
        return Err(Error::InvalidSlot { level: 0, slot: 0 });
    }
    let f = vertex_probs[0].len();
    let mut out = vec![0.0; f];
    for (w, p) in weights.iter().zip(vertex_probs) {
        for (o, &v) in out.iter_mut().zip(p) {
            *o += w * v;
        }
    }
    Ok(out.into_iter().map(clamp_prob).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::PROB_EPS;
    use crate::grid::{LevelEmbedding, LevelGeometry};
    use crate::occupancy::{OccupancyGrid, ValidityCriterion};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::cell::RefCell;

    fn config(ablation: Ablation) -> ContextConfig {
        ContextConfig {
            feature_dim: 2,
            context_levels: 3,
            disable_from: 6,
            ablation,
            volume_levels: 5,
            plane_levels: 3,
        }
    }

    #[test]
    fn modes_follow_fallback_rule() {
        let c = config(Ablation::None);
        assert_eq!(c.volume_mode(0), CodingMode::Frequency);
        assert_eq!(c.volume_mode(1), CodingMode::Volume { context_levels: 1 });
        assert_eq!(c.volume_mode(3), CodingMode::Volume { context_levels: 3 });
        assert_eq!(c.volume_mode(4), CodingMode::Volume { context_levels: 3 });
        assert_eq!(c.plane_mode(0), CodingMode::Plane { context_levels: 0, pvf: true });
        assert_eq!(CodingMode::Volume { context_levels: 1 }.input_width(2), 3);
        assert_eq!(CodingMode::Volume { context_levels: 3 }.input_width(2), 7);
        assert_eq!(CodingMode::Plane { context_levels: 2, pvf: true }.input_width(2), 7);

        let mut d = c.clone();
        d.disable_from = 3;
        assert_eq!(d.volume_mode(1), CodingMode::Volume { context_levels: 1 });
        assert_eq!(d.volume_mode(2), CodingMode::Frequency);

        let all = config(Ablation::All);
        assert!(all.fuser_modes().is_empty());
        let dim = config(Ablation::Dimension);
        assert_eq!(dim.plane_mode(0), CodingMode::Frequency);
        assert_eq!(dim.plane_mode(2), CodingMode::Plane { context_levels: 2, pvf: false });
    }

    #[test]
    fn fusers_shared_per_context_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = ContextModel::init(config(Ablation::None), &mut rng).unwrap();
        // effective widths 1, 2, 3 for levels 2..5
        assert_eq!(m.volume_fuser_count(), 3);
        assert_eq!(m.fuser_count(), 3 + 3);
        let p = m.params();
        let mut z = ContextModel::zeros(config(Ablation::None)).unwrap();
        z.set_params(&p).unwrap();
        assert_eq!(z, m);
    }

    #[test]
    fn context_layout() {
        let geoms: Vec<_> = [2u32, 4, 8, 16].iter().map(|&r| LevelGeometry::new(3, r, 20)).collect();
        let levels: Vec<_> = geoms
            .iter()
            .map(|g| LevelEmbedding::from_signs(*g, 2, vec![1; g.table_size * 2]))
            .collect();
        let c = assemble_level_context([3, 1, 0], 1, &levels, 0.5, 3).unwrap();
        assert_eq!(c.len(), 3);
        let c = assemble_level_context([3, 1, 0], 3, &levels, 0.5, 3).unwrap();
        assert_eq!(c, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.5]);
        assert!(assemble_level_context([0, 0, 0], 0, &levels, 0.5, 3).is_err());
    }

    #[test]
    fn zero_fuser_is_half_and_clamps() {
        let mode = CodingMode::Volume { context_levels: 2 };
        let mut fuser = ContextFuser::zeros(mode, 4);
        let ctx = vec![0.3f32; 9];
        assert_eq!(predict_vertex(&fuser, &ctx).unwrap(), vec![0.5; 4]);
        assert!(predict_vertex(&fuser, &ctx[..8]).is_err());
        let n = fuser.net.param_count();
        let p = fuser.net.params_mut();
        // last four parameters are the output biases
        p[n - 4] = 100.0;
        p[n - 3] = -100.0;
        let out = predict_vertex(&fuser, &ctx).unwrap();
        assert_eq!(out[0], 1.0 - PROB_EPS);
        assert_eq!(out[1], PROB_EPS);

        let plane = CodingMode::Plane { context_levels: 1, pvf: true };
        let fuser = ContextFuser::zeros(plane, 2);
        assert_eq!(fuser.input_width(), 5);
        assert_eq!(predict_vertex(&fuser, &[0.0; 5]).unwrap(), vec![0.5; 2]);
    }

    #[test]
    fn golden_fuser_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mode = CodingMode::Volume { context_levels: 1 };
        let fuser = ContextFuser::init(mode, 2, &mut rng);
        let a = predict_vertex(&fuser, &[0.5, -1.0, 0.25]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let again = ContextFuser::init(mode, 2, &mut rng);
        assert_eq!(a, predict_vertex(&again, &[0.5, -1.0, 0.25]).unwrap());
        // independent double-precision evaluation of the same parameters
        let net64: DenseNet<f64> = fuser.net.cast();
        let b = net64.predict(&[0.5, -1.0, 0.25], 1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn fusion_arithmetic() {
        assert_eq!(fuse_slot(&[1.0], &[vec![0.3, 0.7]]).unwrap(), vec![0.3, 0.7]);
        let p = fuse_slot(&[0.5, 0.5], &[vec![0.2], vec![0.6]]).unwrap();
        assert!((p[0] - 0.4).abs() < 1e-15);
        assert!(fuse_slot(&[], &[]).is_err());
    }

    #[test]
    fn frequency_counts() {
        assert_eq!(frequency(&[1, 1, -1, -1], 1, |_| true), Some(0.5));
        assert_eq!(frequency(&[1, 1, 1, 1], 2, |_| true), Some(1.0));
        assert_eq!(frequency(&[1, -1, 1, 1], 2, |s| s == 0), Some(0.5));
        assert_eq!(frequency(&[1, -1], 1, |_| false), None);
        assert_eq!(quantize_frequency(1.0), 65535);
        assert_eq!(dequantize_frequency(quantize_frequency(0.0)), 0.0);
    }

    struct Tracked<'a> {
        inner: &'a LevelEmbedding,
        index: usize,
        log: &'a RefCell<Vec<usize>>,
    }

    impl SignTable for Tracked<'_> {
        fn geometry(&self) -> &LevelGeometry {
            self.inner.geometry()
        }
        fn feature_dim(&self) -> usize {
            self.inner.feature_dim()
        }
        fn slot_signs(&self, slot: usize) -> &[i8] {
            self.log.borrow_mut().push(self.index);
            self.inner.slot_signs(slot)
        }
    }

    #[test]
    fn predictions_read_only_coarser_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let occ = OccupancyGrid::from_fn(8, |c| c[0] < 5);
        let levels: Vec<LevelEmbedding> = [4u32, 6, 9, 13, 19]
            .iter()
            .map(|&r| LevelEmbedding::random(LevelGeometry::new(3, r, 9), 2, &mut rng))
            .collect();
        let model = ContextModel::init(config(Ablation::None), &mut rng).unwrap();
        for level in 1..levels.len() {
            let log = RefCell::new(Vec::new());
            let tracked: Vec<Tracked> = levels
                .iter()
                .enumerate()
                .map(|(index, inner)| Tracked {
                    inner,
                    index,
                    log: &log,
                })
                .collect();
            let fusion = LevelFusion::volume(*levels[level].geometry(), &occ, ValidityCriterion::AreaOfEffect);
            let slots: Vec<usize> = fusion.valid_slots().collect();
            let inputs = LevelInputs {
                levels: &tracked,
                level,
                fusion: &fusion,
                frequency: 0.5,
                pvf: None,
            };
            let mode = model.config.volume_mode(level);
            let batch = gather_contexts(mode, &inputs, &slots);
            assert!(!batch.is_empty());
            let touched = log.borrow();
            assert!(!touched.is_empty());
            let lo = level.saturating_sub(3);
            assert!(touched.iter().all(|&i| i < level && i >= lo), "level {level}");
        }
    }

    #[test]
    fn slot_probabilities_match_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let occ = OccupancyGrid::from_fn(6, |c| (c[0] + c[1] + c[2]) % 3 == 0);
        let levels: Vec<LevelEmbedding> = [3u32, 7, 12]
            .iter()
            .map(|&r| LevelEmbedding::random(LevelGeometry::new(3, r, 7), 2, &mut rng))
            .collect();
        let model = ContextModel::init(config(Ablation::None), &mut rng).unwrap();
        let level = 2;
        let fusion = LevelFusion::volume(*levels[level].geometry(), &occ, ValidityCriterion::AreaOfEffect);
        let slots: Vec<usize> = fusion.valid_slots().collect();
        let inputs = LevelInputs {
            levels: &levels,
            level,
            fusion: &fusion,
            frequency: 0.4,
            pvf: None,
        };
        let mode = model.config.volume_mode(level);
        let fast = slot_probabilities(&model, mode, &inputs, &slots).unwrap();
        let fuser = model.fuser(mode).unwrap();
        let geom = levels[level].geometry();
        for (i, &slot) in slots.iter().enumerate() {
            let (verts, w) = fusion.slot(slot);
            let mut probs = Vec::new();
            for &v in verts {
                let ctx = assemble_level_context(geom.vertex_at(v as usize), level, &levels, 0.4, 3).unwrap();
                let raw: Vec<f64> = fuser.predict(&ctx, 1).unwrap().iter().map(|&p| p as f64).collect();
                probs.push(raw);
            }
            let mut expect = [0f64; 2];
            for (wk, p) in w.iter().zip(&probs) {
                expect[0] += wk * p[0];
                expect[1] += wk * p[1];
            }
            assert_eq!(fast[2 * i], clamp_prob(expect[0]));
            assert_eq!(fast[2 * i + 1], clamp_prob(expect[1]));
        }
        let invalid = (0..fusion.num_slots()).find(|&s| !fusion.is_valid(s));
        if let Some(bad) = invalid {
            assert!(matches!(
                slot_probabilities(&model, mode, &inputs, &[bad]),
                Err(Error::InvalidSlot { .. })
            ));
        }
    }
}
