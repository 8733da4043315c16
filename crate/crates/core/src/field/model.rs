//! The trainable field: 3D hash-grid levels, three tri-plane stacks, the
//! decoder network, the context fusers and the occupancy grid.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::ContextModel;
use crate::error::{Error, Result};
use crate::field::config::ModelConfig;
use crate::grid::{Corners, LevelEmbedding, PlaneAxis, SignTable, LATENT_INIT_SCALE};
use crate::nn::{Activation, DenseNet};
use crate::occupancy::{project_pvf, validity_masks, LevelFusion, OccupancyGrid, Pvf};

/// Positions per work item in batched reconstruction.
const RECON_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldModel {
    pub config: ModelConfig,
    pub volume: Vec<LevelEmbedding>,
    /// Indexed by [`PlaneAxis::index`].
    pub planes: [Vec<LevelEmbedding>; 3],
    pub net: DenseNet<f32>,
    pub context: ContextModel,
    pub occupancy: OccupancyGrid,
}

/// Which table a flat table index refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableId {
    Volume(usize),
    Plane(PlaneAxis, usize),
}

/// Fusion tables derived from the occupancy grid; identical on both sides of
/// the codec.
#[derive(Clone, Debug)]
pub struct Topology {
    pub volume: Vec<LevelFusion>,
    /// One per tri-plane level, shared by the three planes.
    pub planes: Vec<LevelFusion>,
}

impl Topology {
    pub fn build(config: &ModelConfig, occupancy: &OccupancyGrid) -> Result<Self> {
        if occupancy.occupied_count() == 0 {
            return Err(Error::EmptyOccupancy);
        }
        let volume = config
            .volume
            .geometries()?
            .into_iter()
            .map(|g| LevelFusion::volume(g, occupancy, config.validity))
            .collect();
        let planes = config.planes.geometries()?.into_iter().map(LevelFusion::plane).collect();
        Ok(Topology { volume, planes })
    }

    pub fn fusion(&self, id: TableId) -> &LevelFusion {
        match id {
            TableId::Volume(l) => &self.volume[l],
            TableId::Plane(_, l) => &self.planes[l],
        }
    }

    /// Entries over all tables, valid or not (`M`).
    pub fn total_entries(&self, feature_dim: usize) -> usize {
        let v = validity_masks(&self.volume, feature_dim).total_theta;
        let p = validity_masks(&self.planes, feature_dim).total_theta;
        v + 3 * p
    }

    pub fn valid_entries(&self, feature_dim: usize) -> usize {
        let v = validity_masks(&self.volume, feature_dim).valid_theta;
        let p = validity_masks(&self.planes, feature_dim).valid_theta;
        v + 3 * p
    }

    /// Projected features of the finest 3D level of `volume`.
    pub fn pvf<S: SignTable>(&self, volume: &[S]) -> Pvf {
        let last = self.volume.len() - 1;
        project_pvf(&volume[last], self.volume[last].contributing_vertices())
    }
}

impl FieldModel {
    pub fn new<R: Rng>(config: ModelConfig, occupancy: OccupancyGrid, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let f = config.feature_dim();
        let volume = config
            .volume
            .geometries()?
            .into_iter()
            .map(|g| LevelEmbedding::random(g, f, rng))
            .collect();
        let plane_geoms = config.planes.geometries()?;
        let planes = [(); 3].map(|_| {
            plane_geoms
                .iter()
                .map(|&g| LevelEmbedding::random(g, f, rng))
                .collect::<Vec<_>>()
        });
        let widths = config.net_widths();
        let mut acts = vec![Activation::LeakyRelu; widths.len() - 2];
        acts.push(Activation::Identity);
        let net = DenseNet::kaiming(&widths, &acts, rng);
        let context = ContextModel::init(config.context.clone(), rng)?;
        Ok(FieldModel {
            config,
            volume,
            planes,
            net,
            context,
            occupancy,
        })
    }

    pub fn table_ids(&self) -> Vec<TableId> {
        let mut ids: Vec<TableId> = (0..self.volume.len()).map(TableId::Volume).collect();
        for axis in PlaneAxis::ALL {
            ids.extend((0..self.planes[axis.index()].len()).map(|l| TableId::Plane(axis, l)));
        }
        ids
    }

    pub fn table(&self, id: TableId) -> &LevelEmbedding {
        match id {
            TableId::Volume(l) => &self.volume[l],
            TableId::Plane(a, l) => &self.planes[a.index()][l],
        }
    }

    pub fn table_mut(&mut self, id: TableId) -> &mut LevelEmbedding {
        match id {
            TableId::Volume(l) => &mut self.volume[l],
            TableId::Plane(a, l) => &mut self.planes[a.index()][l],
        }
    }

    /// Forces every slot the codec does not transmit to +1, so that the
    /// trained model and its decoded copy agree everywhere.
    pub fn canonicalize(&mut self, topology: &Topology) {
        let f = self.config.feature_dim();
        for id in self.table_ids() {
            let fusion = topology.fusion(id).clone();
            self.table_mut(id).update_latent(|lat| {
                for s in 0..fusion.num_slots() {
                    if !fusion.is_valid(s) {
                        lat[s * f..(s + 1) * f].fill(LATENT_INIT_SCALE);
                    }
                }
            });
        }
    }

    /// Corners of `pos` in every table, in table order.
    pub fn corners(&self, pos: &[f64; 3]) -> Vec<Corners> {
        let mut out: Vec<Corners> = self.volume.iter().map(|t| t.geometry().corners(pos)).collect();
        for axis in PlaneAxis::ALL {
            let q = axis.project(pos);
            out.extend(self.planes[axis.index()].iter().map(|t| t.geometry().corners(&q)));
        }
        out
    }

    /// Concatenated interpolated features at `pos`.
    pub fn features(&self, pos: &[f64; 3], out: &mut [f32]) {
        let f = self.config.feature_dim();
        let mut at = 0;
        for t in &self.volume {
            t.interpolate(pos, &mut out[at..at + f]);
            at += f;
        }
        for axis in PlaneAxis::ALL {
            let q = axis.project(pos);
            for t in &self.planes[axis.index()] {
                t.interpolate(&q, &mut out[at..at + f]);
                at += f;
            }
        }
    }

    /// Predicted channel values (`channels` per position).
    pub fn reconstruct(&self, positions: &[[f64; 3]]) -> Result<Vec<f32>> {
        let width = self.config.net_input_width();
        let chunks: Vec<Result<Vec<f32>>> = positions
            .par_chunks(RECON_CHUNK)
            .map(|chunk| {
                let mut rows = vec![0f32; chunk.len() * width];
                for (p, row) in chunk.iter().zip(rows.chunks_mut(width)) {
                    self.features(p, row);
                }
                self.net.predict(&rows, chunk.len())
            })
            .collect();
        let mut out = Vec::with_capacity(positions.len() * self.config.channels);
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    /// Fails with [`Error::UndecodableSlot`] if reconstructing at any of the
    /// positions would read a 3D slot the codec does not transmit.
    pub fn audit_queries(&self, topology: &Topology, positions: &[[f64; 3]]) -> Result<()> {
        let first_bad = positions.par_iter().find_map_first(|p| {
            for (l, t) in self.volume.iter().enumerate() {
                for (slot, _) in t.geometry().corners(p).iter() {
                    if !topology.volume[l].is_valid(slot) {
                        return Some((l, slot));
                    }
                }
            }
            None
        });
        match first_bad {
            Some((level, slot)) => Err(Error::UndecodableSlot { level, slot }),
            None => Ok(()),
        }
    }

    /// Sign tables as the decoder will see them: untransmitted slots are +1.
    pub fn decoded_view(&self, topology: &Topology) -> (Vec<LevelEmbedding>, [Vec<LevelEmbedding>; 3]) {
        let f = self.config.feature_dim();
        let view = |t: &LevelEmbedding, fusion: &LevelFusion| {
            let mut signs = t.signs().to_vec();
            for s in 0..fusion.num_slots() {
                if !fusion.is_valid(s) {
                    signs[s * f..(s + 1) * f].fill(1);
                }
            }
            LevelEmbedding::from_signs(*t.geometry(), f, signs)
        };
        let volume = self
            .volume
            .iter()
            .zip(&topology.volume)
            .map(|(t, fu)| view(t, fu))
            .collect();
        let planes = PlaneAxis::ALL.map(|a| {
            self.planes[a.index()]
                .iter()
                .zip(&topology.planes)
                .map(|(t, fu)| view(t, fu))
                .collect()
        });
        (volume, planes)
    }
}

/// Cell centers of a `resolution`³ lattice that fall in occupied cells.
pub fn eval_positions(occupancy: &OccupancyGrid, resolution: u32) -> Vec<[f64; 3]> {
    let r = resolution as f64;
    let mut out = Vec::new();
    for z in 0..resolution {
        for y in 0..resolution {
            for x in 0..resolution {
                let p = [(x as f64 + 0.5) / r, (y as f64 + 0.5) / r, (z as f64 + 0.5) / r];
                if occupancy.contains_point(&p) {
                    out.push(p);
                }
            }
        }
    }
    out
}
