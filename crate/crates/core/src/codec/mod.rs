//! Lossless coding of a trained field's sign tables together with the
//! networks and occupancy grid needed to decode them.
//!
//! Tables are coded in a fixed order: 3D levels coarse to fine, then the xy,
//! xz and yz planes, each coarse to fine. Only valid slots are coded. The
//! probability of every entry comes from the context model evaluated on
//! already decoded tables, so the decoder reproduces it exactly.

pub mod bitstream;
pub mod quant;
pub mod range;

use rayon::prelude::*;

use crate::context::{dequantize_frequency, frequency, quantize_frequency, slot_probabilities, ContextModel, LevelInputs};
use crate::entropy::bits;
use crate::error::{Error, Result};
use crate::field::model::{FieldModel, TableId, Topology};
use crate::grid::{LevelEmbedding, PlaneAxis};
use crate::nn::{Activation, DenseNet};
use crate::occupancy::{LevelFusion, OccupancyGrid, Pvf};

pub use bitstream::{Bitstream, SectionSizes};
use quant::{quantize_mlp, QuantizedMlp};
use range::{decode_signs, encode_signs, quantize_prob};

#[derive(Clone, Debug, PartialEq)]
pub struct EncodeOptions {
    pub mlp_bits: u8,
    /// Stored in the header for reference only.
    pub lambda: f64,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions {
            mlp_bits: quant::DEFAULT_MLP_BITS,
            lambda: 0.0,
        }
    }
}

/// Per-table coding statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct TableReport {
    pub name: String,
    pub valid_slots: usize,
    /// Coded payload size, excluding the length prefix.
    pub bytes: usize,
    /// Estimated cost from the unquantized probabilities.
    pub estimated_bits: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodeReport {
    pub total_bytes: usize,
    pub sections: SectionSizes,
    pub tables: Vec<TableReport>,
}

impl EncodeReport {
    pub fn volume_bytes(&self, levels: usize) -> usize {
        self.sections.levels[..levels].iter().sum()
    }

    pub fn plane_bytes(&self, levels: usize) -> usize {
        self.sections.levels[levels..].iter().sum()
    }

    /// Bytes spent on sign tables, length prefixes included.
    pub fn embedding_bytes(&self) -> usize {
        self.sections.levels.iter().sum()
    }
}

fn table_name(id: TableId) -> String {
    match id {
        TableId::Volume(l) => format!("3d/{}", l + 1),
        TableId::Plane(a, l) => format!("{}/{}", a.name(), l + 1),
    }
}

/// Probabilities of every valid entry of one table, given the tables it may
/// read from.
struct LevelCoder<'a> {
    context: &'a ContextModel,
    topology: &'a Topology,
}

impl LevelCoder<'_> {
    fn probabilities(
        &self,
        id: TableId,
        family: &[LevelEmbedding],
        freq: u16,
        pvf: Option<&Pvf>,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let fusion: &LevelFusion = self.topology.fusion(id);
        let slots: Vec<usize> = fusion.valid_slots().collect();
        let (level, mode, pvf) = match id {
            TableId::Volume(l) => (l, self.context.config.volume_mode(l), None),
            TableId::Plane(a, l) => (l, self.context.config.plane_mode(l), pvf.map(|p| (p, a))),
        };
        let inputs = LevelInputs {
            levels: family,
            level,
            fusion,
            frequency: dequantize_frequency(freq),
            pvf,
        };
        let probs = slot_probabilities(self.context, mode, &inputs, &slots)?;
        Ok((slots, probs))
    }
}

fn valid_signs(table: &LevelEmbedding, slots: &[usize]) -> Vec<i8> {
    let f = table.feature_dim();
    slots
        .iter()
        .flat_map(|&s| table.signs()[s * f..(s + 1) * f].iter().copied())
        .collect()
}

fn encode_occupancy(occ: &OccupancyGrid) -> (u16, Vec<u8>) {
    let frac = occ.occupied_count() as f64 / occ.cells().len() as f64;
    let p = quantize_prob(frac);
    let signs: Vec<i8> = occ.cells().iter().map(|&c| if c { 1 } else { -1 }).collect();
    let probs = vec![p; signs.len()];
    (p, encode_signs(&signs, &probs))
}

fn decode_occupancy(resolution: u16, p: u16, data: &[u8]) -> Result<OccupancyGrid> {
    let n = (resolution as usize).pow(3);
    let signs = decode_signs(data, &vec![p.max(1); n])?;
    OccupancyGrid::new(resolution as u32, signs.into_iter().map(|s| s > 0).collect())
}

fn net_activations(layers: usize) -> Vec<Activation> {
    let mut acts = vec![Activation::LeakyRelu; layers - 1];
    acts.push(Activation::Identity);
    acts
}

/// Table ids in coding order.
fn coding_order(volume_levels: usize, plane_levels: usize) -> Vec<TableId> {
    let mut ids: Vec<TableId> = (0..volume_levels).map(TableId::Volume).collect();
    for axis in PlaneAxis::ALL {
        ids.extend((0..plane_levels).map(|l| TableId::Plane(axis, l)));
    }
    ids
}

/// Compresses `model`. The result is decoded again before returning and any
/// disagreement with the encoder is reported as [`Error::Verification`].
pub fn encode_model(model: &FieldModel, options: &EncodeOptions) -> Result<(Vec<u8>, EncodeReport)> {
    let config = &model.config;
    config.validate()?;
    let topology = Topology::build(config, &model.occupancy)?;
    let (volume, planes) = model.decoded_view(&topology);
    let f = config.feature_dim();
    let coder = LevelCoder {
        context: &model.context,
        topology: &topology,
    };

    let ids = coding_order(config.volume.num_levels, config.planes.num_levels);
    let mut frequencies = Vec::with_capacity(ids.len());
    let mut valid_counts = Vec::with_capacity(ids.len());
    let mut level_bytes = Vec::with_capacity(ids.len());
    let mut tables = Vec::with_capacity(ids.len());
    let mut coded_probs: Vec<Vec<u16>> = Vec::with_capacity(ids.len());
    let mut pvf = None;
    for &id in &ids {
        let (family, table) = match id {
            TableId::Volume(l) => (&volume[..], &volume[l]),
            TableId::Plane(a, l) => {
                if pvf.is_none() {
                    pvf = Some(topology.pvf(&volume));
                }
                (&planes[a.index()][..], &planes[a.index()][l])
            }
        };
        let fusion = topology.fusion(id);
        let freq = frequency(table.signs(), f, |s| fusion.is_valid(s)).map_or(0, quantize_frequency);
        let (slots, probs) = coder.probabilities(id, family, freq, pvf.as_ref())?;
        let signs = valid_signs(table, &slots);
        let q: Vec<u16> = probs.iter().map(|&p| quantize_prob(p)).collect();
        let payload = encode_signs(&signs, &q);
        let estimated_bits = signs.iter().zip(&probs).map(|(&s, &p)| bits(p, s)).sum();
        tables.push(TableReport {
            name: table_name(id),
            valid_slots: slots.len(),
            bytes: payload.len(),
            estimated_bits,
        });
        frequencies.push(freq);
        valid_counts.push(slots.len() as u32);
        level_bytes.push(payload);
        coded_probs.push(q);
    }

    let (occupancy_prob, occupancy) = encode_occupancy(&model.occupancy);
    let mlp = quantize_mlp(model.net.params(), options.mlp_bits)?;
    let stream = Bitstream {
        config: config.clone(),
        mlp_bits: options.mlp_bits,
        lambda: options.lambda as f32,
        frequencies,
        valid_counts,
        occupancy_resolution: model.occupancy.resolution() as u16,
        occupancy_prob,
        occupancy,
        fuser_params: model.context.params(),
        mlp_count: mlp.codes.len() as u32,
        mlp,
        levels: level_bytes,
    };
    let (bytes, sections) = stream.to_bytes_with_sizes();

    let (decoded, decoded_probs) = decode_inner(&bytes)?;
    for (i, &id) in ids.iter().enumerate() {
        if decoded_probs[i] != coded_probs[i] {
            let at = decoded_probs[i]
                .iter()
                .zip(&coded_probs[i])
                .position(|(a, b)| a != b)
                .unwrap_or(0);
            return Err(Error::Verification(format!("{} probability {at}", table_name(id))));
        }
        let (a, b) = (decoded.table(id), match id {
            TableId::Volume(l) => &volume[l],
            TableId::Plane(ax, l) => &planes[ax.index()][l],
        });
        if a.signs() != b.signs() {
            return Err(Error::Verification(format!("{} signs", table_name(id))));
        }
    }

    let report = EncodeReport {
        total_bytes: bytes.len(),
        sections,
        tables,
    };
    Ok((bytes, report))
}

pub fn decode_model(bytes: &[u8]) -> Result<FieldModel> {
    decode_inner(bytes).map(|(m, _)| m)
}

/// Decodes a stream, also returning the quantized probabilities used for
/// every table.
fn decode_inner(bytes: &[u8]) -> Result<(FieldModel, Vec<Vec<u16>>)> {
    let stream = Bitstream::from_bytes(bytes)?;
    let config = stream.config.clone();
    let f = config.feature_dim();
    let occupancy = decode_occupancy(stream.occupancy_resolution, stream.occupancy_prob, &stream.occupancy)?;
    let topology = Topology::build(&config, &occupancy).map_err(|e| match e {
        Error::EmptyOccupancy => Error::Corrupt("occupancy grid is empty".into()),
        e => e,
    })?;

    let mut context = ContextModel::zeros(config.context.clone())?;
    if stream.fuser_params.len() != context.param_count() {
        return Err(Error::Corrupt(format!(
            "expected {} fuser parameters, found {}",
            context.param_count(),
            stream.fuser_params.len()
        )));
    }
    context.set_params(&stream.fuser_params)?;
    let widths = config.net_widths();
    let mut net = DenseNet::<f32>::zeros(&widths, &net_activations(widths.len() - 1));
    if stream.mlp.codes.len() != net.param_count() {
        return Err(Error::Corrupt(format!(
            "expected {} network parameters, found {}",
            net.param_count(),
            stream.mlp.codes.len()
        )));
    }
    net.set_params(&dequantize(&stream.mlp))?;

    let blank = |g: &crate::grid::LevelGeometry| LevelEmbedding::from_signs(*g, f, vec![1; g.table_size * f]);
    let mut volume: Vec<LevelEmbedding> = config.volume.geometries()?.iter().map(blank).collect();
    let plane_geoms = config.planes.geometries()?;
    let mut planes: [Vec<LevelEmbedding>; 3] = [(); 3].map(|_| plane_geoms.iter().map(blank).collect());

    let coder = LevelCoder {
        context: &context,
        topology: &topology,
    };
    let ids = coding_order(config.volume.num_levels, config.planes.num_levels);
    let mut all_probs = Vec::with_capacity(ids.len());
    let mut pvf = None;
    for (i, &id) in ids.iter().enumerate() {
        let fusion = topology.fusion(id);
        let expected = fusion.valid_slot_count();
        if stream.valid_counts[i] as usize != expected {
            return Err(Error::Corrupt(format!(
                "{} lists {} coded slots, occupancy implies {expected}",
                table_name(id),
                stream.valid_counts[i]
            )));
        }
        if matches!(id, TableId::Plane(..)) && pvf.is_none() {
            pvf = Some(topology.pvf(&volume));
        }
        let family = match id {
            TableId::Volume(_) => &volume[..],
            TableId::Plane(a, _) => &planes[a.index()][..],
        };
        let (slots, probs) = coder.probabilities(id, family, stream.frequencies[i], pvf.as_ref())?;
        let q: Vec<u16> = probs.par_iter().map(|&p| quantize_prob(p)).collect();
        let signs = decode_signs(&stream.levels[i], &q)?;
        let table = match id {
            TableId::Volume(l) => &mut volume[l],
            TableId::Plane(a, l) => &mut planes[a.index()][l],
        };
        let mut all = table.signs().to_vec();
        for (k, &s) in slots.iter().enumerate() {
            all[s * f..(s + 1) * f].copy_from_slice(&signs[k * f..(k + 1) * f]);
        }
        *table = LevelEmbedding::from_signs(*table.geometry(), f, all);
        all_probs.push(q);
    }

    let model = FieldModel {
        config,
        volume,
        planes,
        net,
        context,
        occupancy,
    };
    Ok((model, all_probs))
}

fn dequantize(q: &QuantizedMlp) -> Vec<f32> {
    q.dequantize()
}
