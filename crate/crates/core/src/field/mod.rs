//! Neural field on top of the binarized grids: synthetic targets, the model,
//! training, evaluation and rate-distortion sweeps.

pub mod config;
pub mod model;
pub mod target;
pub mod train;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::codec::{decode_model, encode_model, EncodeOptions};
use crate::error::Result;

pub use config::{ModelConfig, TrainConfig};
pub use model::{eval_positions, FieldModel, TableId, Topology};
pub use target::{synth_field, FieldKind, TargetField};
pub use train::{init_model, refit_context, train, write_train_log, TrainLogEntry, TrainOutcome, Trainer, Updates};

/// Saved model together with the configuration that produced it. Decoded
/// streams carry no run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: Option<TrainConfig>,
    pub model: FieldModel,
}

const CHECKPOINT_MAGIC: [u8; 4] = *b"CNCM";

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        bincode::serialize_into(&mut out, self)?;
        Ok(out)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        if data.len() < 4 {
            return Err(crate::Error::Truncated);
        }
        if data[..4] != CHECKPOINT_MAGIC {
            return Err(crate::Error::BadMagic);
        }
        let c: Checkpoint = bincode::deserialize(&data[4..])?;
        c.model.config.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Upper bound reported for a perfect reconstruction.
pub const PSNR_CAP: f64 = 99.0;

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

/// Mean squared error against `field` at `positions`, over all channels.
pub fn mse_at(model: &FieldModel, field: &TargetField, positions: &[[f64; 3]]) -> Result<f64> {
    let pred = model.reconstruct(positions)?;
    let c = field.channels;
    let mut target = vec![0f32; c];
    let mut sum = 0.0;
    for (p, y) in positions.iter().zip(pred.chunks(c)) {
        field.eval(p, &mut target);
        for (a, b) in y.iter().zip(&target) {
            sum += (*a as f64 - *b as f64).powi(2);
        }
    }
    Ok(sum / (positions.len() * c).max(1) as f64)
}

/// PSNR on the occupied cell centers of a `resolution`³ lattice.
pub fn evaluate(model: &FieldModel, field: &TargetField, resolution: u32) -> Result<f64> {
    let pos = eval_positions(&model.occupancy, resolution);
    Ok(psnr_from_mse(mse_at(model, field, &pos)?))
}

/// One operating point of a rate-distortion sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub lambda: f64,
    pub bytes: usize,
    pub embedding_bytes: usize,
    /// PSNR of the trained model before coding.
    pub psnr: f64,
    /// PSNR after decoding the stream.
    pub decoded_psnr: f64,
    pub final_mse: f64,
}

/// Trains, encodes and decodes once per rate weight.
pub fn rd_sweep(
    config: &TrainConfig,
    field: &TargetField,
    lambdas: &[f64],
    mut on_point: impl FnMut(&RdPoint),
) -> Result<Vec<RdPoint>> {
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut c = config.clone();
        c.train.lambda = lambda;
        let trained = train(&c, field, |_| {})?;
        let options = EncodeOptions {
            mlp_bits: c.codec.mlp_bits,
            lambda,
        };
        let (bytes, report) = encode_model(&trained.model, &options)?;
        let decoded = decode_model(&bytes)?;
        let point = RdPoint {
            lambda,
            bytes: bytes.len(),
            embedding_bytes: report.embedding_bytes(),
            psnr: evaluate(&trained.model, field, c.eval.resolution)?,
            decoded_psnr: evaluate(&decoded, field, c.eval.resolution)?,
            final_mse: trained.log.last().map_or(f64::NAN, |e| e.mse),
        };
        on_point(&point);
        out.push(point);
    }
    Ok(out)
}

pub fn write_rd_csv<W: Write>(points: &[RdPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rd_json<W: Write>(points: &[RdPoint], out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, points)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_values() {
        assert_eq!(psnr_from_mse(0.0), PSNR_CAP);
        assert!((psnr_from_mse(1e-3) - 30.0).abs() < 1e-12);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert_eq!(psnr_from_mse(1e-12), PSNR_CAP);
    }

    #[test]
    fn rd_output_formats() {
        let p = RdPoint {
            lambda: 1e-3,
            bytes: 100,
            embedding_bytes: 60,
            psnr: 30.5,
            decoded_psnr: 30.5,
            final_mse: 1e-3,
        };
        let mut csv_out = Vec::new();
        write_rd_csv(&[p.clone()], &mut csv_out).unwrap();
        let text = String::from_utf8(csv_out).unwrap();
        assert!(text.starts_with("lambda,bytes,embedding_bytes,psnr,decoded_psnr,final_mse\n"));
        let mut json = Vec::new();
        write_rd_json(&[p.clone()], &mut json).unwrap();
        let back: Vec<RdPoint> = serde_json::from_slice(&json).unwrap();
        assert_eq!(back, vec![p]);
    }
}
