//! Byte layout of a compressed model. Little-endian throughout.

use crate::codec::quant::QuantizedMlp;
use crate::context::{Ablation, ContextConfig};
use crate::error::{Error, Result};
use crate::field::config::ModelConfig;
use crate::grid::{GridConfig, GridDims, PlaneAxis};
use crate::occupancy::ValidityCriterion;

pub const MAGIC: [u8; 4] = *b"CNC1";
pub const VERSION: u8 = 1;
/// Magic, version, body length and checksum.
pub const PREAMBLE_LEN: usize = 13;

/// Parsed form of every field in the stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Bitstream {
    pub config: ModelConfig,
    pub mlp_bits: u8,
    pub lambda: f32,
    /// Quantized +1 frequency of each table, 3D levels then planes.
    pub frequencies: Vec<u16>,
    /// Coded slot count of each table, same order.
    pub valid_counts: Vec<u32>,
    pub occupancy_resolution: u16,
    pub occupancy_prob: u16,
    pub occupancy: Vec<u8>,
    pub fuser_params: Vec<f32>,
    pub mlp: QuantizedMlp,
    pub mlp_count: u32,
    pub levels: Vec<Vec<u8>>,
}

/// Byte counts of each part of an encoded stream.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SectionSizes {
    pub header: usize,
    pub occupancy: usize,
    pub context: usize,
    pub mlp: usize,
    pub levels: Vec<usize>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn blob(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let s = self.data.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

fn validity_code(v: ValidityCriterion) -> u8 {
    match v {
        ValidityCriterion::AreaOfEffect => 0,
        ValidityCriterion::CellMembership => 1,
    }
}

fn validity_from(c: u8) -> Result<ValidityCriterion> {
    match c {
        0 => Ok(ValidityCriterion::AreaOfEffect),
        1 => Ok(ValidityCriterion::CellMembership),
        _ => Err(Error::Corrupt(format!("validity code {c}"))),
    }
}

fn table_count(c: &ModelConfig) -> usize {
    c.volume.num_levels + 3 * c.planes.num_levels
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_bytes_with_sizes().0
    }

    pub fn to_bytes_with_sizes(&self) -> (Vec<u8>, SectionSizes) {
        let c = &self.config;
        let mut w = Writer(Vec::new());
        let mut sizes = SectionSizes::default();
        for g in [&c.volume, &c.planes] {
            w.u8(g.num_levels as u8);
            w.u16(g.min_res as u16);
            w.u16(g.max_res as u16);
            w.u8(g.table_size_log2 as u8);
        }
        w.u8(c.feature_dim() as u8);
        w.u8(c.context.context_levels as u8);
        w.u8(c.context.disable_from as u8);
        w.u8(c.context.ablation.code());
        w.u8(validity_code(c.validity));
        w.u16(c.hidden_width as u16);
        w.u8(c.hidden_layers as u8);
        w.u8(c.channels as u8);
        w.u8(self.mlp_bits);
        w.f32(self.lambda);
        for &f in &self.frequencies {
            w.u16(f);
        }
        for &n in &self.valid_counts {
            w.u32(n);
        }
        sizes.header = PREAMBLE_LEN + w.0.len();

        let mark = w.0.len();
        w.u16(self.occupancy_resolution);
        w.u16(self.occupancy_prob);
        w.blob(&self.occupancy);
        sizes.occupancy = w.0.len() - mark;

        let mark = w.0.len();
        w.u32(self.fuser_params.len() as u32);
        for &p in &self.fuser_params {
            w.f32(p);
        }
        sizes.context = w.0.len() - mark;

        let mark = w.0.len();
        w.u32(self.mlp_count);
        w.f32(self.mlp.min);
        w.f32(self.mlp.max);
        w.blob(&self.mlp.packed());
        sizes.mlp = w.0.len() - mark;

        for level in &self.levels {
            let mark = w.0.len();
            w.blob(level);
            sizes.levels.push(w.0.len() - mark);
        }

        let body = w.0;
        let mut out = Vec::with_capacity(PREAMBLE_LEN + body.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
        out.extend_from_slice(&body);
        (out, sizes)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        if data.len() < 4 {
            return Err(Error::Truncated);
        }
        if data[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if data.len() < PREAMBLE_LEN {
            return Err(Error::Truncated);
        }
        if data[4] != VERSION {
            return Err(Error::UnsupportedVersion(data[4]));
        }
        let body_len = u32::from_le_bytes(data[5..9].try_into().unwrap()) as usize;
        let expected = u32::from_le_bytes(data[9..13].try_into().unwrap());
        let body = &data[PREAMBLE_LEN..];
        if body.len() < body_len {
            return Err(Error::Truncated);
        }
        if body.len() > body_len {
            return Err(Error::Corrupt(format!("{} trailing bytes", body.len() - body_len)));
        }
        let actual = crc32fast::hash(body);
        if actual != expected {
            return Err(Error::Checksum { expected, actual });
        }
        let mut r = Reader { data: body, pos: 0 };
        let mut grids = Vec::new();
        for _ in 0..2 {
            grids.push((r.u8()?, r.u16()?, r.u16()?, r.u8()?));
        }
        let f = r.u8()? as usize;
        let ctx = r.u8()? as usize;
        let ld = r.u8()? as usize;
        let ablation = Ablation::from_code(r.u8()?)?;
        let validity = validity_from(r.u8()?)?;
        let hidden_width = r.u16()? as usize;
        let hidden_layers = r.u8()? as usize;
        let channels = r.u8()? as usize;
        let mlp_bits = r.u8()?;
        let lambda = r.f32()?;
        let grid = |g: (u8, u16, u16, u8), dims| GridConfig {
            dims,
            num_levels: g.0 as usize,
            min_res: g.1 as u32,
            max_res: g.2 as u32,
            table_size_log2: g.3 as u32,
            feature_dim: f,
        };
        let config = ModelConfig {
            volume: grid(grids[0], GridDims::Volume),
            planes: grid(grids[1], GridDims::Plane(PlaneAxis::Xy)),
            context: ContextConfig {
                feature_dim: f,
                context_levels: ctx,
                disable_from: ld,
                ablation,
                volume_levels: grids[0].0 as usize,
                plane_levels: grids[1].0 as usize,
            },
            hidden_width,
            hidden_layers,
            channels,
            occupancy_resolution: 0,
            validity,
        };
        let n = table_count(&config);
        let frequencies = (0..n).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
        let valid_counts = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;

        let occupancy_resolution = r.u16()?;
        let occupancy_prob = r.u16()?;
        let occupancy = r.blob()?.to_vec();

        let nf = r.u32()? as usize;
        if nf > body.len() {
            return Err(Error::Truncated);
        }
        let fuser_params = (0..nf).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;

        let mlp_count = r.u32()?;
        let min = r.f32()?;
        let max = r.f32()?;
        let packed = r.blob()?;
        let mlp = QuantizedMlp::from_packed(min, max, mlp_bits, mlp_count as usize, packed)?;

        let levels = (0..n).map(|_| r.blob().map(<[u8]>::to_vec)).collect::<Result<Vec<_>>>()?;
        if r.pos != body.len() {
            return Err(Error::Corrupt("unparsed bytes after the last level".into()));
        }
        let mut config = config;
        config.occupancy_resolution = occupancy_resolution as u32;
        config
            .validate()
            .map_err(|e| Error::Corrupt(format!("header describes an invalid model: {e}")))?;
        Ok(Bitstream {
            config,
            mlp_bits,
            lambda,
            frequencies,
            valid_counts,
            occupancy_resolution,
            occupancy_prob,
            occupancy,
            fuser_params,
            mlp,
            mlp_count,
            levels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::quant::quantize_mlp;
    use crate::field::config::TrainConfig;

    fn sample() -> Bitstream {
        let config = TrainConfig::small().model_config().unwrap();
        let n = table_count(&config);
        let params: Vec<f32> = (0..50).map(|i| i as f32 * 0.1 - 2.0).collect();
        Bitstream {
            mlp_bits: 13,
            lambda: 4e-3,
            frequencies: (0..n as u16).map(|i| i * 1000).collect(),
            valid_counts: (0..n as u32).collect(),
            occupancy_resolution: config.occupancy_resolution as u16,
            occupancy_prob: 1234,
            occupancy: vec![1, 2, 3],
            fuser_params: vec![0.5, -0.25],
            mlp: quantize_mlp(&params, 13).unwrap(),
            mlp_count: 50,
            levels: (0..n).map(|i| vec![i as u8; i]).collect(),
            config,
        }
    }

    #[test]
    fn round_trip_and_layout() {
        let b = sample();
        let (bytes, sizes) = b.to_bytes_with_sizes();
        assert_eq!(&bytes[..4], b"CNC1");
        assert_eq!(bytes[4], VERSION);
        let total = sizes.header + sizes.occupancy + sizes.context + sizes.mlp + sizes.levels.iter().sum::<usize>();
        assert_eq!(total, bytes.len());
        // 2 + 8 + 4 bytes: resolution, probability, length, payload
        assert_eq!(sizes.occupancy, 2 + 2 + 4 + 3);
        assert_eq!(Bitstream::from_bytes(&bytes).unwrap(), b);
    }

    #[test]
    fn corruption_is_classified() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Bitstream::from_bytes(&bad), Err(Error::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Bitstream::from_bytes(&bad), Err(Error::UnsupportedVersion(9))));
        for cut in [2, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Bitstream::from_bytes(&bytes[..cut]), Err(Error::Truncated)), "cut {cut}");
        }
        for at in [PREAMBLE_LEN, PREAMBLE_LEN + 20, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[at] ^= 0x10;
            assert!(matches!(Bitstream::from_bytes(&bad), Err(Error::Checksum { .. })), "flip {at}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Bitstream::from_bytes(&long), Err(Error::Corrupt(_))));
    }
}
