//! Synthetic ±1 grids for exercising the entropy coder on its own.
//!
//! A corpus is a stack of dense (unhashed) 3D levels with one feature per
//! vertex. Corpora can be coded with a per-level frequency or with context
//! fusers fitted to the corpus itself.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::range::{decode_signs, encode_signs, quantize_prob};
use crate::context::{
    dequantize_frequency, frequency, quantize_frequency, slot_probabilities, write_context, Ablation, CodingMode,
    ContextConfig, ContextModel, LevelInputs,
};
use crate::entropy::{bits, clamp_prob, gradients};
use crate::error::{Error, Result};
use crate::grid::{LevelEmbedding, LevelGeometry, SignTable};
use crate::nn::{lr_schedule, Adam};
use crate::occupancy::{pack_bits, unpack_bits, LevelFusion, OccupancyGrid, ValidityCriterion};

pub const CORPUS_MAGIC: [u8; 4] = *b"CNCK";
const CORPUS_VERSION: u8 = 1;
/// Large enough that no level of a corpus is hashed.
const DENSE_LOG2: u32 = 30;

/// Resolutions of the multiscale corpus levels.
pub const MULTISCALE_RESOLUTIONS: [u32; 4] = [7, 15, 31, 63];
/// Strength of the parent-to-child correlation in the multiscale corpus.
pub const MULTISCALE_COUPLING: f64 = 0.45;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum CorpusKind {
    /// Independent entries with `P(+1) = p`.
    Iid(f64),
    /// Coarse-to-fine levels where each entry leans toward the interpolated
    /// value of the previous level.
    Multiscale,
    AllOnes,
}

impl CorpusKind {
    fn code(self) -> u8 {
        match self {
            CorpusKind::Iid(_) => 0,
            CorpusKind::Multiscale => 1,
            CorpusKind::AllOnes => 2,
        }
    }
}

impl FromStr for CorpusKind {
    type Err = Error;

    /// Accepts `iid`, `iid(p)`, `iid:p`, `multiscale`, `multiscale-correlated`
    /// and `all-ones`.
    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::Unknown {
            what: "corpus kind",
            name: s.into(),
        };
        match s {
            "iid" => return Ok(CorpusKind::Iid(0.5)),
            "multiscale" | "multiscale-correlated" => return Ok(CorpusKind::Multiscale),
            "all-ones" => return Ok(CorpusKind::AllOnes),
            _ => {}
        }
        let arg = s
            .strip_prefix("iid(")
            .and_then(|r| r.strip_suffix(')'))
            .or_else(|| s.strip_prefix("iid:"))
            .ok_or_else(unknown)?;
        let p: f64 = arg.parse().map_err(|_| unknown())?;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("iid probability {p} is outside [0, 1]")));
        }
        Ok(CorpusKind::Iid(p))
    }
}

impl fmt::Display for CorpusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorpusKind::Iid(p) => write!(f, "iid({p})"),
            CorpusKind::Multiscale => f.write_str("multiscale-correlated"),
            CorpusKind::AllOnes => f.write_str("all-ones"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub kind: CorpusKind,
    pub seed: u64,
    pub levels: Vec<LevelEmbedding>,
}

fn dense(resolution: u32) -> LevelGeometry {
    LevelGeometry::new(3, resolution, DENSE_LOG2)
}

fn sign(b: bool) -> i8 {
    if b {
        1
    } else {
        -1
    }
}

/// Generates a corpus. `iid` corpora have a single level of 100³ = 10⁶
/// entries; `all-ones` a single 64³ level.
pub fn generate_corpus(kind: CorpusKind, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = match kind {
        CorpusKind::Iid(p) => {
            let g = dense(99);
            let signs = (0..g.table_size).map(|_| sign(rng.gen_bool(p))).collect();
            vec![LevelEmbedding::from_signs(g, 1, signs)]
        }
        CorpusKind::AllOnes => {
            let g = dense(63);
            vec![LevelEmbedding::from_signs(g, 1, vec![1; g.table_size])]
        }
        CorpusKind::Multiscale => {
            let mut levels: Vec<LevelEmbedding> = Vec::new();
            for &r in &MULTISCALE_RESOLUTIONS {
                let g = dense(r);
                let signs = (0..g.table_size)
                    .map(|i| {
                        let p = match levels.last() {
                            None => 0.5,
                            Some(parent) => {
                                let mut v = [0f32];
                                parent.interpolate(&g.vertex_position(&g.vertex_at(i)), &mut v);
                                0.5 + MULTISCALE_COUPLING * v[0] as f64
                            }
                        };
                        sign(rng.gen_bool(p))
                    })
                    .collect();
                levels.push(LevelEmbedding::from_signs(g, 1, signs));
            }
            levels
        }
    };
    Corpus { kind, seed, levels }
}

impl Corpus {
    pub fn entries(&self) -> usize {
        self.levels.iter().map(|l| l.signs().len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CORPUS_MAGIC);
        out.push(CORPUS_VERSION);
        out.push(self.kind.code());
        let p = match self.kind {
            CorpusKind::Iid(p) => p,
            _ => 0.0,
        };
        out.extend_from_slice(&p.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.levels.len() as u32).to_le_bytes());
        for l in &self.levels {
            out.extend_from_slice(&l.resolution().to_le_bytes());
            let bits: Vec<bool> = l.signs().iter().map(|&s| s > 0).collect();
            out.extend_from_slice(&pack_bits(&bits));
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = data.get(pos..pos + n).ok_or(Error::Truncated)?;
            pos += n;
            Ok(s)
        };
        if take(4)? != CORPUS_MAGIC {
            return Err(Error::BadMagic);
        }
        let version = take(1)?[0];
        if version != CORPUS_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let code = take(1)?[0];
        let p = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let kind = match code {
            0 => CorpusKind::Iid(p),
            1 => CorpusKind::Multiscale,
            2 => CorpusKind::AllOnes,
            c => return Err(Error::Corrupt(format!("corpus kind {c}"))),
        };
        let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut levels = Vec::new();
        for _ in 0..n {
            let r = u32::from_le_bytes(take(4)?.try_into().unwrap());
            if r == 0 || r > 1024 {
                return Err(Error::Corrupt(format!("corpus resolution {r}")));
            }
            let g = dense(r);
            let bytes = take(g.table_size.div_ceil(8))?;
            let signs = unpack_bits(bytes, g.table_size).into_iter().map(sign).collect();
            levels.push(LevelEmbedding::from_signs(g, 1, signs));
        }
        if pos != data.len() {
            return Err(Error::Corrupt("trailing bytes after the last level".into()));
        }
        Ok(Corpus { kind, seed, levels })
    }
}

/// How a corpus is coded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusCoding {
    Frequency,
    /// Fusers fitted to the corpus, using up to `context_levels` coarser
    /// levels.
    Context { context_levels: usize, iterations: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusLevelReport {
    pub resolution: u32,
    pub entries: usize,
    pub estimated_bits: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub levels: Vec<CorpusLevelReport>,
    /// Size of the single range-coded stream holding every level in order.
    pub coded_bytes: usize,
    /// Fuser parameter bytes (f32), zero for frequency coding.
    pub model_bytes: usize,
}

impl CorpusReport {
    pub fn estimated_bits(&self) -> f64 {
        self.levels.iter().map(|l| l.estimated_bits).sum()
    }
}

fn context_config(levels: usize, context_levels: usize) -> ContextConfig {
    ContextConfig {
        feature_dim: 1,
        context_levels,
        disable_from: levels + 1,
        ablation: Ablation::None,
        volume_levels: levels,
        plane_levels: 0,
    }
}

fn fusions(corpus: &Corpus) -> Vec<LevelFusion> {
    let occ = OccupancyGrid::full(1);
    corpus
        .levels
        .iter()
        .map(|l| LevelFusion::volume(*l.geometry(), &occ, ValidityCriterion::AreaOfEffect))
        .collect()
}

fn level_frequency(level: &LevelEmbedding) -> f64 {
    dequantize_frequency(frequency(level.signs(), 1, |_| true).map_or(0, quantize_frequency))
}

/// Fits one fuser per context width to the corpus by minimizing the mean
/// estimated bits of randomly sampled entries.
fn fit_context(corpus: &Corpus, context_levels: usize, iterations: usize, seed: u64) -> Result<ContextModel> {
    let n = corpus.levels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ContextModel::init(context_config(n, context_levels), &mut rng)?;
    let freqs: Vec<f64> = corpus.levels.iter().map(level_frequency).collect();
    let batch = 1024;
    let mut adams: Vec<(CodingMode, Adam)> = model
        .modes()
        .into_iter()
        .map(|m| (m, Adam::new(model.fuser(m).unwrap().net.param_count())))
        .collect();
    for it in 0..iterations {
        let lr = lr_schedule(it, iterations);
        for (mode, adam) in &mut adams {
            let levels: Vec<usize> = (1..n).filter(|&l| model.config.volume_mode(l) == *mode).collect();
            let width = mode.input_width(1);
            let mut rows = vec![0f32; batch * width];
            let mut signs = vec![0i8; batch];
            for b in 0..batch {
                let l = levels[rng.gen_range(0..levels.len())];
                let g = corpus.levels[l].geometry();
                let v = rng.gen_range(0..g.table_size);
                let pos = g.vertex_position(&g.vertex_at(v));
                write_context(*mode, &corpus.levels, l, freqs[l], None, &pos, &mut rows[b * width..(b + 1) * width]);
                signs[b] = corpus.levels[l].slot_signs(v)[0];
            }
            let fuser = model.fuser_mut(*mode).unwrap();
            let cache = fuser.net.forward(&rows, batch)?;
            let g_out: Vec<f32> = cache
                .output()
                .iter()
                .zip(&signs)
                .map(|(&p, &s)| (gradients(clamp_prob(p as f64), s).1 / batch as f64) as f32)
                .collect();
            let mut grads = vec![0f32; fuser.net.param_count()];
            fuser.net.backward(&cache, &g_out, &mut grads)?;
            adam.step(fuser.net.params_mut(), &grads, lr)?;
        }
    }
    Ok(model)
}

/// Probabilities (quantized for the coder and exact for the estimate) of
/// every entry of every level.
fn corpus_probabilities(corpus: &Corpus, model: Option<&ContextModel>) -> Result<Vec<Vec<f64>>> {
    let fus = fusions(corpus);
    corpus
        .levels
        .iter()
        .enumerate()
        .map(|(l, level)| {
            let freq = level_frequency(level);
            match model {
                None => Ok(vec![clamp_prob(freq); level.signs().len()]),
                Some(m) => {
                    let inputs = LevelInputs {
                        levels: &corpus.levels,
                        level: l,
                        fusion: &fus[l],
                        frequency: freq,
                        pvf: None,
                    };
                    let slots: Vec<usize> = (0..level.signs().len()).collect();
                    slot_probabilities(m, m.config.volume_mode(l), &inputs, &slots)
                }
            }
        })
        .collect()
}

/// Codes all levels coarse to fine into one stream, checks that decoding
/// reproduces them and reports the estimated and actual sizes.
pub fn code_corpus(corpus: &Corpus, coding: CorpusCoding, seed: u64) -> Result<CorpusReport> {
    let model = match coding {
        CorpusCoding::Frequency => None,
        CorpusCoding::Context {
            context_levels,
            iterations,
        } => {
            if corpus.levels.len() < 2 {
                return Err(Error::Config("context coding needs at least two levels".into()));
            }
            Some(fit_context(corpus, context_levels, iterations, seed)?)
        }
    };
    let probs = corpus_probabilities(corpus, model.as_ref())?;
    let mut signs = Vec::with_capacity(corpus.entries());
    let mut q = Vec::with_capacity(corpus.entries());
    let mut levels = Vec::new();
    for (level, p) in corpus.levels.iter().zip(&probs) {
        signs.extend_from_slice(level.signs());
        q.extend(p.iter().map(|&x| quantize_prob(x)));
        levels.push(CorpusLevelReport {
            resolution: level.resolution(),
            entries: level.signs().len(),
            estimated_bits: level.signs().iter().zip(p).map(|(&s, &x)| bits(x, s)).sum(),
        });
    }
    let bytes = encode_signs(&signs, &q);
    if decode_signs(&bytes, &q)? != signs {
        return Err(Error::Verification("corpus stream".into()));
    }
    Ok(CorpusReport {
        levels,
        coded_bytes: bytes.len(),
        model_bytes: model.map_or(0, |m| m.param_count() * 4),
    })
}
