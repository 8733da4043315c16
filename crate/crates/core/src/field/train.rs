//! Joint rate-distortion training of the sign tables, decoder network and
//! context fusers.
//!
//! Each iteration combines a reconstruction loss on random points inside
//! occupied cells with the estimated coding cost of a random sample of
//! coded table entries. Contexts are treated as constants; the rate gradient
//! reaches the latents through the straight-through estimator and the fusers
//! through their predicted probabilities.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::{dequantize_frequency, frequency, quantize_frequency, write_context, CodingMode, ContextModel};
use crate::entropy::{bits, clamp_prob, gradients};
use crate::error::{Error, Result};
use crate::field::config::TrainConfig;
use crate::field::model::{FieldModel, TableId, Topology};
use crate::field::target::TargetField;
use crate::grid::{ste_grad, SignTable};
use crate::nn::{lr_schedule, Adam};
use crate::occupancy::{derive_occupancy, Pvf};

/// Consecutive non-finite losses tolerated before giving up.
pub const MAX_BAD_STEPS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub mse: f64,
    /// Estimated bits over all coded entries.
    pub rate_bits: f64,
}

/// Which parameter groups an iteration updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Updates {
    pub latents: bool,
    pub net: bool,
    pub fusers: bool,
}

impl Updates {
    pub const ALL: Updates = Updates {
        latents: true,
        net: true,
        fusers: true,
    };
    pub const FUSERS: Updates = Updates {
        latents: false,
        net: false,
        fusers: true,
    };
}

pub struct Trainer<'a> {
    config: &'a TrainConfig,
    field: Option<&'a TargetField>,
    pub model: FieldModel,
    pub topology: Topology,
    updates: Updates,
    ids: Vec<TableId>,
    table_adam: Vec<Adam>,
    net_adam: Adam,
    fuser_adam: BTreeMap<CodingMode, Adam>,
    frequencies: Vec<f64>,
    pvf: Pvf,
    /// Prefix counts of valid slots per table, for uniform slot sampling.
    pool_offsets: Vec<usize>,
    pool_slots: Vec<usize>,
    occupied: Vec<[u32; 3]>,
    total_entries: usize,
    valid_entries: usize,
    rng: ChaCha8Rng,
    bad_steps: usize,
}

/// Derives the occupancy grid of `field` and builds an initialized model.
pub fn init_model(config: &TrainConfig, field: &TargetField) -> Result<FieldModel> {
    config.validate()?;
    let occ = derive_occupancy(
        |p| field.magnitude(p),
        config.field.occupancy_resolution,
        config.field.occupancy_threshold,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    FieldModel::new(config.model_config()?, occ, &mut rng)
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a TrainConfig, mut model: FieldModel, field: Option<&'a TargetField>, updates: Updates) -> Result<Self> {
        if field.is_none() && (updates.latents || updates.net) {
            return Err(Error::Config("reconstruction updates need a target field".into()));
        }
        if let Some(f) = field {
            if f.channels != model.config.channels {
                return Err(Error::WidthMismatch {
                    expected: model.config.channels,
                    got: f.channels,
                });
            }
        }
        let topology = Topology::build(&model.config, &model.occupancy)?;
        model.canonicalize(&topology);
        let ids = model.table_ids();
        let table_adam = ids.iter().map(|&id| Adam::new(model.table(id).latent().len())).collect();
        let net_adam = Adam::new(model.net.param_count());
        let fuser_adam = model
            .context
            .modes()
            .into_iter()
            .map(|m| (m, Adam::new(model.context.fuser(m).unwrap().net.param_count())))
            .collect();
        let mut pool_offsets = vec![0];
        let mut pool_slots = Vec::new();
        for &id in &ids {
            pool_slots.extend(topology.fusion(id).valid_slots());
            pool_offsets.push(pool_slots.len());
        }
        let f = model.config.feature_dim();
        let total_entries = topology.total_entries(f);
        let valid_entries = topology.valid_entries(f);
        let occupied = model.occupancy.occupied_cells();
        let pvf = topology.pvf(&model.volume);
        let mut t = Trainer {
            config,
            field,
            rng: ChaCha8Rng::seed_from_u64(config.train.seed ^ 0x5eed),
            model,
            topology,
            updates,
            ids,
            table_adam,
            net_adam,
            fuser_adam,
            frequencies: Vec::new(),
            pvf,
            pool_offsets,
            pool_slots,
            occupied,
            total_entries,
            valid_entries,
            bad_steps: 0,
        };
        t.refresh();
        Ok(t)
    }

    /// Recomputes level frequencies (as the decoder will see them) and the
    /// projected features.
    pub fn refresh(&mut self) {
        let f = self.model.config.feature_dim();
        self.frequencies = self
            .ids
            .iter()
            .map(|&id| {
                let fusion = self.topology.fusion(id);
                let q = frequency(self.model.table(id).signs(), f, |s| fusion.is_valid(s)).map_or(0, quantize_frequency);
                dequantize_frequency(q)
            })
            .collect();
        self.pvf = self.topology.pvf(&self.model.volume);
    }

    fn sample_position(&mut self) -> [f64; 3] {
        let r = self.model.occupancy.resolution() as f64;
        let c = self.occupied[self.rng.gen_range(0..self.occupied.len())];
        [
            (c[0] as f64 + self.rng.gen::<f64>()) / r,
            (c[1] as f64 + self.rng.gen::<f64>()) / r,
            (c[2] as f64 + self.rng.gen::<f64>()) / r,
        ]
    }

    /// Reconstruction loss; adds gradients into `net_grads` and
    /// `latent_grads`.
    fn distortion(&mut self, net_grads: &mut [f32], latent_grads: &mut [Vec<f32>]) -> Result<f64> {
        let field = self.field.expect("checked in new");
        let b = self.config.train.batch_size;
        let c = self.model.config.channels;
        let f = self.model.config.feature_dim();
        let width = self.model.config.net_input_width();
        let positions: Vec<[f64; 3]> = (0..b).map(|_| self.sample_position()).collect();
        let mut rows = vec![0f32; b * width];
        let mut targets = vec![0f32; b * c];
        let mut corners = Vec::with_capacity(b);
        for (i, p) in positions.iter().enumerate() {
            let cs = self.model.corners(p);
            let row = &mut rows[i * width..(i + 1) * width];
            for (t, cn) in cs.iter().enumerate() {
                let table = self.model.table(self.ids[t]);
                let mut acc = [0f64; 8];
                for (slot, w) in cn.iter() {
                    for (a, &s) in acc[..f].iter_mut().zip(table.slot_signs(slot)) {
                        *a += w * s as f64;
                    }
                }
                for d in 0..f {
                    row[t * f + d] = acc[d] as f32;
                }
            }
            corners.push(cs);
            field.eval(p, &mut targets[i * c..(i + 1) * c]);
        }
        let cache = self.model.net.forward(&rows, b)?;
        let n = (b * c) as f64;
        let mut mse = 0.0;
        let grad_out: Vec<f32> = cache
            .output()
            .iter()
            .zip(&targets)
            .map(|(&y, &t)| {
                let d = y as f64 - t as f64;
                mse += d * d;
                (2.0 * d / n) as f32
            })
            .collect();
        mse /= n;
        let g_in = self.model.net.backward(&cache, &grad_out, net_grads)?;
        for (i, cs) in corners.iter().enumerate() {
            let g = &g_in[i * width..(i + 1) * width];
            for (t, cn) in cs.iter().enumerate() {
                let dst = &mut latent_grads[t];
                for (slot, w) in cn.iter() {
                    for d in 0..f {
                        dst[slot * f + d] += (w * g[t * f + d] as f64) as f32;
                    }
                }
            }
        }
        Ok(mse)
    }

    /// Estimated bits over all coded entries from a slot sample; adds the
    /// rate gradients of `λ · bits / M` to the latents and of the mean
    /// per-entry cost to the fusers.
    fn rate(
        &mut self,
        latent_grads: &mut [Vec<f32>],
        fuser_grads: &mut BTreeMap<CodingMode, Vec<f32>>,
    ) -> Result<f64> {
        let f = self.model.config.feature_dim();
        let s = self.config.train.rate_samples;
        let total_slots = self.pool_slots.len();
        if total_slots == 0 {
            return Ok(0.0);
        }
        let mut picks: Vec<usize> = (0..s).map(|_| self.rng.gen_range(0..total_slots)).collect();
        picks.sort_unstable();
        let scale = self.valid_entries as f64 / (s * f) as f64;
        let latent_coef = self.config.train.lambda * scale / self.total_entries as f64;
        let fuser_coef = 1.0 / (s * f) as f64;
        let cap = self.config.train.max_fusion_vertices;
        let mut total_bits = 0.0;

        let mut start = 0;
        while start < picks.len() {
            let t = self.pool_offsets.partition_point(|&o| o <= picks[start]) - 1;
            let end = picks.partition_point(|&p| p < self.pool_offsets[t + 1]);
            let slots: Vec<usize> = picks[start..end].iter().map(|&p| self.pool_slots[p]).collect();
            start = end;

            let id = self.ids[t];
            let (level, mode, pvf) = match id {
                TableId::Volume(l) => (l, self.model.context.config.volume_mode(l), None),
                TableId::Plane(a, l) => (l, self.model.context.config.plane_mode(l), Some((&self.pvf, a))),
            };
            let family = match id {
                TableId::Volume(_) => &self.model.volume[..],
                TableId::Plane(a, _) => &self.model.planes[a.index()][..],
            };
            let table = &family[level];
            let freq = self.frequencies[t];

            // per-slot probabilities plus what is needed to backpropagate
            let mut probs = vec![0f64; slots.len() * f];
            let mut fused = None;
            if mode == CodingMode::Frequency {
                probs.fill(clamp_prob(freq));
            } else {
                let fusion = self.topology.fusion(id);
                let geom = fusion.geometry();
                let fuser = self.model.context.fuser(mode).expect("fuser exists for every mode");
                let iw = mode.input_width(f);
                let mut rows = Vec::new();
                let mut weights = Vec::new();
                let mut spans = Vec::with_capacity(slots.len());
                let mut buf = vec![0f32; iw];
                for &slot in &slots {
                    let (verts, w) = fusion.slot(slot);
                    let chosen = top_weights(w, cap);
                    let norm: f64 = chosen.iter().map(|&k| w[k]).sum();
                    let a = weights.len();
                    for k in chosen {
                        let pos = geom.vertex_position(&geom.vertex_at(verts[k] as usize));
                        write_context(mode, family, level, freq, pvf, &pos, &mut buf);
                        rows.extend_from_slice(&buf);
                        weights.push(w[k] / norm);
                    }
                    spans.push((a, weights.len()));
                }
                let cache = fuser.net.forward(&rows, weights.len())?;
                let out = cache.output();
                for (i, &(a, b)) in spans.iter().enumerate() {
                    for r in a..b {
                        for d in 0..f {
                            probs[i * f + d] += weights[r] * out[r * f + d] as f64;
                        }
                    }
                }
                for p in &mut probs {
                    *p = clamp_prob(*p);
                }
                fused = Some((cache, spans, weights));
            }

            let mut dp = vec![0f32; slots.len() * f];
            let grads = &mut latent_grads[t];
            for (i, &slot) in slots.iter().enumerate() {
                let signs = table.slot_signs(slot);
                for d in 0..f {
                    let p = probs[i * f + d];
                    total_bits += bits(p, signs[d]);
                    let (d_theta, d_p) = gradients(p, signs[d]);
                    grads[slot * f + d] += (latent_coef * d_theta) as f32;
                    dp[i * f + d] = (fuser_coef * d_p) as f32;
                }
            }

            if let (Some((cache, spans, weights)), true) = (fused, self.updates.fusers) {
                let mut g_out = vec![0f32; weights.len() * f];
                for (i, &(a, b)) in spans.iter().enumerate() {
                    for r in a..b {
                        for d in 0..f {
                            g_out[r * f + d] = weights[r] as f32 * dp[i * f + d];
                        }
                    }
                }
                let fuser = self.model.context.fuser(mode).unwrap();
                let pg = fuser_grads.get_mut(&mode).unwrap();
                fuser.net.backward(&cache, &g_out, pg)?;
            }
        }
        Ok(total_bits * scale)
    }

    /// One optimization step at iteration `it` of `total`.
    pub fn step(&mut self, it: usize, total: usize) -> Result<TrainLogEntry> {
        if it > 0 && it % self.config.train.refresh_every == 0 {
            self.refresh();
        }
        let lr = lr_schedule(it, total);
        let mut net_grads = vec![0f32; self.model.net.param_count()];
        let mut latent_grads: Vec<Vec<f32>> = self
            .ids
            .iter()
            .map(|&id| vec![0f32; self.model.table(id).latent().len()])
            .collect();
        let mut fuser_grads: BTreeMap<CodingMode, Vec<f32>> = self
            .fuser_adam
            .keys()
            .map(|&m| (m, vec![0f32; self.model.context.fuser(m).unwrap().net.param_count()]))
            .collect();

        let mse = if self.updates.latents || self.updates.net {
            self.distortion(&mut net_grads, &mut latent_grads)?
        } else {
            0.0
        };
        let rate_bits = self.rate(&mut latent_grads, &mut fuser_grads)?;
        let loss = mse + self.config.train.lambda * rate_bits / self.total_entries as f64;
        let entry = TrainLogEntry {
            iteration: it,
            lr,
            loss,
            mse,
            rate_bits,
        };
        if !loss.is_finite() {
            self.bad_steps += 1;
            if self.bad_steps >= MAX_BAD_STEPS {
                return Err(Error::Diverged(it));
            }
            return Ok(entry);
        }
        self.bad_steps = 0;

        if self.updates.net {
            self.net_adam.step(self.model.net.params_mut(), &net_grads, lr)?;
        }
        if self.updates.latents {
            for (t, &id) in self.ids.iter().enumerate() {
                let g = &mut latent_grads[t];
                let adam = &mut self.table_adam[t];
                let mut res = Ok(false);
                self.model.table_mut(id).update_latent(|lat| {
                    for (gi, &x) in g.iter_mut().zip(lat.iter()) {
                        *gi = ste_grad(x, *gi);
                    }
                    res = adam.step(lat, g, lr);
                });
                res?;
            }
        }
        if self.updates.fusers {
            for (mode, adam) in &mut self.fuser_adam {
                let fuser = self.model.context.fuser_mut(*mode).unwrap();
                adam.step(fuser.net.params_mut(), &fuser_grads[mode], lr)?;
            }
        }
        Ok(entry)
    }

    pub fn run(&mut self, iterations: usize, mut on_log: impl FnMut(&TrainLogEntry)) -> Result<Vec<TrainLogEntry>> {
        let every = self.config.train.log_every.max(1);
        let mut log = Vec::new();
        for it in 0..iterations {
            let e = self.step(it, iterations)?;
            if it % every == 0 || it + 1 == iterations {
                on_log(&e);
            }
            log.push(e);
        }
        self.refresh();
        Ok(log)
    }

    pub fn into_model(self) -> FieldModel {
        self.model
    }
}

/// Indices of the `cap` largest weights, in ascending index order.
fn top_weights(w: &[f64], cap: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..w.len()).collect();
    if w.len() > cap {
        idx.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
        idx.truncate(cap);
        idx.sort_unstable();
    }
    idx
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: FieldModel,
    pub log: Vec<TrainLogEntry>,
}

/// Trains a fresh model on `field`.
pub fn train(config: &TrainConfig, field: &TargetField, on_log: impl FnMut(&TrainLogEntry)) -> Result<TrainOutcome> {
    let model = init_model(config, field)?;
    let mut trainer = Trainer::new(config, model, Some(field), Updates::ALL)?;
    let log = trainer.run(config.train.iterations, on_log)?;
    Ok(TrainOutcome {
        model: trainer.into_model(),
        log,
    })
}

/// One CSV row per logged iteration.
pub fn write_train_log<W: std::io::Write>(log: &[TrainLogEntry], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for e in log {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

/// Replaces the fusers of `model` with freshly initialized ones for
/// `context` and fits them to the model's frozen sign tables.
pub fn refit_context(
    config: &TrainConfig,
    model: &FieldModel,
    context: crate::context::ContextConfig,
    iterations: usize,
) -> Result<FieldModel> {
    let mut m = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed ^ 0xc0de);
    m.config.context = context.clone();
    m.config.validate()?;
    m.context = ContextModel::init(context, &mut rng)?;
    let mut trainer = Trainer::new(config, m, None, Updates::FUSERS)?;
    trainer.run(iterations, |_| {})?;
    Ok(trainer.into_model())
}
