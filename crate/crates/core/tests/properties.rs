use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cnc_core::codec::bitstream::PREAMBLE_LEN;
use cnc_core::codec::range::{encode_signs, quantize_prob};
use cnc_core::codec::{decode_model, encode_model, EncodeOptions};
use cnc_core::entropy::{bit_estimate, clamp_prob, PROB_EPS};
use cnc_core::field::{init_model, synth_field, FieldKind, TrainConfig};
use cnc_core::grid::InverseHashMap;
use cnc_core::occupancy::{project_pvf, LevelFusion};
use cnc_core::{
    Ablation, ContextModel, Error, LevelEmbedding, LevelGeometry, OccupancyGrid, PlaneAxis, ValidityCriterion,
};

fn occupancy_strategy() -> impl Strategy<Value = OccupancyGrid> {
    (2u32..10, any::<u64>(), 0.05f64..0.6).prop_map(|(r, seed, density)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cells: Vec<bool> = (0..r * r * r).map(|_| rng.gen_bool(density)).collect();
        cells[0] = true;
        OccupancyGrid::new(r, cells).unwrap()
    })
}

fn tiny_config(seed: u64) -> TrainConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let c = draw_config(&mut rng, seed);
        if c.validate().is_ok() {
            return c;
        }
    }
}

fn draw_config(rng: &mut ChaCha8Rng, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::small();
    c.grid3d.levels = rng.gen_range(2..=4);
    c.grid3d.min_res = rng.gen_range(2..=6);
    c.grid3d.max_res = c.grid3d.min_res * rng.gen_range(2..=5);
    c.grid3d.table_size_log2 = rng.gen_range(6..=10);
    c.grid2d.levels = rng.gen_range(1..=2);
    c.grid2d.min_res = rng.gen_range(4..=8);
    c.grid2d.max_res = c.grid2d.min_res * 2;
    c.grid2d.table_size_log2 = rng.gen_range(5..=8);
    c.model.feature_dim = rng.gen_range(1..=4);
    c.model.hidden_width = 8;
    c.model.context_levels = rng.gen_range(1..=3);
    c.model.ablation = [Ablation::None, Ablation::Planes, Ablation::Volume, Ablation::Dimension, Ablation::All]
        [rng.gen_range(0..5)];
    c.field.kind = [FieldKind::SphereShell, FieldKind::GaussianBlobs, FieldKind::CheckerDensity][rng.gen_range(0..3)];
    c.field.seed = seed;
    c.field.occupancy_resolution = rng.gen_range(6..=16);
    c.train.seed = seed;
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inverse_map_partitions_vertices(res in 1u32..24, log2 in 3u32..14, rank in 2usize..=3) {
        let geom = LevelGeometry::new(rank, res, log2);
        let inv = InverseHashMap::build(geom);
        let again = InverseHashMap::build(geom);
        let mut total = 0;
        for s in 0..inv.num_slots() {
            total += inv.collisions(s);
            let a: Vec<_> = inv.slot_vertices(s).collect();
            let b: Vec<_> = again.slot_vertices(s).collect();
            prop_assert_eq!(&a, &b);
            for v in a {
                prop_assert_eq!(geom.slot_of(&v), s);
            }
        }
        prop_assert_eq!(total, geom.vertex_count());
        prop_assert_eq!(inv.total_vertices(), geom.vertex_count());
    }

    #[test]
    fn fusion_is_normalized_and_validity_tracks_aoe(occ in occupancy_strategy(), res in 1u32..12, log2 in 4u32..12) {
        let geom = LevelGeometry::new(3, res, log2);
        let fusion = LevelFusion::volume(geom, &occ, ValidityCriterion::AreaOfEffect);
        let inv = InverseHashMap::build(geom);
        for s in 0..fusion.num_slots() {
            let any_positive = inv.slot_vertices(s).any(|v| occ.aoe(v, res) > 0.0);
            prop_assert_eq!(fusion.is_valid(s), any_positive);
            if fusion.is_valid(s) {
                let (verts, weights) = fusion.slot(s);
                prop_assert!(!verts.is_empty());
                let sum: f64 = weights.iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
                prop_assert!(weights.iter().all(|&w| w > 0.0));
            }
        }
    }

    #[test]
    fn aoe_is_additive_over_partitions(occ in occupancy_strategy(), cuts in proptest::collection::vec(0.0f64..1.0, 3)) {
        let lo = [0.1, 0.05, 0.2];
        let hi = [0.9, 0.7, 0.95];
        let whole = occ.overlap_volume(lo, hi);
        let mut parts = 0.0;
        for corner in 0..8u32 {
            let mut a = [0.0; 3];
            let mut b = [0.0; 3];
            for ax in 0..3 {
                let mid = lo[ax] + cuts[ax] * (hi[ax] - lo[ax]);
                if corner >> ax & 1 == 0 {
                    a[ax] = lo[ax];
                    b[ax] = mid;
                } else {
                    a[ax] = mid;
                    b[ax] = hi[ax];
                }
            }
            parts += occ.overlap_volume(a, b);
        }
        prop_assert!((whole - parts).abs() <= 1e-12);
    }

    #[test]
    fn pvf_ignores_traversal_order(seed in any::<u64>(), res in 1u32..6, f in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geom = LevelGeometry::new(3, res, 16);
        let signs: Vec<i8> = (0..geom.vertex_count() * f).map(|_| if rng.gen_bool(0.5) { 1 } else { -1 }).collect();
        let table = LevelEmbedding::from_signs(geom, f, signs);
        let mut verts: Vec<u32> = (0..geom.vertex_count() as u32).filter(|_| rng.gen_bool(0.7)).collect();
        let sorted = project_pvf(&table, &verts);
        verts.reverse();
        let reversed = project_pvf(&table, &verts);
        prop_assert_eq!(sorted, reversed);
    }

    #[test]
    fn estimate_tracks_coded_length(seq in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 0..4000)) {
        let probs: Vec<u16> = seq.iter().map(|&(p, _)| quantize_prob(p)).collect();
        let signs: Vec<i8> = seq.iter().zip(&probs).map(|(&(_, u), &q)| if u < q as f64 / 65536.0 { 1 } else { -1 }).collect();
        let estimate: f64 = signs
            .iter()
            .zip(&probs)
            .map(|(&s, &q)| bit_estimate(q as f64 / 65536.0, s).unwrap())
            .sum();
        let coded = 8.0 * encode_signs(&signs, &probs).len() as f64;
        prop_assert!((coded - estimate).abs() <= 64.0 + seq.len() as f64 * 2e-4, "{} vs {}", coded, estimate);
    }

    #[test]
    fn clamped_estimates_are_bounded(p in -1.0f64..2.0, plus in any::<bool>()) {
        let q = clamp_prob(p);
        prop_assert!((PROB_EPS..=1.0 - PROB_EPS).contains(&q));
        let b = bit_estimate(q, if plus { 1 } else { -1 }).unwrap();
        prop_assert!(b >= 0.0 && b.is_finite());
        let q16 = quantize_prob(p.clamp(0.0, 1.0));
        prop_assert!(q16 >= 1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_models_round_trip(seed in any::<u64>()) {
        let c = tiny_config(seed);
        let field = synth_field(c.field.kind, c.field.seed, c.field.channels).unwrap();
        let model = match init_model(&c, &field) {
            Ok(m) => m,
            Err(Error::EmptyOccupancy) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let (bytes, report) = encode_model(&model, &EncodeOptions::default()).unwrap();
        prop_assert_eq!(report.total_bytes, bytes.len());
        let decoded = decode_model(&bytes).unwrap();
        let topo = cnc_core::field::Topology::build(&model.config, &model.occupancy).unwrap();
        let (vol, planes) = model.decoded_view(&topo);
        for (a, b) in vol.iter().zip(&decoded.volume) {
            prop_assert_eq!(a.signs(), b.signs());
        }
        for axis in PlaneAxis::ALL {
            for (a, b) in planes[axis.index()].iter().zip(&decoded.planes[axis.index()]) {
                prop_assert_eq!(a.signs(), b.signs());
            }
        }
        let (again, _) = encode_model(&decoded, &EncodeOptions::default()).unwrap();
        let twice = decode_model(&again).unwrap();
        prop_assert_eq!(&twice.volume, &decoded.volume);
        prop_assert_eq!(&twice.planes, &decoded.planes);
        prop_assert_eq!(&twice.occupancy, &decoded.occupancy);
    }

    #[test]
    fn damaged_streams_never_decode(seed in any::<u64>(), cut in 0.0f64..1.0, pos in 0.0f64..1.0, bit in 0u8..8) {
        let c = tiny_config(seed % 4);
        let field = synth_field(c.field.kind, c.field.seed, c.field.channels).unwrap();
        let Ok(model) = init_model(&c, &field) else { return Ok(()) };
        let (bytes, _) = encode_model(&model, &EncodeOptions::default()).unwrap();
        let n = ((bytes.len() - 1) as f64 * cut) as usize;
        prop_assert!(decode_model(&bytes[..n]).is_err());
        let mut flipped = bytes.clone();
        let i = ((bytes.len() - 1) as f64 * pos) as usize;
        flipped[i] ^= 1 << bit;
        let err = decode_model(&flipped).unwrap_err();
        if i >= PREAMBLE_LEN {
            prop_assert!(matches!(err, Error::Checksum { .. }), "{}", err);
        }
    }
}

#[test]
fn fusers_shared_by_context_width() {
    for levels in 2..=8usize {
        for lc in 1..=3usize {
            let mut c = TrainConfig::small();
            c.grid3d.levels = levels;
            c.grid3d.max_res = 8 * (levels as u32 + 1);
            c.grid2d.levels = 1;
            c.grid2d.max_res = c.grid2d.min_res;
            c.model.context_levels = lc;
            let mc = c.model_config().unwrap();
            let ctx = ContextModel::zeros(mc.context.clone()).unwrap();
            let widths: std::collections::BTreeSet<usize> = (1..levels).map(|l| lc.min(l)).collect();
            assert_eq!(ctx.volume_fuser_count(), widths.len(), "levels {levels}, Lc {lc}");
        }
    }
}

#[test]
fn rate_pressure_lowers_estimated_bits() {
    let field = synth_field(FieldKind::SphereShell, 0, 1).unwrap();
    let per_entry = |lambda: f64| {
        let mut c = TrainConfig::small();
        c.train.iterations = 300;
        c.train.lambda = lambda;
        let trained = cnc_core::field::train(&c, &field, |_| {}).unwrap();
        let (_, report) = encode_model(&trained.model, &EncodeOptions::default()).unwrap();
        let bits: f64 = report.tables.iter().map(|t| t.estimated_bits).sum();
        let entries: usize = report.tables.iter().map(|t| t.valid_slots).sum::<usize>() * c.model.feature_dim;
        bits / entries as f64
    };
    let free = per_entry(0.0);
    let pressed = per_entry(8e-3);
    assert!(pressed < free, "{pressed} vs {free}");
}
