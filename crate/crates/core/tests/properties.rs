use cffma_core::fusion::{mscff, MscffParams};
use cffma_core::model::{decode_checkpoint, encode_checkpoint, Model, ModelConfig};
use cffma_core::numerics::{ParamStore, Tape, Tensor};
use cffma_core::rhma::{mhsa, sca_gate, sta_gate, MhsaParams, SctaParams};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig { cases: n, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(cases(48))]

    #[test]
    fn mask_in_unit_interval_and_enhanced_never_louder(seed in 0u64..10_000, t in 1usize..24, scale in 0.01f32..100.0) {
        let cfg = ModelConfig::tiny();
        let model = Model::build(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let mag = Tensor::uniform([cfg.n_bins(), t], scale, &mut rng).unwrap();
        let mag = Tensor::new([cfg.n_bins(), t], mag.data().iter().map(|v| v.abs()).collect()).unwrap();
        let stack = Tensor::uniform([cfg.n_layers, t, cfg.d], scale, &mut rng).unwrap();
        let (mask, enh) = model.forward(&mag, &stack).unwrap();
        for ((&m, &e), &x) in mask.data().iter().zip(enh.data()).zip(mag.data()) {
            prop_assert!((0.0..=1.0).contains(&m));
            prop_assert!(e.abs() <= x.abs());
        }
    }

    #[test]
    fn fusion_output_is_non_negative(seed in 0u64..10_000, t in 1usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = MscffParams::new(&mut store, "f", 6, 5, &mut rng).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::uniform([6, t], 3.0, &mut rng).unwrap());
        let b = tape.constant(&Tensor::uniform([5, t], 3.0, &mut rng).unwrap());
        let y = mscff(&mut tape, &store, &p, a, b).unwrap();
        prop_assert_eq!(tape.shape(y), &[11, t]);
        prop_assert!(tape.value(y).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn self_attention_commutes_with_frame_permutation(seed in 0u64..10_000, t in 2usize..12) {
        let c = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = MhsaParams::new(&mut store, "m", c, 2, &mut rng).unwrap();
        let z = Tensor::uniform([t, c], 2.0, &mut rng).unwrap();
        let perm: Vec<usize> = (0..t).rev().collect();
        let zp = Tensor::new([t, c], perm.iter().flat_map(|&r| z.data()[r * c..(r + 1) * c].to_vec()).collect()).unwrap();
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(&z), tape.constant(&zp));
        let y = mhsa(&mut tape, &store, &p, a).unwrap().out;
        let yp = mhsa(&mut tape, &store, &p, b).unwrap().out;
        let (y, yp) = (tape.value(y), tape.value(yp));
        for (i, &r) in perm.iter().enumerate() {
            for j in 0..c {
                prop_assert!((yp[i * c + j] - y[r * c + j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_gates_stay_strictly_inside_unit_interval(seed in 0u64..10_000, t in 1usize..12, scale in 0.1f32..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = SctaParams::new(&mut store, "s", 8, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(&Tensor::uniform([8, t], scale, &mut rng).unwrap());
        let g1 = sca_gate(&mut tape, &store, &p.sca, f).unwrap();
        let g2 = sta_gate(&mut tape, &store, &p.sta, f).unwrap();
        prop_assert!(tape.value(g1).iter().chain(tape.value(g2)).all(|&g| g > 0.0 && g < 1.0));
    }
}

proptest! {
    #![proptest_config(cases(8))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in 0u64..10_000) {
        let model = Model::build(&ModelConfig::tiny(), seed).unwrap();
        let back = decode_checkpoint(&encode_checkpoint(&model, None)).unwrap();
        prop_assert_eq!(back.model.config, model.config);
        for ((_, n1, a), (_, n2, b)) in model.store.iter().zip(back.model.store.iter()) {
            prop_assert_eq!(n1, n2);
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
