use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use g2p::attention::{global_attend, local_m_window, AttentionParams};
use g2p::checkpoint::{read_checkpoint, write_checkpoint, CheckpointMeta};
use g2p::data::{parse_lexicon_str, write_lexicon};
use g2p::decode::ensemble_vote;
use g2p::eval::edit_distance;
use g2p::layers::{lstm_step, BoundLstm};
use g2p::train::{clip_global_norm, sampling_prob};
use g2p::{AttentionKind, EncoderMode, LexiconEntry, Model, ModelConfig, Tape, Tensor, Vocabulary};

fn seq(max: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..4, 0..=max)
}

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-scale..scale, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

const PHONES: &[&str] = &["AA", "AE", "B", "D", "EH", "IY", "K", "L", "N", "S", "T", "Z"];

fn entries() -> impl Strategy<Value = Vec<LexiconEntry>> {
    let pron = prop::collection::vec(prop::sample::select(PHONES), 1..6);
    prop::collection::btree_map("[A-Z]{1,8}", prop::collection::vec(pron, 1..4), 1..12).prop_map(
        |m: BTreeMap<String, Vec<Vec<&str>>>| {
            m.into_iter()
                .map(|(w, prons)| {
                    let mut unique: Vec<Vec<String>> = Vec::new();
                    for p in prons {
                        let p: Vec<String> = p.into_iter().map(String::from).collect();
                        if !unique.contains(&p) {
                            unique.push(p);
                        }
                    }
                    LexiconEntry::new(&w, unique).unwrap()
                })
                .collect()
        },
    )
}

proptest! {
    #[test]
    fn edit_distance_is_a_metric(a in seq(10), b in seq(10), c in seq(10)) {
        let ab = edit_distance(&a, &b);
        prop_assert_eq!(edit_distance(&a, &a), 0);
        prop_assert_eq!(ab == 0, a == b);
        prop_assert_eq!(ab, edit_distance(&b, &a));
        prop_assert!(ab <= edit_distance(&a, &c) + edit_distance(&c, &b));
        prop_assert!(ab >= a.len().abs_diff(b.len()));
        prop_assert!(ab <= a.len().max(b.len()));
    }

    #[test]
    fn lexicon_survives_write_and_parse(lexicon in entries()) {
        let mut buf = Vec::new();
        write_lexicon(&lexicon, &mut buf).unwrap();
        let back = parse_lexicon_str(std::str::from_utf8(&buf).unwrap()).unwrap();
        prop_assert_eq!(back, lexicon);
    }

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(
        x in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let n = x.len();
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(vec![1, n], x.clone()).unwrap();
        let b = tape.constant(vec![1, n], x.iter().map(|v| v + shift).collect()).unwrap();
        let sa = tape.softmax(a).unwrap();
        let sb = tape.softmax(b).unwrap();
        let (pa, pb) = (tape.value(sa).to_vec(), tape.value(sb).to_vec());
        prop_assert!((pa.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(pa.iter().all(|&p| p >= 0.0));
        for (p, q) in pa.iter().zip(&pb) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_outputs_stay_in_unit_interval(
        u in 1usize..5,
        input in 1usize..4,
        seed in any::<u64>(),
        scale in prop::sample::select(vec![0.5, 5.0, 50.0]),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |r: usize, c: usize| {
            Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
        };
        let (wi, wh, b, x, h, c) = (t(4 * u, input), t(4 * u, u), t(1, 4 * u), t(2, input), t(2, u), t(2, u));
        let mut tape = Tape::<f64>::new();
        let cell = BoundLstm {
            w_input: tape.leaf(wi),
            w_hidden: tape.leaf(wh),
            bias: tape.leaf(b.reshape(vec![4 * u]).unwrap()),
            units: u,
        };
        let (x, h, c) = (tape.leaf(x), tape.leaf(h), tape.leaf(c));
        let (h1, _) = lstm_step(&mut tape, x, h, c, &cell).unwrap();
        let out = tape.value(h1);
        // saturated gates round to exactly 1 in floating point
        prop_assert!(out.iter().all(|v| v.abs() <= 1.0));
        if scale < 1.0 {
            prop_assert!(out.iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn global_context_is_a_convex_combination(
        len in 1usize..10,
        seed in any::<u64>(),
        enc in matrix(9, 3, 2.0),
        d in prop::collection::vec(-2.0f64..2.0, 2),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = AttentionParams::<f64>::new(AttentionKind::Global, 3, 3, 2, 4, &mut rng).unwrap();
        let enc = Tensor::new(vec![len, 3], enc.data()[..len * 3].to_vec()).unwrap();
        let step = global_attend(&enc, &Tensor::vector(d), &params).unwrap();
        prop_assert!((step.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for k in 0..3 {
            let col: Vec<f64> = (0..len).map(|i| enc.row(i)[k]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(step.context[k] >= lo - 1e-12 && step.context[k] <= hi + 1e-12);
        }
    }

    #[test]
    fn local_window_is_clipped_and_centred(t in 1usize..40, len in 1usize..30, d in 1usize..6) {
        let (lo, hi) = local_m_window(t, len, d);
        prop_assert!(1 <= lo && lo <= hi && hi <= len);
        prop_assert!((lo..=hi).contains(&t.min(len)));
        prop_assert!(hi - lo <= 2 * d);
    }

    #[test]
    fn teacher_forcing_decays_to_its_floor(floor in 0.0f64..1.0, horizon in 1u64..200, epoch in 0u64..400) {
        let p = sampling_prob(epoch, floor, horizon);
        let next = sampling_prob(epoch + 1, floor, horizon);
        prop_assert!(p <= 1.0 && p >= floor);
        prop_assert!(next <= p);
        prop_assert_eq!(sampling_prob(0, floor, horizon), 1.0);
        if epoch >= horizon {
            prop_assert_eq!(p, floor);
        }
    }

    #[test]
    fn clipping_bounds_norm_and_keeps_direction(
        grads in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 1..6), 1..4),
        max in 0.1f64..20.0,
    ) {
        let norm = |g: &[Vec<f64>]| g.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        let before = norm(&grads);
        let mut clipped = grads.clone();
        clip_global_norm(&mut clipped, max);
        prop_assert!(norm(&clipped) <= max * (1.0 + 1e-12));
        let factor = if before > max { max / before } else { 1.0 };
        for (a, b) in grads.iter().flatten().zip(clipped.iter().flatten()) {
            prop_assert!((a * factor - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn vocabulary_round_trips(symbols in prop::collection::vec(prop::sample::select(PHONES), 0..20)) {
        let vocab = Vocabulary::from_symbols(PHONES.iter().map(|s| s.to_string()).collect()).unwrap();
        let ids = vocab.encode(&symbols).unwrap();
        prop_assert!(ids.iter().all(|&i| !Vocabulary::is_reserved(i)));
        prop_assert_eq!(vocab.decode(&ids), symbols.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    }

    #[test]
    fn vote_winner_has_the_top_count(votes in prop::collection::vec(0u8..4, 1..8), seed in any::<u64>()) {
        let winner = ensemble_vote(&votes, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let count = |v: u8| votes.iter().filter(|&&x| x == v).count();
        let top = votes.iter().map(|&v| count(v)).max().unwrap();
        prop_assert_eq!(count(winner), top);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn checkpoints_round_trip_any_configuration(
        kind in prop::sample::select(vec![
            AttentionKind::None, AttentionKind::Global, AttentionKind::LocalM, AttentionKind::LocalP,
        ]),
        bidirectional in any::<bool>(),
        layers in 1usize..3,
        units in 1usize..5,
        embed_dim in 1usize..5,
        input_feeding in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let config = ModelConfig {
            encoder: if bidirectional { EncoderMode::Bidirectional } else { EncoderMode::ReverseUnidirectional },
            attention: kind,
            layers,
            units,
            embed_dim,
            input_feeding,
            seed,
            ..ModelConfig::default()
        };
        let g = Vocabulary::from_symbols(vec!["A".into(), "B".into(), "C".into()]).unwrap();
        let p = Vocabulary::from_symbols(vec!["K".into(), "S".into()]).unwrap();
        let model = Model::<f32>::new(config, g, p).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &CheckpointMeta::default(), &mut buf).unwrap();
        let (back, _): (Model<f32>, _) = read_checkpoint(buf.as_slice()).unwrap();
        prop_assert_eq!(back, model);
    }
}
