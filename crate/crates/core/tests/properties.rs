use deepnorm::analysis::{verify_std_bound, BoundedDistributionSpec, DistKind};
use deepnorm::checkpoint;
use deepnorm::data::{Batch, Dataset, Example};
use deepnorm::init::InitScheme;
use deepnorm::model::{ModelConfig, TransformerModel};
use deepnorm::rng::Rng;
use deepnorm::Graph;
use proptest::prelude::*;

fn dist_kind() -> impl Strategy<Value = DistKind> {
    prop_oneof![
        Just(DistKind::Uniform),
        (0.05f64..10.0, 0.05f64..10.0).prop_map(|(alpha, beta)| DistKind::Beta { alpha, beta }),
        (0.0f64..=1.0).prop_map(|p| DistKind::TwoPoint { p }),
        (0.0f64..1.0, 0.0f64..2.0).prop_map(|(m, std)| DistKind::TruncatedNormal { mean: m, std }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn std_stays_below_support_width(kind in dist_kind(), a in -5.0f64..5.0, w in 0.01f64..10.0, seed in any::<u64>()) {
        let b = a + w;
        // Truncated-normal means are drawn in [0, 1) and mapped into the support.
        let kind = match kind {
            DistKind::TruncatedNormal { mean, std } => DistKind::TruncatedNormal { mean: a + mean * w, std: std * w },
            k => k,
        };
        let spec = BoundedDistributionSpec::new(kind, a, b);
        let r = verify_std_bound(&spec, 2000, &mut Rng::new(seed)).unwrap();
        prop_assert!(r.holds, "{r:?}");
        prop_assert!(r.empirical_std <= w / 2.0 + 1e-12);
    }

    #[test]
    fn init_samples_within_bound(i in 1usize..40, o in 1usize..40, which in 0usize..3, seed in any::<u64>()) {
        let scheme = match which {
            0 => InitScheme::Glorot { isize: i, osize: o },
            1 => InitScheme::LipschitzLinear { isize: i, osize: o },
            _ => InitScheme::LipschitzEmbedding { vsize: i, esize: o },
        };
        let t = scheme.sample(&mut Rng::new(seed)).unwrap();
        let bound = scheme.bound();
        prop_assert!(t.data.iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn softmax_rows_sum_to_one(xs in prop::collection::vec(-50.0f64..50.0, 1..40), cols in 1usize..8) {
        let rows = xs.len() / cols;
        prop_assume!(rows > 0);
        let mut g = Graph::new();
        let x = g.constant(vec![rows, cols], xs[..rows * cols].to_vec()).unwrap();
        let y = g.softmax(x, 1).unwrap();
        for row in g.value(y).chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn dataset_text_roundtrip(rows in prop::collection::vec(
        (prop::collection::vec(3usize..50, 1..12), prop::collection::vec(3usize..50, 1..12)), 0..20)) {
        let ds = Dataset { examples: rows.into_iter().map(|(src, tgt)| Example { src, tgt }).collect() };
        let mut buf = Vec::new();
        ds.write_text(&mut buf).unwrap();
        let back = Dataset::read_text(&buf[..], 50).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn batch_unpad_roundtrip(rows in prop::collection::vec(
        (prop::collection::vec(3usize..50, 1..12), prop::collection::vec(3usize..50, 1..12)), 1..10)) {
        let ex: Vec<Example> = rows.into_iter().map(|(src, tgt)| Example { src, tgt }).collect();
        let b = Batch::from_examples(&ex.iter().collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(b.target_tokens(), ex.iter().map(|e| e.tgt.len() + 1).sum::<usize>());
        prop_assert_eq!(b.unpad(), ex);
    }

    #[test]
    fn dataset_reader_never_panics(text in ".{0,200}") {
        let _ = Dataset::read_text(text.as_bytes(), 64);
    }

    #[test]
    fn config_parsers_never_panic(text in ".{0,200}") {
        let _ = serde_json::from_str::<ModelConfig>(&text);
        let _ = serde_json::from_str::<deepnorm::train::TrainConfig>(&text);
        let _ = serde_json::from_str::<deepnorm::data::TaskSpec>(&text);
    }
}

fn tiny_checkpoint() -> Vec<u8> {
    let cfg = ModelConfig {
        enc_layers: 1,
        dec_layers: 1,
        d_model: 4,
        d_ff: 8,
        n_heads: 2,
        vocab_size: 9,
        ..ModelConfig::default()
    };
    checkpoint::encode(&TransformerModel::build(cfg, &Rng::new(1)).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn checkpoint_decoder_survives_mutation(edits in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..6),
                                            cut in any::<prop::sample::Index>()) {
        let mut bytes = tiny_checkpoint();
        for (at, v) in edits {
            let i = at.index(bytes.len());
            bytes[i] = v;
        }
        let end = cut.index(bytes.len() + 1);
        let _ = checkpoint::decode(&bytes[..end]);
    }

    #[test]
    fn checkpoint_decoder_survives_noise(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let mut framed = b"DNLB1".to_vec();
        framed.extend(bytes);
        let _ = checkpoint::decode(&framed);
    }
}
