use std::path::PathBuf;

use deepnorm::checkpoint;
use deepnorm::data::{generate_task, Dataset, TaskKind, TaskSpec};
use deepnorm::init::InitFamily;
use deepnorm::layers::NormOrder;
use deepnorm::model::{ModelConfig, TokenBatch, TransformerModel};
use deepnorm::rng::Rng;
use deepnorm::train::TrainConfig;

fn corpus(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "empty corpus {}", dir.display());
    out
}

#[test]
fn checkpoint_file_roundtrip_preserves_outputs() {
    let cfg = ModelConfig {
        enc_layers: 2,
        dec_layers: 1,
        d_model: 8,
        d_ff: 16,
        n_heads: 2,
        vocab_size: 12,
        norm_order: NormOrder::V1,
        init_family: InitFamily::Lipschitz,
        ..ModelConfig::default()
    };
    let model = TransformerModel::build(cfg, &Rng::new(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/model.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.cfg, model.cfg);
    let src = TokenBatch::from_rows(&[vec![3, 4, 5, 6]]).unwrap();
    let tgt = TokenBatch::from_rows(&[vec![1, 7, 8]]).unwrap();
    assert_eq!(model.forward(&src, &tgt).unwrap().data, back.forward(&src, &tgt).unwrap().data);
}

#[test]
fn generated_dataset_survives_text_file() {
    let spec = TaskSpec {
        kind: TaskKind::Sort,
        train_size: 50,
        eval_size: 10,
        ..TaskSpec::default()
    };
    let (train, _) = generate_task(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.txt");
    let mut buf = Vec::new();
    train.write_text(&mut buf).unwrap();
    std::fs::write(&path, &buf).unwrap();
    let text = std::fs::read(&path).unwrap();
    assert_eq!(Dataset::read_text(&text[..], spec.vocab_size).unwrap(), train);
}

#[test]
fn dataset_reader_rejects_bad_lines() {
    for bad in ["3 4\n", "3 x\t3\n", "3 64\t3\n", "\t3\n", "3 4\t3\t5\n"] {
        assert!(Dataset::read_text(bad.as_bytes(), 64).is_err(), "{bad:?}");
    }
}

#[test]
fn configs_roundtrip_through_json() {
    let model = ModelConfig {
        norm_order: NormOrder::V1,
        tie_embeddings: true,
        ..ModelConfig::default()
    };
    let text = serde_json::to_string(&model).unwrap();
    assert_eq!(serde_json::from_str::<ModelConfig>(&text).unwrap(), model);

    let train = TrainConfig {
        lr_scale: 0.25,
        seed: 99,
        ..TrainConfig::default()
    };
    let text = serde_json::to_string(&train).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), train);

    let task = TaskSpec {
        kind: TaskKind::Reverse,
        ..TaskSpec::default()
    };
    let text = serde_json::to_string(&task).unwrap();
    assert_eq!(serde_json::from_str::<TaskSpec>(&text).unwrap(), task);

    assert!(serde_json::from_str::<TrainConfig>(r#"{"stepz": 3}"#).is_err());
}

#[test]
fn checkpoint_corpus_decodes_without_panic() {
    for (path, bytes) in corpus("checkpoint_decode") {
        let model = checkpoint::decode(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(checkpoint::encode(&model).unwrap(), bytes);
        for cut in 0..bytes.len() {
            assert!(checkpoint::decode(&bytes[..cut]).is_err());
        }
    }
}

#[test]
fn dataset_corpus_parses_without_panic() {
    for (path, bytes) in corpus("dataset_text") {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let parsed = Dataset::read_text(&bytes[..], 64);
        assert_eq!(parsed.is_ok(), !name.starts_with("out_of_range"), "{name}");
    }
}
