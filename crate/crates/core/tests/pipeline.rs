use sinr::checkpoint::Checkpoint;
use sinr::encoder::EncoderConfig;
use sinr::hsb;
use sinr::metrics::Quality;
use sinr::model::ModelKind;
use sinr::optics::{forward_cassi, init_input, Mask};
use sinr::scene::{read_dataset_dir, write_dataset_dir, Dataset, DatasetConfig};
use sinr::training::{evaluate, TrainConfig, Trainer};

fn small_config(kind: ModelKind) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model.kind = kind;
    cfg.model.sinr.encoder = EncoderConfig {
        channels: 4,
        blocks: 1,
    };
    cfg.model.sinr.fce_dim = 3;
    cfg.dataset = DatasetConfig {
        train: 4,
        test: 2,
        height: 8,
        width: 8,
        bands: 4,
        ..Default::default()
    };
    cfg.steps = 6;
    cfg.batch = 2;
    cfg
}

#[test]
fn train_evaluate_and_restore() {
    for kind in [ModelKind::Sinr, ModelKind::Trilinear] {
        let cfg = small_config(kind);
        let data = Dataset::synthetic(&cfg.dataset);
        let mut trainer = Trainer::new(cfg.clone(), &data, 2).unwrap();
        for _ in 0..cfg.steps {
            assert!(trainer.step().unwrap().is_finite());
        }
        let rows = evaluate(trainer.model(), &data.test, &data, trainer.mask(), cfg.shift, &[1, 3]).unwrap();
        assert_eq!(rows.iter().map(|r| r.scale).collect::<Vec<_>>(), vec![1, 3]);
        assert!(rows.iter().all(|r| r.model == kind.name() && r.quality.psnr.is_finite()));

        let ck = Checkpoint {
            config: cfg.clone(),
            step: trainer.steps_done(),
            model: trainer.model().clone(),
            adam: trainer.adam().clone(),
        };
        let restored = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        let again = evaluate(&restored.model, &data.test, &data, trainer.mask(), cfg.shift, &[1, 3]).unwrap();
        assert_eq!(rows, again);
    }
}

#[test]
fn reconstruct_from_a_simulated_measurement() {
    let cfg = small_config(ModelKind::Sinr);
    let data = Dataset::synthetic(&cfg.dataset);
    let trainer = Trainer::new(cfg.clone(), &data, 1).unwrap();
    let truth = data.test[0].render(8, 8, 4).unwrap();
    let mask = Mask::random(8, 8, 1);
    let y = forward_cassi(&truth, &mask, 2).unwrap();
    assert_eq!(y.width(), 8 + 2 * 3);
    let input = init_input(&y, &mask, 2, 4).unwrap();
    for scale in [1, 2, 5] {
        let out = trainer.model().reconstruct(&input, 4 * scale).unwrap();
        assert_eq!(out.dims(), (8, 8, 4 * scale));
    }
    let q = Quality::measure(&truth, &truth).unwrap();
    assert_eq!(q.csv_row(), "100.0,1.0,0.0,1.0");
}

#[test]
fn generated_directory_matches_in_memory_set() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(ModelKind::Sinr).dataset;
    write_dataset_dir(dir.path(), &cfg).unwrap();
    let (loaded, recorded) = read_dataset_dir(dir.path()).unwrap();
    assert_eq!(recorded, Some(cfg));
    let direct = Dataset::synthetic(&cfg);
    for (a, b) in loaded.test.iter().zip(&direct.test) {
        assert_eq!(a.render(8, 8, 12).unwrap(), b.render(8, 8, 12).unwrap());
    }
    let stored = hsb::read(&dir.path().join("train/0001.hsb")).unwrap();
    assert_eq!(stored.dims(), (8, 8, 4));
}
