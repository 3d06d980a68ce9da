use pamfn::config::ModelConfig;
use pamfn::data::{generate_synthetic, Modality, Split, SyntheticSpec};
use pamfn::metrics::{predict, Scorer};
use pamfn::network::Model;
use pamfn::training::{mse_loss, pretrain_branch, Phase1Config, TrainConfig};

#[test]
fn pretraining_cuts_train_mse_by_ninety_percent() {
    let spec = SyntheticSpec { n_videos: 16, n_test: 0, ..SyntheticSpec::default() };
    let (manifest, bundles) = generate_synthetic(&spec).unwrap();
    let train: Vec<_> = bundles
        .into_iter()
        .filter(|b| manifest.entry(&b.id).unwrap().split == Split::Train)
        .collect();
    assert_eq!(train.len(), 16);
    let labels: Vec<f64> = train.iter().map(|b| b.label).collect();
    let mc = ModelConfig::tiny(spec.dims);
    let cfg = TrainConfig {
        // batch 8 gives two steps per epoch on 16 videos
        phase1: Phase1Config { epochs: 200, batch_size: 8, ..Default::default() },
        window: 16,
        seed: 7,
        ..TrainConfig::default()
    };
    // pretraining starts from the same draw
    let untrained = Model::init(mc.clone(), cfg.seed).unwrap();
    for m in Modality::ALL {
        let before = mse_loss(&predict(&untrained, &train, Scorer::Branch(m)).unwrap(), &labels);
        let out = pretrain_branch(m, &train, &mc, &cfg).unwrap();
        let trained = Model { config: mc.clone(), params: out.last.params };
        let after = mse_loss(&predict(&trained, &train, Scorer::Branch(m)).unwrap(), &labels);
        eprintln!("{m}: {before:.5} -> {after:.5}");
        assert!(after <= 0.1 * before, "{m}: {before} -> {after}");
    }
}
