//! Scratch timing harness (ignored by default).

use graphdiag_core::data::{self, synth, SynthSpec};
use graphdiag_core::graph::GraphVariant;
use graphdiag_core::models::{train, GnnConfig, Model, TrainConfig};
use graphdiag_core::tensor::rng;

#[test]
#[ignore]
fn time_one_training_epoch() {
    let spec = SynthSpec::default_desk(7);
    let t0 = std::time::Instant::now();
    let runs = synth::generate_runs(&spec, 20).unwrap();
    println!("generate: {:?} ({} runs)", t0.elapsed(), runs.len());

    let (mut train_runs, _test_runs) = data::split_runs(runs, 0.8, 13);
    let stats = data::fit_norm(&train_runs).unwrap();
    data::apply_norm(&mut train_runs, &stats).unwrap();
    let windows = data::windows_of(&train_runs, 50, 5);
    println!("windows: {}", windows.len());

    let mut rng = rng::seeded(0);
    let cfg = GnnConfig {
        n_nodes: 12,
        window: 50,
        hidden: 64,
        n_classes: 9,
        variant: GraphVariant::TanhW,
        alpha: 0.1,
        embed_dim: 40,
        top_k: None,
    };
    let mut model = Model::new_gnn(&cfg, &mut rng).unwrap();
    let t1 = std::time::Instant::now();
    let history = train(
        &mut model,
        &windows,
        &TrainConfig {
            epochs: 1,
            learning_rate: 0.001,
            batch_size: 64,
            seed: 0,
        },
    )
    .unwrap();
    println!("one epoch: {:?}, loss {:?}", t1.elapsed(), history.epoch_loss);

    let t2 = std::time::Instant::now();
    let streams = graphdiag_core::eval::classify_runs(&model, &_test_runs[..4], 50, 1).unwrap();
    println!("eval 4 raw runs: {:?} ({} entries)", t2.elapsed(), streams[0].entries.len());
}
