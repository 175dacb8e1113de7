//! Library walkthrough: train a small cascade on the synthetic ring task
//! and print per-stage metrics.
//!
//! Run with `cargo run --release --example synthetic_demo -p slpt-core`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slpt_core::backbone::BackboneConfig;
use slpt_core::cascade::{
    evaluate, train, CascadeConfig, CascadeModel, LossNormalizer, TrainConfig,
};
use slpt_core::data::synthetic::{SyntheticDataset, SyntheticSpec};
use slpt_core::data::mean_face;
use slpt_core::model::SlptConfig;
use slpt_core::nn::AdamState;
use slpt_core::tensor::Tensor;

fn main() {
    let seed = 7;
    let spec = SyntheticSpec::new(10, 64, 4242);
    let train_set = SyntheticDataset::new(spec.clone(), 0, 400).unwrap();
    let test_set = SyntheticDataset::new(spec.clone(), 1_000_000, 100).unwrap();

    let backbone_cfg = BackboneConfig {
        input_size: (64, 64),
        stage_channels: [5, 10, 10, 10],
        single_level: true,
        c_i: 16,
    };
    let slpt_cfg = SlptConfig { mlp_hidden: 64, ..SlptConfig::new(10, 16, 2, 2, 4) };
    let (left, right) = spec.interocular_indices();
    let cascade_cfg =
        CascadeConfig::new(3, (64, 64), LossNormalizer::InterOcular { left, right });
    let mean = mean_face(&train_set).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = CascadeModel::init(&mut rng, backbone_cfg, slpt_cfg, cascade_cfg, mean).unwrap();
    let params: Vec<Tensor> = model.parameters().into_iter().map(|(_, t)| t).collect();
    println!("parameters: {}", params.iter().map(Tensor::numel).sum::<usize>());

    let mut optimizer = AdamState::new(&params);
    let config = TrainConfig {
        epochs: 10,
        batch_size: 20,
        lr: 1e-3,
        milestones: vec![8],
        lr_decay: 0.1,
        seed,
        augment: None,
    };
    train(&model, &train_set, &config, &mut optimizer, |stats| {
        println!("{}", stats.log_line());
    })
    .unwrap();

    let report = evaluate(&model, &test_set, 10.0, 32).unwrap();
    println!(
        "held-out NME per stage: {}",
        report
            .stage_nme
            .iter()
            .map(|v| format!("{v:.3}%"))
            .collect::<Vec<_>>()
            .join(" -> ")
    );
    println!("FR@10% = {:.2}%, AUC = {:.3}", report.failure_rate, report.auc);
}
