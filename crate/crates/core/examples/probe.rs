use icnn_metric::encoder::encoder_init;
use icnn_metric::episodes::{EpisodeSpec, LabeledDataset, Split};
use icnn_metric::icnn::IcnnMode;
use icnn_metric::trainer::{evaluate, train, LossCombo, OptimizerConfig, TrainConfig};

fn main() {
    let mut ds6 = LabeledDataset::synth_gaussian(0, 10, 50, 32, 5.0, 1.0).unwrap();
    ds6.split_classes(0, 5, 0, 5).unwrap();
    let t_all = std::time::Instant::now();
    for dims in [vec![64usize], vec![128usize]] {
        for shots in [5usize, 1] {
            let spec = EpisodeSpec { ways: 5, shots, queries_per_class: 15 };
            let full = { let mut v = vec![32usize]; v.extend(&dims); v };
            let untrained = encoder_init(icnn_metric::episodes_mix(0), &full).unwrap();
            let base = evaluate(&untrained, &ds6, Split::Test, &spec, 200, 0).unwrap();
            for (name, losses, mode) in [
                ("iv", LossCombo { cross_entropy: Some(1.0), proto_triplet: None, icnn: Some(1.0) }, IcnnMode::SupportPlusQuery),
                ("vi", LossCombo { cross_entropy: Some(1.0), proto_triplet: None, icnn: Some(1.0) }, IcnnMode::QueryVsPrototypes),
                ("ce_pt_icnn", LossCombo::default(), IcnnMode::Full),
            ] {
                let mut cfg = TrainConfig {
                    episode: spec,
                    epochs: 30, tasks_per_epoch: 10, val_tasks: 20, eval_tasks: 200, seed: 0,
                    encoder_dims: Some(dims.clone()),
                    optimizer: OptimizerConfig::Adam { learning_rate: 3e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 },
                    ..TrainConfig::default()
                };
                cfg.losses = losses;
                cfg.icnn.mode = mode;
                let (enc, _) = train(&ds6, &cfg).unwrap();
                let tr = evaluate(&enc, &ds6, Split::Test, &spec, 200, 0).unwrap();
                let ok = tr.mean_accuracy + tr.ci95 >= 0.95;
                println!(
                    "dims {full:?} {shots}-shot {name: <10} untrained {:.4} trained {:.4} ± {:.4}  {}",
                    base.mean_accuracy, tr.mean_accuracy, tr.ci95, if ok { "PASS" } else { "fail" }
                );
            }
        }
    }
    println!("total {:.0}s", t_all.elapsed().as_secs_f64());
}
