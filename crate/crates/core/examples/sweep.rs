//! Scratch: seed-sweep candidate supervised layouts against the
//! criterion-5 gates using the exact acceptance measurement path.

use bhivae::config::{DatasetSource, MetricOptions, ModelOptions, OptimizerConfig, RunConfig};
use bhivae::data::{generate_from_config, DataGenConfig, FactorRole, FactorSpec};
use bhivae::model::{BlockLayout, Mode};
use bhivae::eval::{probe_leakage, split_rows, supervised_accuracies};
use bhivae::train::train;
use std::time::Instant;

fn desk_gen_config() -> DataGenConfig {
    DataGenConfig {
        resolution: 32,
        factors: vec![
            FactorSpec { name: "scale".into(), cardinality: 3, role: FactorRole::Scale },
            FactorSpec { name: "shape".into(), cardinality: 3, role: FactorRole::Shape },
            FactorSpec { name: "pos_x".into(), cardinality: 4, role: FactorRole::PosX },
            FactorSpec { name: "pos_y".into(), cardinality: 4, role: FactorRole::PosY },
        ],
        replicate: 35,
        seed: 0,
    }
}

fn base(seed: u64) -> RunConfig {
    RunConfig {
        mode: Mode::Supervised,
        layout: BlockLayout::new(vec![4, 2, 4], vec![4, 3], 1).unwrap(),
        dataset: DatasetSource::Generate(desk_gen_config()),
        beta: 10.0,
        gamma: 3.0,
        rho: 0.5,
        optimizer: OptimizerConfig::default(),
        batch_size: 128,
        total_steps: 5000,
        seed,
        metrics: MetricOptions::default(),
        model: ModelOptions {
            enc_hidden: Some(vec![vec![256, 128, 64], vec![256, 128], vec![256, 128]]),
            merge_dim: 64,
            dec_hidden: vec![256, 128],
            disc_hidden: vec![32],
        },
        layer_factors: Some(vec!["scale".into(), "pos_x".into(), "shape".into()]),
        out_dir: None,
    }
}

fn variant(name: &str, seed: u64) -> RunConfig {
    let mut cfg = base(seed);
    match name {
        "m3" => {}
        "n" => cfg.layout = BlockLayout::new(vec![4, 2, 4], vec![3, 3], 1).unwrap(),
        "m2" => {
            cfg.layout = BlockLayout::new(vec![4, 2, 4], vec![4, 2], 1).unwrap();
            cfg.model.merge_dim = 32;
            cfg.model.dec_hidden = vec![128, 64];
        }
        "j3" => {
            cfg.layout = BlockLayout::new(vec![4, 2, 2], vec![4, 3], 2).unwrap();
            cfg.model.merge_dim = 32;
            cfg.model.dec_hidden = vec![128, 64];
        }
        other => panic!("unknown variant {other}"),
    }
    cfg
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let name = args.get(1).expect("usage: sweep <variant> <seed>...");
    let seeds: Vec<u64> = args[2..].iter().map(|s| s.parse().unwrap()).collect();

    let dataset = generate_from_config(&desk_gen_config()).unwrap();
    let factors = ["scale".to_string(), "pos_x".to_string(), "shape".to_string()];
    let labels = dataset.layer_labels(&factors).unwrap();
    let (train_rows, eval_rows) = split_rows(dataset.len(), 0.2, 17);
    let gates = [0.433, 0.350, 0.433];

    for &seed in &seeds {
        let t0 = Instant::now();
        let cfg = variant(name, seed);
        let out = train(&cfg, &dataset).unwrap();
        let (cls, _) =
            supervised_accuracies(&out.checkpoint.params, &dataset, &labels, &eval_rows).unwrap();
        let leak = probe_leakage(
            &out.checkpoint.params,
            &dataset,
            &labels,
            &train_rows,
            &eval_rows,
            17,
        )
        .unwrap();
        let cls_ok = cls.iter().all(|&a| a >= 0.90);
        let leak_ok = (0..3).all(|i| leak[i] <= gates[i]);
        println!(
            "{name} seed {seed}: cls [{:.3} {:.3} {:.3}] leak [{:.3} {:.3} {:.3}] {} ({:.0}s)",
            cls[0], cls[1], cls[2], leak[0], leak[1], leak[2],
            if cls_ok && leak_ok { "PASS" } else { "fail" },
            t0.elapsed().as_secs_f64()
        );
    }
}
