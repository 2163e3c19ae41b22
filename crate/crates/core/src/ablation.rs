//! Block-vs-single comparison harness: train the same single-layer supervised
//! model twice — once with a 2-wide feature block for the chosen factor, once
//! with a 1-wide block (the freed dimension moves into the residual so d(z)
//! stays fixed) — and report held-out classifier accuracy for both arms.

use serde::{Deserialize, Serialize};

use crate::config::{DatasetSource, MetricOptions, ModelOptions, OptimizerConfig, RunConfig};
use crate::data::{DataGenConfig, Dataset};
use crate::error::Result;
use crate::eval::{split_rows, supervised_accuracies};
use crate::model::{BlockLayout, Mode};
use crate::train::train;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub label: String,
    pub block_width: usize,
    pub latent_dim: usize,
    /// Held-out accuracy of the classifier reading the factor's block.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub factor: String,
    pub steps: u64,
    pub seed: u64,
    pub arms: Vec<AblationArm>,
}

fn arm_config(dataset: &Dataset, factor: &str, width: usize, steps: u64, seed: u64) -> RunConfig {
    // d(z) fixed at 6: the single arm hands the spare dimension to the
    // residual block.
    let c_dim = 6 - width;
    RunConfig {
        mode: Mode::Supervised,
        layout: BlockLayout::new(vec![width], vec![], c_dim).unwrap(),
        // Echo only; training consumes the dataset passed in directly.
        dataset: DatasetSource::Generate(DataGenConfig {
            resolution: dataset.resolution(),
            factors: vec![],
            replicate: 1,
            seed: 0,
        }),
        beta: 10.0,
        gamma: 3.0,
        rho: 0.5,
        optimizer: OptimizerConfig::default(),
        batch_size: 64.min(dataset.len()),
        total_steps: steps,
        seed,
        metrics: MetricOptions::default(),
        model: ModelOptions {
            enc_hidden: Some(vec![vec![64]]),
            merge_dim: 16,
            dec_hidden: vec![64],
            disc_hidden: vec![32],
        },
        layer_factors: Some(vec![factor.to_string()]),
        out_dir: None,
    }
}

/// Train both arms on `dataset` and measure held-out accuracy for `factor`.
pub fn run_ablation(
    dataset: &Dataset,
    factor: &str,
    steps: u64,
    seed: u64,
) -> Result<AblationReport> {
    let labels = dataset.layer_labels(&[factor.to_string()])?;
    let (_, eval_rows) = split_rows(dataset.len(), 0.25, seed);

    let mut arms = Vec::with_capacity(2);
    for (label, width) in [("block", 2usize), ("single", 1usize)] {
        let cfg = arm_config(dataset, factor, width, steps, seed);
        let out = train(&cfg, dataset)?;
        let (cls, _) = supervised_accuracies(&out.checkpoint.params, dataset, &labels, &eval_rows)?;
        arms.push(AblationArm {
            label: label.to_string(),
            block_width: width,
            latent_dim: cfg.layout.latent_dim(),
            accuracy: cls[0],
        });
    }
    Ok(AblationReport {
        factor: factor.to_string(),
        steps,
        seed,
        arms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_minidsprites, FactorRole, FactorSpec};

    fn tiny() -> Dataset {
        gen_minidsprites(
            &[
                FactorSpec {
                    name: "shape".into(),
                    cardinality: 2,
                    role: FactorRole::Shape,
                },
                FactorSpec {
                    name: "pos_x".into(),
                    cardinality: 4,
                    role: FactorRole::PosX,
                },
            ],
            32,
            0,
        )
        .unwrap()
        .replicate(6)
        .unwrap()
    }

    #[test]
    fn report_compares_both_widths_at_fixed_latent_dim() {
        let data = tiny();
        let report = run_ablation(&data, "shape", 20, 5).unwrap();
        assert_eq!(report.arms.len(), 2);
        assert_eq!(report.arms[0].block_width, 2);
        assert_eq!(report.arms[1].block_width, 1);
        assert_eq!(report.arms[0].latent_dim, report.arms[1].latent_dim);
        for arm in &report.arms {
            assert!((0.0..=1.0).contains(&arm.accuracy), "{arm:?}");
        }

        let json = serde_json::to_string(&report).unwrap();
        let back: AblationReport = serde_json::from_str(&json).unwrap();
        assert_eq!(report, back);

        let again = run_ablation(&data, "shape", 20, 5).unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn unknown_factor_is_refused() {
        let data = tiny();
        let err = run_ablation(&data, "hue", 5, 0).unwrap_err().to_string();
        assert!(err.contains("hue"), "{err}");
    }
}
