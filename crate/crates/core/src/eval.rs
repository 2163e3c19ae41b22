//! Checkpoint evaluation: deterministic encoding of a dataset, the metric
//! suite, the per-layer Gaussian-fit KL diagnostic, and supervised accuracy
//! probes. Nothing here mutates the checkpoint.

use crate::checkpoint::Checkpoint;
use crate::config::{MetricOptions, OptimizerConfig};
use crate::data::{Dataset, LayerLabels};
use crate::error::{Error, Result};
use crate::linalg;
use crate::metrics::{block_mig_detailed, mig_detailed, sap_detailed, z_diff, ScoreReport};
use crate::model::{assemble, BhivaeParams, EncodeMode};
use crate::ndgrad::{Array, Bindings, Graph};
use crate::nn::{init_mlp, one_hot, Activation, MlpSpec};
use crate::objectives::probe_nodes;
use crate::objectives::BlockPrior;
use crate::rng::{subseed, Stream, StreamKind};
use crate::train::Adam;

const ENCODE_CHUNK: usize = 512;

/// Deterministically encode every image; rows are assembled latents z.
pub fn encode_dataset(params: &BhivaeParams, dataset: &Dataset) -> Result<Array> {
    if dataset.image_dim() != params.arch.data_dim {
        return Err(Error::Validation(format!(
            "dataset images have {} pixels, model expects {}",
            dataset.image_dim(),
            params.arch.data_dim
        )));
    }
    let n = dataset.len();
    let d = params.arch.layout.latent_dim();
    let mut out = Vec::with_capacity(n * d);
    let mut start = 0;
    while start < n {
        let end = (start + ENCODE_CHUNK).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let x = dataset.gather_images(&rows)?;
        let code = params.encode(&x, EncodeMode::Deterministic, 0)?;
        out.extend_from_slice(assemble(&code).data());
        start = end;
    }
    Array::new(vec![n, d], out)
}

/// KL(N(μ̂, S) ∥ N(0, Σ)) with (μ̂, S) the maximum-likelihood Gaussian fit to
/// `samples` and Σ the feature-block prior of width `dim`.
fn gaussian_fit_kl(samples: &Array, prior: &BlockPrior) -> Result<f64> {
    let (n, d) = (samples.shape()[0], samples.shape()[1]);
    if d != prior.dim() {
        return Err(Error::Validation(format!(
            "{}-wide samples against {}-wide prior",
            d,
            prior.dim()
        )));
    }
    if n < 2 {
        return Err(Error::Validation("need at least 2 samples to fit".into()));
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for j in 0..d {
            mean[j] += samples.data()[r * d + j];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for r in 0..n {
        let row = &samples.data()[r * d..(r + 1) * d];
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in 0..d {
                cov[a * d + b] += da * (row[b] - mean[b]);
            }
        }
    }
    for c in cov.iter_mut() {
        *c /= n as f64;
    }
    // Tiny ridge so a collapsed dimension still yields a (large) finite KL.
    for j in 0..d {
        cov[j * d + j] += 1e-9;
    }

    let l_fit = linalg::cholesky(&cov, d)?;
    let l_prior = linalg::cholesky(prior.sigma(), d)?;
    let trace = linalg::chol_trace_inverse_times(&l_prior, d, &cov);
    let quad = linalg::chol_quadform(&l_prior, d, &mean);
    let logdet_fit = linalg::chol_logdet(&l_fit, d);
    let logdet_prior = linalg::chol_logdet(&l_prior, d);
    Ok(0.5 * (trace + quad - d as f64 + logdet_prior - logdet_fit))
}

/// Per-layer KL(q(s^i) ∥ p(s)) via the Gaussian moment fit (one entry per
/// layer).
pub fn per_layer_kl(params: &BhivaeParams, latents: &Array, rho: f64) -> Result<Vec<f64>> {
    let layout = &params.arch.layout;
    let n = latents.shape()[0];
    let mut out = Vec::with_capacity(layout.num_layers());
    for i in 0..layout.num_layers() {
        let offset = layout.block_offset(i);
        let width = layout.s_dims[i];
        let mut block = Vec::with_capacity(n * width);
        for r in 0..n {
            let row = &latents.data()[r * latents.shape()[1]..];
            block.extend_from_slice(&row[offset..offset + width]);
        }
        let samples = Array::new(vec![n, width], block)?;
        let prior = BlockPrior::new(width, &[(0, width)], rho)?;
        out.push(gaussian_fit_kl(&samples, &prior)?);
    }
    Ok(out)
}

/// Full metric report for a checkpoint on a dataset.
pub fn evaluate(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    options: &MetricOptions,
    seed: u64,
) -> Result<ScoreReport> {
    let latents = encode_dataset(&ckpt.params, dataset)?;
    let table = dataset.factors();
    let layout = &ckpt.arch.layout;

    let mig = mig_detailed(&latents, table, options.bins)?;
    let bmig = block_mig_detailed(&latents, layout, table, options.bins)?;
    let sap = sap_detailed(&latents, table)?;
    let zd = z_diff(&latents, table, options.votes, options.pairs, seed)?;
    let kl = per_layer_kl(&ckpt.params, &latents, ckpt.run.rho)?;

    let report = ScoreReport {
        z_diff_pct: zd,
        sap: sap.overall,
        mig: mig.overall,
        block_mig: bmig.overall,
        per_factor_mig: mig.per_factor,
        per_factor_sap: sap.per_factor,
        per_factor_block_mig: bmig.per_factor,
        factor_names: table.names().to_vec(),
        per_layer_kl: kl,
    };
    report.validate()?;
    Ok(report)
}

/// Deterministic (train, eval) row split; `eval_fraction` of rows held out.
pub fn split_rows(n: usize, eval_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let order = Stream::derive(seed, StreamKind::Metrics, 2).permutation(n);
    let eval_count = ((n as f64) * eval_fraction).round() as usize;
    let eval_count = eval_count.clamp(1, n.saturating_sub(1).max(1));
    let eval_rows = order[..eval_count].to_vec();
    let train_rows = order[eval_count..].to_vec();
    (train_rows, eval_rows)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Per-layer accuracies on `rows`: the classifier reading s^i, and the
/// adversarial probe reading the carrier h^i through projection + classifier.
pub fn supervised_accuracies(
    params: &BhivaeParams,
    dataset: &Dataset,
    labels: &[LayerLabels],
    rows: &[usize],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let layout = &params.arch.layout;
    let l = layout.num_layers();
    if labels.len() != l {
        return Err(Error::Validation(format!(
            "{} label sets for {} layers",
            labels.len(),
            l
        )));
    }
    if rows.is_empty() {
        return Err(Error::Validation("empty evaluation split".into()));
    }
    let x = dataset.gather_images(rows)?;
    let code = params.encode(&x, EncodeMode::Deterministic, 0)?;

    let mut cls_acc = Vec::with_capacity(l);
    let mut probe_acc = Vec::with_capacity(l);
    for i in 0..l {
        let carrier = if i + 1 < l {
            &code.h_parts[i]
        } else {
            &code.c_part
        };
        let cls_logits = params.classifiers[i].forward(&code.s_parts[i])?;
        let probe_logits = params.classifiers[i]
            .forward(&params.projections[i].forward(carrier)?)?;
        let mut cls_hits = 0usize;
        let mut probe_hits = 0usize;
        for (r, &row_idx) in rows.iter().enumerate() {
            let truth = labels[i].labels[row_idx];
            if argmax(cls_logits.row(r)) == truth {
                cls_hits += 1;
            }
            if argmax(probe_logits.row(r)) == truth {
                probe_hits += 1;
            }
        }
        cls_acc.push(cls_hits as f64 / rows.len() as f64);
        probe_acc.push(probe_hits as f64 / rows.len() as f64);
    }
    Ok((cls_acc, probe_acc))
}

/// Full-batch optimizer rounds for [`probe_leakage`]; enough for the tiny
/// linear projection to converge on a frozen representation.
const LEAK_PROBE_ROUNDS: usize = 4000;
const LEAK_PROBE_STEP_SCALE: f64 = 10.0;
/// Projection-through-classifier training is bilinear and lands in
/// different local optima from different inits; the adversary gets the
/// best of several restarts.
const LEAK_PROBE_RESTARTS: u64 = 3;

/// True linear leakage per layer: a fresh projection is trained to
/// convergence on the frozen carriers of `train_rows` (through the frozen
/// classifier), then scored on `eval_rows`; the strongest restart wins. The
/// projection kept in the checkpoint lags the trunk it chased during
/// training; retraining it on the final representation is the honest
/// read-out.
pub fn probe_leakage(
    params: &BhivaeParams,
    dataset: &Dataset,
    labels: &[LayerLabels],
    train_rows: &[usize],
    eval_rows: &[usize],
    seed: u64,
) -> Result<Vec<f64>> {
    let layout = &params.arch.layout;
    let l = layout.num_layers();
    if labels.len() != l {
        return Err(Error::Validation(format!(
            "{} label sets for {} layers",
            labels.len(),
            l
        )));
    }
    if train_rows.is_empty() || eval_rows.is_empty() {
        return Err(Error::Validation("empty probe split".into()));
    }
    let xt = dataset.gather_images(train_rows)?;
    let xe = dataset.gather_images(eval_rows)?;
    let ct = params.encode(&xt, EncodeMode::Deterministic, 0)?;
    let ce = params.encode(&xe, EncodeMode::Deterministic, 0)?;

    let mut leak = Vec::with_capacity(l);
    for i in 0..l {
        let (carrier_t, carrier_e) = if i + 1 < l {
            (&ct.h_parts[i], &ce.h_parts[i])
        } else {
            (&ct.c_part, &ce.c_part)
        };
        let width = carrier_t.shape()[1];
        let classes = labels[i].classes;
        let picked: Vec<usize> = train_rows.iter().map(|&r| labels[i].labels[r]).collect();
        let onehot = one_hot(&picked, classes);

        let spec = MlpSpec::new(
            vec![width, layout.s_dims[i]],
            Activation::Relu,
            Activation::Identity,
        )?;
        let cls = &params.classifiers[i];

        let mut g = Graph::new();
        let h = g.input("h", &[train_rows.len(), width])?;
        let y = g.input("y", &[train_rows.len(), classes])?;
        let loss = probe_nodes(&mut g, h, cls, &proj_template(&spec)?, "cls", "proj", y)?;
        let wrt = g.inputs_with_prefix("proj.");
        let ids: Vec<_> = wrt.iter().map(|(_, id)| *id).collect();

        let mut best = 0.0f64;
        for restart in 0..LEAK_PROBE_RESTARTS {
            let mut proj = init_mlp(&spec, subseed(seed, i as u64 * LEAK_PROBE_RESTARTS + restart))?;
            let mut adam = Adam::new(OptimizerConfig::default());
            for _ in 0..LEAK_PROBE_ROUNDS {
                let mut b = Bindings::new();
                b.set("h", carrier_t.clone());
                b.set("y", onehot.clone());
                cls.bind(&mut b, "cls");
                proj.bind(&mut b, "proj");
                let ev = g.evaluate(&b)?;
                let grads = g.gradients(&ev, loss, &ids)?;
                adam.begin_step();
                let mut by_name = std::collections::HashMap::new();
                for (name, id) in &wrt {
                    if let Some(gr) = grads.get(id) {
                        by_name.insert(name.clone(), gr.clone());
                    }
                }
                proj.visit_params_mut("proj", &mut |name: String, arr: &mut Array| {
                    if let Some(gr) = by_name.get(&name) {
                        adam.update_scaled(&name, arr.data_mut(), gr.data(), LEAK_PROBE_STEP_SCALE);
                    }
                });
            }

            let logits = cls.forward(&proj.forward(carrier_e)?)?;
            let mut hits = 0usize;
            for (r, &row_idx) in eval_rows.iter().enumerate() {
                if argmax(logits.row(r)) == labels[i].labels[row_idx] {
                    hits += 1;
                }
            }
            best = best.max(hits as f64 / eval_rows.len() as f64);
        }
        leak.push(best);
    }
    Ok(leak)
}

/// Placeholder projection used only to declare graph inputs; every restart
/// binds its own freshly initialized parameters over the same names.
fn proj_template(spec: &MlpSpec) -> Result<crate::nn::Mlp> {
    init_mlp(spec, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DatasetSource, ModelOptions, RunConfig};
    use crate::data::{gen_minidsprites, FactorRole, FactorSpec};
    use crate::model::{BlockLayout, Mode};
    use crate::train::train;

    fn small_dataset() -> Dataset {
        gen_minidsprites(
            &[
                FactorSpec {
                    name: "shape".into(),
                    cardinality: 3,
                    role: FactorRole::Shape,
                },
                FactorSpec {
                    name: "scale".into(),
                    cardinality: 3,
                    role: FactorRole::Scale,
                },
                FactorSpec {
                    name: "pos_x".into(),
                    cardinality: 4,
                    role: FactorRole::PosX,
                },
                FactorSpec {
                    name: "pos_y".into(),
                    cardinality: 4,
                    role: FactorRole::PosY,
                },
            ],
            32,
            0,
        )
        .unwrap()
    }

    fn quick_checkpoint(data: &Dataset) -> Checkpoint {
        let cfg = RunConfig {
            mode: Mode::Unsupervised,
            layout: BlockLayout::new(vec![2, 2], vec![6], 4).unwrap(),
            dataset: DatasetSource::Generate(crate::data::DataGenConfig {
                resolution: 32,
                factors: vec![],
                replicate: 1,
                seed: 0,
            }),
            beta: 4.0,
            gamma: 2.0,
            rho: 0.5,
            optimizer: Default::default(),
            batch_size: 16,
            total_steps: 2,
            seed: 3,
            metrics: MetricOptions {
                bins: 10,
                votes: 60,
                pairs: 8,
            },
            model: ModelOptions {
                enc_hidden: Some(vec![vec![16], vec![16]]),
                merge_dim: 8,
                dec_hidden: vec![16],
                disc_hidden: vec![8],
            },
            layer_factors: None,
            out_dir: None,
        };
        train(&cfg, data).unwrap().checkpoint
    }

    #[test]
    fn encode_dataset_shapes_and_determinism() {
        let data = small_dataset();
        let ckpt = quick_checkpoint(&data);
        let a = encode_dataset(&ckpt.params, &data).unwrap();
        let b = encode_dataset(&ckpt.params, &data).unwrap();
        assert_eq!(a.shape(), &[data.len(), 8]);
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_fit_kl_of_prior_samples_is_near_zero() {
        let prior = BlockPrior::new(2, &[(0, 2)], 0.5).unwrap();
        let samples = crate::objectives::sample_prior(&prior, 60_000, 9);
        let kl = gaussian_fit_kl(&samples, &prior).unwrap();
        assert!(kl.abs() < 0.01, "kl {kl}");
    }

    #[test]
    fn gaussian_fit_kl_matches_closed_form_for_standard_normal() {
        // N(0, I) samples against the ρ=0.5 block prior: the fit converges to
        // the analytic KL(N(0,I) ∥ N(0,Σ)).
        let standard = BlockPrior::new(2, &[(0, 2)], 0.0).unwrap();
        let samples = crate::objectives::sample_prior(&standard, 200_000, 4);
        let prior = BlockPrior::new(2, &[(0, 2)], 0.5).unwrap();
        let expected = crate::objectives::kl_standard_to_block_prior(&prior);
        let kl = gaussian_fit_kl(&samples, &prior).unwrap();
        assert!((kl - expected).abs() < 0.01, "kl {kl} vs {expected}");
    }

    #[test]
    fn evaluate_produces_a_valid_report() {
        let data = small_dataset();
        let ckpt = quick_checkpoint(&data);
        let report = evaluate(&ckpt, &data, &ckpt.run.metrics, 5).unwrap();
        report.validate().unwrap();
        assert_eq!(report.per_layer_kl.len(), 2);
        assert_eq!(report.factor_names.len(), 4);
        assert_eq!(report.per_factor_mig.len(), 4);

        // Determinism of the whole report.
        let again = evaluate(&ckpt, &data, &ckpt.run.metrics, 5).unwrap();
        assert_eq!(report, again);

        // Layout mismatch is refused.
        let wrong = gen_minidsprites(
            &[FactorSpec {
                name: "shape".into(),
                cardinality: 2,
                role: FactorRole::Shape,
            }],
            64,
            0,
        )
        .unwrap();
        assert!(evaluate(&ckpt, &wrong, &ckpt.run.metrics, 5).is_err());
    }

    #[test]
    fn split_rows_partitions() {
        let (train_rows, eval_rows) = split_rows(100, 0.2, 7);
        assert_eq!(train_rows.len(), 80);
        assert_eq!(eval_rows.len(), 20);
        let mut all: Vec<usize> = train_rows.iter().chain(&eval_rows).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        let (t2, e2) = split_rows(100, 0.2, 7);
        assert_eq!((train_rows, eval_rows), (t2, e2));
    }

    #[test]
    fn accuracies_on_identity_friendly_model() {
        // Untrained supervised model: accuracies are defined and in range.
        let data = small_dataset();
        let cfg = RunConfig {
            mode: Mode::Supervised,
            layout: BlockLayout::new(vec![2, 2], vec![6], 4).unwrap(),
            dataset: DatasetSource::Generate(crate::data::DataGenConfig {
                resolution: 32,
                factors: vec![],
                replicate: 1,
                seed: 0,
            }),
            beta: 4.0,
            gamma: 2.0,
            rho: 0.5,
            optimizer: Default::default(),
            batch_size: 16,
            total_steps: 1,
            seed: 3,
            metrics: Default::default(),
            model: ModelOptions {
                enc_hidden: Some(vec![vec![16], vec![16]]),
                merge_dim: 8,
                dec_hidden: vec![16],
                disc_hidden: vec![8],
            },
            layer_factors: Some(vec!["scale".into(), "shape".into()]),
            out_dir: None,
        };
        let out = train(&cfg, &data).unwrap();
        let labels = data
            .layer_labels(&["scale".to_string(), "shape".to_string()])
            .unwrap();
        let (_, eval_rows) = split_rows(data.len(), 0.25, 1);
        let (cls, probe) =
            supervised_accuracies(&out.checkpoint.params, &data, &labels, &eval_rows).unwrap();
        assert_eq!(cls.len(), 2);
        for v in cls.iter().chain(&probe) {
            assert!((0.0..=1.0).contains(v));
        }
    }
}
