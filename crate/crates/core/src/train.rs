//! Training driver: Adam, the supervised and unsupervised step loops, and the
//! JSON-lines loss trace. Everything is a single-threaded state machine over
//! optimizer steps so a (config, seed) pair fully determines the run.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, OptMoments};
use crate::config::{OptimizerConfig, RunConfig};
use crate::data::{batch_iter, default_layer_factors, Dataset, LayerLabels};
use crate::error::{Error, Result};
use crate::model::{BhivaeParams, Mode};
use crate::ndgrad::{Array, Bindings, Graph, NodeId};
use crate::nn::one_hot;
use crate::objectives::{BlockPrior, LossWeights};
use crate::rng::{subseed, Stream, StreamKind};

/// Adam with per-parameter moment vectors keyed by parameter name.
pub struct Adam {
    cfg: OptimizerConfig,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn resume(cfg: OptimizerConfig, moments: OptMoments) -> Self {
        Adam {
            cfg,
            t: moments.t,
            m: moments.m,
            v: moments.v,
        }
    }

    pub fn moments(&self) -> OptMoments {
        OptMoments {
            t: self.t,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    /// Advance the shared step counter; call once per training step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut [f64], grad: &[f64]) {
        self.update_scaled(name, param, grad, 1.0);
    }

    /// Adam update with the step size multiplied by `scale`.
    pub fn update_scaled(&mut self, name: &str, param: &mut [f64], grad: &[f64], scale: f64) {
        debug_assert_eq!(param.len(), grad.len());
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; param.len()]);
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; param.len()]);
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..param.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            param[i] -= scale * self.cfg.step_size * m_hat / (v_hat.sqrt() + self.cfg.epsilon);
        }
    }
}

/// One step of the loss trace; `terms` holds the raw (unweighted) components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
}

pub fn write_trace(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for record in trace {
        serde_json::to_writer(&mut file, record)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRecord>,
}

/// Trainable (name, input node) pairs of `graph`, filtered by name.
fn trainables(
    graph: &Graph,
    params: &BhivaeParams,
    keep: impl Fn(&str) -> bool,
) -> Vec<(String, NodeId)> {
    let mut out = Vec::new();
    params.visit_params(&mut |name, _| {
        if keep(&name) {
            if let Some(id) = graph.input_id(&name) {
                out.push((name, id));
            }
        }
    });
    out
}

fn apply_updates(
    params: &mut BhivaeParams,
    pairs: &[(String, NodeId)],
    grads: HashMap<NodeId, Array>,
    adam: &mut Adam,
) {
    apply_updates_scaled(params, pairs, grads, adam, 1.0);
}

fn apply_updates_scaled(
    params: &mut BhivaeParams,
    pairs: &[(String, NodeId)],
    mut grads: HashMap<NodeId, Array>,
    adam: &mut Adam,
    scale: f64,
) {
    let mut by_name: BTreeMap<&str, Array> = BTreeMap::new();
    for (name, id) in pairs {
        if let Some(g) = grads.remove(id) {
            by_name.insert(name, g);
        }
    }
    params.visit_params_mut(&mut |name, array: &mut Array| {
        if let Some(g) = by_name.get(name.as_str()) {
            adam.update_scaled(&name, array.data_mut(), g.data(), scale);
        }
    });
}

fn abort_nonfinite(step: u64, inner: Error, last: Option<&TraceRecord>) -> Error {
    let breakdown = match last {
        Some(rec) => rec
            .terms
            .iter()
            .map(|(k, v)| format!("{k}={v:.6}"))
            .collect::<Vec<_>>()
            .join(", "),
        None => "none recorded".into(),
    };
    Error::numeric(
        format!("training step {step}"),
        format!("{inner}; last finite terms: {breakdown}"),
    )
}

/// Projection-probe updates per model step (supervised mode).
const PROBE_ROUNDS: usize = 10;

/// Step-size multiplier for probe updates. The projection has to track
/// the leakage direction of a trunk that moves every step; at the
/// model's step size it lags far behind and the erasure gradient points
/// at stale directions.
const PROBE_STEP_SCALE: f64 = 10.0;

struct SupervisedGraphs {
    main: Graph,
    total: NodeId,
    kl: Vec<NodeId>,
    ce: Vec<NodeId>,
    erasure: Vec<NodeId>,
    recon: NodeId,
    h_nodes: Vec<NodeId>,
    main_trainables: Vec<(String, NodeId)>,
    probe: Graph,
    probe_total: NodeId,
    probe_terms: Vec<NodeId>,
    probe_trainables: Vec<(String, NodeId)>,
}

fn build_supervised(
    params: &BhivaeParams,
    batch: usize,
    weights: &LossWeights,
) -> Result<SupervisedGraphs> {
    let arch = &params.arch;
    let layout = &arch.layout;
    let l = layout.num_layers();

    let mut g = Graph::new();
    let x = g.input("x", &[batch, arch.data_dim])?;
    let enc = params.encoder_nodes(&mut g, x, batch, true)?;
    let logvars = enc.logvar_nodes.as_ref().expect("stochastic encoder");

    let mut kl = Vec::with_capacity(l);
    let mut ce = Vec::with_capacity(l);
    let mut erasure = Vec::with_capacity(l);
    let mut weighted = Vec::new();
    for i in 0..l {
        let s_dim = layout.s_dims[i];
        let mu_s = g.slice(enc.mean_nodes[i], 0, s_dim)?;
        let lv_s = g.slice(logvars[i], 0, s_dim)?;
        let kl_i = crate::objectives::kl_diag_nodes(&mut g, mu_s, lv_s)?;
        g.name(kl_i, format!("kl.{i}"));
        kl.push(kl_i);

        let y = g.input(format!("y.{i}"), &[batch, arch.class_counts[i]])?;
        let logits = params.classifiers[i].nodes(&mut g, enc.s_nodes[i], &format!("cls.{i}"))?;
        let ce_i = crate::nn::cross_entropy_from_onehot_nodes(&mut g, logits, y)?;
        g.name(ce_i, format!("ce.{i}"));
        ce.push(ce_i);

        let er_i = crate::objectives::erasure_nodes(
            &mut g,
            enc.carrier_nodes[i],
            &params.classifiers[i],
            &params.projections[i],
            &format!("cls.{i}"),
            &format!("proj.{i}"),
        )?;
        g.name(er_i, format!("erasure.{i}"));
        erasure.push(er_i);

        let ce_w = g.scale(ce_i, weights.beta)?;
        let layer = g.add(kl_i, ce_w)?;
        let er_w = g.scale(er_i, weights.gamma)?;
        weighted.push(g.add(layer, er_w)?);
    }

    let x_hat = params.decoder_nodes(&mut g, &enc.s_nodes, enc.c_node())?;
    let recon = crate::objectives::reconstruction_nodes(&mut g, x, x_hat)?;
    g.name(recon, "recon");
    let mut total = g.scale(recon, weights.beta)?;
    for w in weighted {
        total = g.add(total, w)?;
    }
    g.name(total, "total");

    let main_trainables = trainables(&g, params, |name| !name.starts_with("proj."));

    // Adversarial probe: projections chase the labels from detached carriers
    // through the frozen shared classifiers.
    let mut pg = Graph::new();
    let mut probe_terms = Vec::with_capacity(l);
    let mut probe_total = None;
    for i in 0..l {
        let h = pg.input(format!("h.{i}"), &[batch, layout.carrier_dim(i)])?;
        let y = pg.input(format!("y.{i}"), &[batch, arch.class_counts[i]])?;
        let loss = crate::objectives::probe_nodes(
            &mut pg,
            h,
            &params.classifiers[i],
            &params.projections[i],
            &format!("cls.{i}"),
            &format!("proj.{i}"),
            y,
        )?;
        pg.name(loss, format!("probe.{i}"));
        probe_terms.push(loss);
        probe_total = Some(match probe_total {
            None => loss,
            Some(acc) => pg.add(acc, loss)?,
        });
    }
    let probe_total = probe_total.expect("at least one layer");
    let probe_trainables = trainables(&pg, params, |name| name.starts_with("proj."));

    Ok(SupervisedGraphs {
        main: g,
        total,
        kl,
        ce,
        erasure,
        recon,
        h_nodes: enc.carrier_nodes,
        main_trainables,
        probe: pg,
        probe_total,
        probe_terms,
        probe_trainables,
    })
}

struct UnsupervisedGraphs {
    gen: Graph,
    total: NodeId,
    gen_kl: Vec<NodeId>,
    gen_tc: Vec<NodeId>,
    recon: NodeId,
    z_nodes: Vec<NodeId>,
    gen_trainables: Vec<(String, NodeId)>,
    discs: Vec<DiscGraph>,
}

struct DiscGraph {
    graph: Graph,
    loss: NodeId,
    trainables: Vec<(String, NodeId)>,
}

fn build_unsupervised(
    params: &BhivaeParams,
    batch: usize,
    weights: &LossWeights,
) -> Result<UnsupervisedGraphs> {
    let arch = &params.arch;
    let layout = &arch.layout;
    let l = layout.num_layers();

    let mut g = Graph::new();
    let x = g.input("x", &[batch, arch.data_dim])?;
    let enc = params.encoder_nodes(&mut g, x, batch, false)?;

    let mut gen_kl = Vec::with_capacity(l);
    let mut gen_tc = Vec::with_capacity(l);
    let mut weighted = Vec::new();
    for i in 0..l {
        let (kl_i, tc_i) = crate::objectives::generator_terms_nodes(
            &mut g,
            &params.discriminators[i],
            enc.z_nodes[i],
            &format!("disc.{i}"),
        )?;
        g.name(kl_i, format!("gen_kl.{i}"));
        g.name(tc_i, format!("gen_tc.{i}"));
        gen_kl.push(kl_i);
        gen_tc.push(tc_i);
        let tc_w = g.scale(tc_i, weights.gamma)?;
        weighted.push(g.add(kl_i, tc_w)?);
    }

    let x_hat = params.decoder_nodes(&mut g, &enc.s_nodes, enc.c_node())?;
    let recon = crate::objectives::reconstruction_nodes(&mut g, x, x_hat)?;
    g.name(recon, "recon");
    let mut total = g.scale(recon, weights.beta)?;
    for w in weighted {
        total = g.add(total, w)?;
    }
    g.name(total, "total");

    let gen_trainables = trainables(&g, params, |name| !name.starts_with("disc."));

    let mut discs = Vec::with_capacity(l);
    for i in 0..l {
        let dim = layout.layer_out_dim(i);
        let mut dg = Graph::new();
        let real = dg.input("real", &[batch, dim])?;
        let prior = dg.input("prior", &[batch, dim])?;
        let perm = dg.input("perm", &[batch, dim])?;
        let loss = crate::objectives::discriminator_loss_nodes(
            &mut dg,
            &params.discriminators[i],
            real,
            prior,
            perm,
            &format!("disc.{i}"),
        )?;
        dg.name(loss, format!("disc.{i}"));
        let prefix = format!("disc.{i}.");
        let trainables = trainables(&dg, params, |name| name.starts_with(&prefix));
        discs.push(DiscGraph {
            graph: dg,
            loss,
            trainables,
        });
    }

    Ok(UnsupervisedGraphs {
        gen: g,
        total,
        gen_kl,
        gen_tc,
        recon,
        z_nodes: enc.z_nodes,
        gen_trainables,
        discs,
    })
}

/// Split a [n, a+b] matrix into [n, a] and [n, b] column halves.
fn split_cols(joint: &Array, a: usize) -> (Array, Array) {
    let n = joint.shape()[0];
    let total = joint.shape()[1];
    let b = total - a;
    let mut left = Vec::with_capacity(n * a);
    let mut right = Vec::with_capacity(n * b);
    for r in 0..n {
        let row = &joint.data()[r * total..(r + 1) * total];
        left.extend_from_slice(&row[..a]);
        right.extend_from_slice(&row[a..]);
    }
    (
        Array::new(vec![n, a], left).expect("split shapes"),
        Array::new(vec![n, b], right).expect("split shapes"),
    )
}

pub fn train(config: &RunConfig, dataset: &Dataset) -> Result<TrainOutput> {
    config.validate()?;
    let data_dim = dataset.image_dim();
    let l = config.layout.num_layers();

    let (arch, layer_labels): (_, Option<Vec<LayerLabels>>) = match config.mode {
        Mode::Supervised => {
            let names = match &config.layer_factors {
                Some(names) => names.clone(),
                None => default_layer_factors(l)?,
            };
            let labels = dataset.layer_labels(&names)?;
            let counts = labels.iter().map(|ll| ll.classes).collect();
            (config.arch(data_dim, counts)?, Some(labels))
        }
        Mode::Unsupervised => (config.arch(data_dim, vec![])?, None),
    };

    let mut params = BhivaeParams::init(&arch, config.seed)?;
    let weights = LossWeights::new(config.beta, config.gamma)?;
    let mut adam = Adam::new(config.optimizer.clone());
    let mut iter = batch_iter(dataset, config.batch_size, config.seed)?;
    let mut trace: Vec<TraceRecord> = Vec::with_capacity(config.total_steps as usize);

    match config.mode {
        Mode::Supervised => {
            let graphs = build_supervised(&params, config.batch_size, &weights)?;
            let labels = layer_labels.as_ref().expect("supervised labels");
            for step in 0..config.total_steps {
                let batch = iter.next().expect("infinite iterator");
                let mut b = Bindings::new();
                params.bind_all(&mut b);
                b.set("x", batch.images.clone());
                let mut noise = Stream::derive(config.seed, StreamKind::EncodeNoise, step);
                for i in 0..l {
                    let width = arch.layout.layer_out_dim(i);
                    let mut buf = vec![0.0; config.batch_size * width];
                    noise.fill_normal(&mut buf);
                    b.set(
                        format!("eps.{i}"),
                        Array::new(vec![config.batch_size, width], buf)?,
                    );
                }
                let mut onehots = Vec::with_capacity(l);
                for (i, ll) in labels.iter().enumerate() {
                    let picked: Vec<usize> =
                        batch.indices.iter().map(|&s| ll.labels[s]).collect();
                    let y = one_hot(&picked, ll.classes);
                    onehots.push(y.clone());
                    b.set(format!("y.{i}"), y);
                }

                let eval = graphs
                    .main
                    .evaluate(&b)
                    .map_err(|e| abort_nonfinite(step, e, trace.last()))?;
                let total = eval.scalar(graphs.total)?;
                let mut terms = BTreeMap::new();
                for i in 0..l {
                    terms.insert(format!("kl.{i}"), eval.scalar(graphs.kl[i])?);
                    terms.insert(format!("ce.{i}"), eval.scalar(graphs.ce[i])?);
                    terms.insert(format!("erasure.{i}"), eval.scalar(graphs.erasure[i])?);
                }
                terms.insert("recon".into(), eval.scalar(graphs.recon)?);

                let wrt: Vec<NodeId> =
                    graphs.main_trainables.iter().map(|(_, id)| *id).collect();
                let grads = graphs.main.gradients(&eval, graphs.total, &wrt)?;
                adam.begin_step();
                apply_updates(&mut params, &graphs.main_trainables, grads, &mut adam);

                // Probe rounds on the detached carriers from the same batch.
                // Several projection updates per model step keep the probe
                // close to the best linear read-out, so the erasure gradient
                // pushes against real leakage instead of a stale direction.
                let pwrt: Vec<NodeId> =
                    graphs.probe_trainables.iter().map(|(_, id)| *id).collect();
                for round in 0..PROBE_ROUNDS {
                    let mut pb = Bindings::new();
                    params.bind_all(&mut pb);
                    for i in 0..l {
                        pb.set(format!("h.{i}"), eval.value(graphs.h_nodes[i]).clone());
                        pb.set(format!("y.{i}"), onehots[i].clone());
                    }
                    let peval = graphs
                        .probe
                        .evaluate(&pb)
                        .map_err(|e| abort_nonfinite(step, e, trace.last()))?;
                    if round == 0 {
                        for i in 0..l {
                            terms.insert(
                                format!("probe.{i}"),
                                peval.scalar(graphs.probe_terms[i])?,
                            );
                        }
                    }
                    let pgrads =
                        graphs.probe.gradients(&peval, graphs.probe_total, &pwrt)?;
                    apply_updates_scaled(
                        &mut params,
                        &graphs.probe_trainables,
                        pgrads,
                        &mut adam,
                        PROBE_STEP_SCALE,
                    );
                }

                trace.push(TraceRecord { step, total, terms });
            }
        }
        Mode::Unsupervised => {
            let graphs = build_unsupervised(&params, config.batch_size, &weights)?;
            let priors: Vec<BlockPrior> = (0..l)
                .map(|i| BlockPrior::for_layer(&arch.layout, i, config.rho))
                .collect::<Result<_>>()?;
            for step in 0..config.total_steps {
                let batch = iter.next().expect("infinite iterator");
                let mut b = Bindings::new();
                params.bind_all(&mut b);
                b.set("x", batch.images.clone());

                let eval = graphs
                    .gen
                    .evaluate(&b)
                    .map_err(|e| abort_nonfinite(step, e, trace.last()))?;
                let total = eval.scalar(graphs.total)?;
                let mut terms = BTreeMap::new();
                for i in 0..l {
                    terms.insert(format!("gen_kl.{i}"), eval.scalar(graphs.gen_kl[i])?);
                    terms.insert(format!("gen_tc.{i}"), eval.scalar(graphs.gen_tc[i])?);
                }
                terms.insert("recon".into(), eval.scalar(graphs.recon)?);

                // Latents are captured before the generator update so the
                // discriminator trains against the batch that produced them.
                let z_values: Vec<Array> = graphs
                    .z_nodes
                    .iter()
                    .map(|&id| eval.value(id).clone())
                    .collect();

                let wrt: Vec<NodeId> =
                    graphs.gen_trainables.iter().map(|(_, id)| *id).collect();
                let grads = graphs.gen.gradients(&eval, graphs.total, &wrt)?;
                adam.begin_step();
                apply_updates(&mut params, &graphs.gen_trainables, grads, &mut adam);

                for (i, disc) in graphs.discs.iter().enumerate() {
                    let round = subseed(config.seed, step * l as u64 + i as u64);
                    let prior_batch =
                        crate::objectives::sample_prior(&priors[i], config.batch_size, round);
                    let (s, h) = split_cols(&z_values[i], arch.layout.s_dims[i]);
                    let perm_batch = crate::objectives::permute_joint(&s, &h, round)?;
                    let mut db = Bindings::new();
                    params.bind_all(&mut db);
                    db.set("real", z_values[i].clone());
                    db.set("prior", prior_batch);
                    db.set("perm", perm_batch);
                    let deval = disc
                        .graph
                        .evaluate(&db)
                        .map_err(|e| abort_nonfinite(step, e, trace.last()))?;
                    terms.insert(format!("disc.{i}"), deval.scalar(disc.loss)?);
                    let dwrt: Vec<NodeId> = disc.trainables.iter().map(|(_, id)| *id).collect();
                    let dgrads = disc.graph.gradients(&deval, disc.loss, &dwrt)?;
                    apply_updates(&mut params, &disc.trainables, dgrads, &mut adam);
                }

                trace.push(TraceRecord { step, total, terms });
            }
        }
    }

    let checkpoint = Checkpoint {
        run: config.clone(),
        arch,
        step: config.total_steps,
        params,
        opt: Some(adam.moments()),
    };
    Ok(TrainOutput { checkpoint, trace })
}
