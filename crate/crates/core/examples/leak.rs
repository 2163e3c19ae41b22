//! Retrain a fresh linear probe to convergence on frozen carriers and
//! report held-out accuracy per layer (true linear leakage measure).
use bhivae::checkpoint::load_checkpoint;
use bhivae::data::generate_from_config;
use bhivae::eval::split_rows;
use bhivae::model::EncodeMode;
use bhivae::ndgrad::{Array, Bindings, Graph};
use bhivae::nn::{init_mlp, one_hot, Activation, MlpSpec};
use bhivae::objectives::probe_nodes;
use bhivae::train::Adam;
use bhivae::config::OptimizerConfig;

fn main() {
    let path = std::env::args().nth(1).unwrap();
    let ckpt = load_checkpoint(path.as_ref()).unwrap();
    let gen = match &ckpt.run.dataset {
        bhivae::config::DatasetSource::Generate(g) => g.clone(),
        _ => panic!(),
    };
    let data = generate_from_config(&gen).unwrap();
    let factors = ckpt.run.layer_factors.clone().unwrap();
    let labels = data.layer_labels(&factors).unwrap();
    let (train_rows, eval_rows) = split_rows(data.len(), 0.2, 17);
    let layout = &ckpt.params.arch.layout;
    let l = layout.num_layers();

    let xt = data.gather_images(&train_rows).unwrap();
    let xe = data.gather_images(&eval_rows).unwrap();
    let ct = ckpt.params.encode(&xt, EncodeMode::Deterministic, 0).unwrap();
    let ce = ckpt.params.encode(&xe, EncodeMode::Deterministic, 0).unwrap();

    for i in 0..l {
        let carrier_t = if i + 1 < l { &ct.h_parts[i] } else { &ct.c_part };
        let carrier_e = if i + 1 < l { &ce.h_parts[i] } else { &ce.c_part };
        let width = carrier_t.shape()[1];
        let s_dim = layout.s_dims[i];
        let classes = labels[i].classes;
        let yt: Vec<usize> = train_rows.iter().map(|&r| labels[i].labels[r]).collect();
        let ye: Vec<usize> = eval_rows.iter().map(|&r| labels[i].labels[r]).collect();
        let onehot_t = one_hot(&yt, classes);

        let spec = MlpSpec::new(vec![width, s_dim], Activation::Relu, Activation::Identity).unwrap();
        let cls = &ckpt.params.classifiers[i];
        let rounds: usize = std::env::args().nth(2).map(|a| a.parse().unwrap()).unwrap_or(1500);
        for restart in 0..5u64 {
        let mut proj = init_mlp(&spec, 1000 * restart + 555 + i as u64).unwrap();

        let mut g = Graph::new();
        let h = g.input("h", &[train_rows.len(), width]).unwrap();
        let y = g.input("y", &[train_rows.len(), classes]).unwrap();
        let loss = probe_nodes(&mut g, h, cls, &proj, "c", "p", y).unwrap();
        let wrt: Vec<(String, bhivae::ndgrad::NodeId)> = g
            .inputs_with_prefix("p.")
            .into_iter()
            .collect();
        let ids: Vec<_> = wrt.iter().map(|(_, id)| *id).collect();
        let mut adam = Adam::new(OptimizerConfig::default());
        for _step in 0..rounds {
            let mut b = Bindings::new();
            b.set("h", carrier_t.clone());
            b.set("y", onehot_t.clone());
            cls.bind(&mut b, "c");
            proj.bind(&mut b, "p");
            let ev = g.evaluate(&b).unwrap();
            let grads = g.gradients(&ev, loss, &ids).unwrap();
            adam.begin_step();
            let mut by_name: std::collections::HashMap<String, Array> = Default::default();
            for (name, id) in &wrt {
                if let Some(gr) = grads.get(id) {
                    by_name.insert(name.clone(), gr.clone());
                }
            }
            proj.visit_params_mut("p", &mut |name: String, arr: &mut Array| {
                if let Some(gr) = by_name.get(name.as_str()) {
                    adam.update_scaled(&name, arr.data_mut(), gr.data(), 10.0);
                }
            });
        }
        // held-out accuracy
        let projected = proj.forward(carrier_e).unwrap();
        let logits = cls.forward(&projected).unwrap();
        let mut correct = 0usize;
        for r in 0..eval_rows.len() {
            let row = logits.row(r);
            let arg = row.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            if arg == ye[r] { correct += 1; }
        }
        println!(
            "layer {i} ({}) restart {restart}: fresh-probe held-out acc {:.3} (chance {:.3})",
            factors[i],
            correct as f64 / eval_rows.len() as f64,
            1.0 / classes as f64
        );
        }
    }
}
