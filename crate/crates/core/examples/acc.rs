use bhivae::checkpoint::load_checkpoint;
use bhivae::data::generate_from_config;
use bhivae::eval::{split_rows, supervised_accuracies};

fn main() {
    let path = std::env::args().nth(1).unwrap();
    let ckpt = load_checkpoint(path.as_ref()).unwrap();
    let gen = match &ckpt.run.dataset {
        bhivae::config::DatasetSource::Generate(g) => g.clone(),
        _ => panic!("expected generate source"),
    };
    let data = generate_from_config(&gen).unwrap();
    let factors = ckpt.run.layer_factors.clone().unwrap();
    let labels = data.layer_labels(&factors).unwrap();
    let (_, eval_rows) = split_rows(data.len(), 0.2, 17);
    let (cls, probe) =
        supervised_accuracies(&ckpt.params, &data, &labels, &eval_rows).unwrap();
    for i in 0..cls.len() {
        let chance = 1.0 / labels[i].classes as f64;
        println!(
            "layer {i} ({}): cls {:.3}  probe {:.3}  chance {:.3}",
            factors[i], cls[i], probe[i], chance
        );
    }
}
