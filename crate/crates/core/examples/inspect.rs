use bhivae::checkpoint::load_checkpoint;
use bhivae::data::generate_from_config;
use bhivae::model::EncodeMode;

fn main() {
    let path = std::env::args().nth(1).unwrap();
    let ckpt = load_checkpoint(path.as_ref()).unwrap();
    let gen = match &ckpt.run.dataset {
        bhivae::config::DatasetSource::Generate(g) => g.clone(),
        _ => panic!("expected generate source"),
    };
    let data = generate_from_config(&gen).unwrap();
    let rows: Vec<usize> = (0..data.len()).step_by(7).collect();
    let x = data.gather_images(&rows).unwrap();
    let code = ckpt.params.encode(&x, EncodeMode::Stochastic, 0).unwrap();

    let factors = ["scale", "pos_x", "shape"];
    let names = data.factors().names().to_vec();
    for (i, fname) in factors.iter().enumerate() {
        let f = names.iter().position(|n| n == fname).unwrap();
        let k = data.factors().cardinality(f);
        let s = &code.means[i];
        let lv = &code.log_vars.as_ref().unwrap()[i];
        let d = s.shape()[1];
        let mut mean_by_class = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (r, &row) in rows.iter().enumerate() {
            let c = data.factors().value(row, f);
            counts[c] += 1;
            for j in 0..d {
                mean_by_class[c][j] += s.row(r)[j];
            }
        }
        for c in 0..k {
            for j in 0..d {
                mean_by_class[c][j] /= counts[c] as f64;
            }
        }
        let mut sig = vec![0.0; lv.shape()[1]];
        for r in 0..rows.len() {
            for j in 0..sig.len() {
                sig[j] += f64::exp(0.5 * lv.row(r)[j]);
            }
        }
        for v in sig.iter_mut() {
            *v /= rows.len() as f64;
        }
        println!("layer {i} ({fname}): class means over s = {mean_by_class:?}");
        println!("          mean sigma (s dims then carrier dims) = {sig:?}");
    }
}
