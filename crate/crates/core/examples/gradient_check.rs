//! Central finite differences against backpropagation for every parameter
//! of a small pushdown model.

use pushdown::autodiff::Graph;
use pushdown::model::{Batch, ModelConfig, PushdownModel};
use pushdown::treebank::{random_binary_tree, Sequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut c = ModelConfig::pushdown(2, 2, 16, 10, 8, 6);
    c.init_std = 0.3;
    let mut model = PushdownModel::new(c, 1)?;
    let seqs: Vec<Sequence> = [6, 4]
        .iter()
        .map(|&n| {
            let words: Vec<usize> = (0..n).map(|_| rng.gen_range(2..10)).collect();
            Sequence::from_tree(&words, &random_binary_tree(n, &mut rng))
        })
        .collect();
    let batch = Batch::from_sequences(&seqs.iter().collect::<Vec<_>>())?;
    let loss = |m: &PushdownModel| -> Result<f64, Box<dyn std::error::Error>> {
        let mut g = Graph::new();
        let out = m.forward(&mut g, &batch)?;
        let l = m.loss(&mut g, &out, &batch, 1.0)?;
        Ok(g.value(l.total).item())
    };
    {
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch)?;
        let l = model.loss(&mut g, &out, &batch, 1.0)?;
        g.backward(l.total, &mut model.params)?;
    }
    let eps = 1e-5;
    for id in model.params.ids().collect::<Vec<_>>() {
        let analytic = model.params.get(id).grad().ok_or("no gradient")?.to_vec();
        let mut worst: f64 = 0.0;
        for i in 0..analytic.len() {
            let x = model.params.get(id).data()[i];
            model.params.get_mut(id).data_mut()[i] = x + eps;
            let up = loss(&model)?;
            model.params.get_mut(id).data_mut()[i] = x - eps;
            let down = loss(&model)?;
            model.params.get_mut(id).data_mut()[i] = x;
            let fd = (up - down) / (2.0 * eps);
            worst = worst.max((analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-6));
        }
        println!(
            "{:<28} {:>6} entries  max rel err {worst:.2e}",
            model.params.name(id),
            analytic.len()
        );
    }
    Ok(())
}
