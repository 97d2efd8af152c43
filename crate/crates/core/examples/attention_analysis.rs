//! Trains a pushdown and a base model briefly on Dyck and compares how much
//! attention each puts on the still-open brackets just before a close.
//! Writes CSV and SVG files to the directory given as the first argument.

use std::path::PathBuf;

use pushdown::dyck::{dyck_vocab, DyckSpec};
use pushdown::eval::{attention_analysis, attention_csv, attention_svg, dyck_probe};
use pushdown::experiment::{outputs_in, DyckExperiment};
use pushdown::model::Mode;
use pushdown::train::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "attention_out".into()),
    );
    std::fs::create_dir_all(&out)?;
    let exp = DyckExperiment {
        spec: DyckSpec {
            num_types: 4,
            max_depth: 4,
            min_len: 4,
            max_len: 32,
            seed: 3,
            ..DyckSpec::default()
        },
        train_count: 3000,
        layers: 2,
        longrange_targets: vec![20],
        longrange_count: 20,
        train: TrainConfig {
            steps: 300,
            warmup: 30,
            lr: 3e-3,
            eval_every: 0,
            ..DyckExperiment::default().train
        },
        ..DyckExperiment::default()
    };
    let data = exp.build_data()?;
    let probes: Vec<_> = data
        .longrange
        .iter()
        .map(|it| dyck_probe(&it.string, it.close_pos))
        .collect();
    let vocab = dyck_vocab(exp.spec.num_types);
    let name = |i: usize| vocab.token(i).to_string();
    for mode in [Mode::Pushdown, Mode::BaseMultitask] {
        let (model, _) = exp.train_model(&data, mode, 0, &outputs_in(None, false))?;
        let rep = attention_analysis(&model, &probes)?;
        println!(
            "{mode:?}: mean attention on open brackets {:.3}",
            rep.mean_target_mass
        );
        let tag = format!("{mode:?}").to_lowercase();
        std::fs::write(
            out.join(format!("{tag}.csv")),
            attention_csv(&rep, &probes, &name),
        )?;
        let labels: Vec<String> = probes[0].ids.iter().map(|&i| name(i)).collect();
        std::fs::write(
            out.join(format!("{tag}.svg")),
            attention_svg(&rep.probes[0].matrix, &labels),
        )?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
