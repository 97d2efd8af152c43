//! Trains a pushdown and a base (multitask) model on bounded-depth Dyck and
//! compares closing-bracket accuracy on deeper and longer-range strings.
//!
//! cargo run --release --example train_dyck -- [steps] [seed] [out_dir]
//!
//! With `out_dir`, each model's checkpoints and metrics go to a subdirectory.

use std::path::PathBuf;
use std::time::Instant;

use pushdown::eval::TapeMode;
use pushdown::experiment::{outputs_in, parse_f1, score_model, DyckExperiment};
use pushdown::model::Mode;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut exp = DyckExperiment::default();
    if let Some(s) = args.first() {
        exp.train.steps = s.parse()?;
    }
    let seed: u64 = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let out: Option<PathBuf> = args.get(2).map(PathBuf::from);
    let t0 = Instant::now();
    let data = exp.build_data()?;
    println!(
        "data: {} train, {} depth-gen, {} long-range ({:.1}s)",
        data.train.len(),
        data.depth_gen.len(),
        data.longrange.len(),
        t0.elapsed().as_secs_f64()
    );

    for mode in [Mode::Pushdown, Mode::BaseMultitask] {
        let t = Instant::now();
        let dir = out
            .as_ref()
            .map(|d| d.join(format!("{mode:?}").to_lowercase()));
        if let Some(d) = &dir {
            std::fs::create_dir_all(d)?;
        }
        let (model, rep) =
            exp.train_model(&data, mode, seed, &outputs_in(dir.as_deref(), false))?;
        let last = rep.history.last().map(|r| r.lm_loss).unwrap_or(f64::NAN);
        println!(
            "{mode:?}: trained {} steps in {:.0}s, final lm loss {last:.4}",
            rep.steps_run,
            t.elapsed().as_secs_f64()
        );
        for tape in [TapeMode::ModelGreedy, TapeMode::GoldOracle] {
            let s = score_model(&model, &exp, &data, tape)?;
            println!(
                "  {tape:?}: depth-gen {:.1}%  long-range {:.1}%  val ppl {:.4}",
                s.depth_gen.accuracy, s.longrange.accuracy, s.val_perplexity
            );
            for b in &s.depth_gen.buckets {
                print!("    d{}={:.1}", b.bucket, b.accuracy);
            }
            println!();
        }
        if mode == Mode::Pushdown {
            let f = parse_f1(&model, &data.test[..50], 32)?;
            println!("  parse F1 on held-out: {:.2}", f.f1());
        }
    }
    Ok(())
}
