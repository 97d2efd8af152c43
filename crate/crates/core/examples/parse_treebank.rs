//! Trains on a toy treebank and parses unseen sentences with beam search,
//! scoring the parses with unlabeled bracketing F1.

use pushdown::decode::{best_parse, BeamConfig, BeamMode};
use pushdown::eval::{unlabeled_f1, F1Result};
use pushdown::model::{ModelConfig, PushdownModel};
use pushdown::train::{train, TrainConfig, TrainOutputs};
use pushdown::treebank::{Corpus, VocabPolicy};

fn sentence(subj: &str, verb: &str, obj: Option<&str>) -> String {
    match obj {
        Some(o) => format!("(S (NP the {subj}) (VP {verb} (NP the {o})))"),
        None => format!("(S (NP the {subj}) (VP {verb}))"),
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let nouns = ["dog", "cat", "bird", "fox"];
    let (tv, iv) = (["sees", "chases"], ["sleeps", "runs"]);
    let mut train_text = String::new();
    let mut test_text = String::new();
    for (i, s) in nouns.iter().enumerate() {
        for (j, o) in nouns.iter().enumerate() {
            let line = sentence(s, tv[(i + j) % 2], Some(o)) + "\n";
            // hold out one object per subject
            if (i + 1) % nouns.len() == j {
                test_text += &line
            } else {
                train_text += &line
            }
        }
        train_text += &(sentence(s, iv[i % 2], None) + "\n");
    }
    let train_set = Corpus::from_text(&train_text, VocabPolicy::Build(None))?;
    let test_set = Corpus::from_text(&test_text, VocabPolicy::Frozen(train_set.vocab.clone()))?;
    let mut model = PushdownModel::new(
        ModelConfig::pushdown(2, 2, 16, train_set.vocab.len(), 10, 8),
        1,
    )?;
    let cfg = TrainConfig {
        steps: 400,
        warmup: 20,
        lr: 3e-3,
        batch_size: 8,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let rep = train(
        &mut model,
        &train_set.sequences,
        &[],
        &cfg,
        &TrainOutputs::default(),
    )?;
    println!(
        "final loss {:.4}",
        rep.history.last().map(|r| r.lm_loss).unwrap_or(f64::NAN)
    );

    let beam = BeamConfig {
        mode: BeamMode::Parse,
        ..BeamConfig::width(8)
    };
    let mut total = F1Result::default();
    for seq in &test_set.sequences {
        let gold = seq.gold_tree()?;
        let pred = best_parse(&model, seq.words(), &beam)?;
        let r = unlabeled_f1(&pred, &gold);
        total.add(r);
        let name = |i: usize| test_set.vocab.token(seq.words()[i]).to_string();
        println!(
            "{:<40} gold {}  F1 {:.0}",
            pred.render(&name),
            gold.render(&name),
            r.f1()
        );
    }
    println!(
        "corpus F1 {:.2} (P {:.2} R {:.2})",
        total.f1(),
        total.precision(),
        total.recall()
    );
    Ok(())
}
