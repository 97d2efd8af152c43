//! Trains a small pushdown model on a toy treebank, then compares the beam
//! estimate of log p(x) with exact enumeration over every tree.

use pushdown::decode::{beam_search, exact_marginal, surprisal, BeamConfig, BeamMode};
use pushdown::model::{ModelConfig, PushdownModel};
use pushdown::train::{train, Schedule, TrainConfig, TrainOutputs};
use pushdown::treebank::{Corpus, VocabPolicy};

const TREES: &str = "\
(S (NP the dog) (VP barks))
(S (NP the cat) (VP sleeps))
(S (NP a dog) (VP sees (NP the cat)))
(S (NP the cat) (VP sees (NP a dog)))
(S (NP the big dog) (VP barks))
(S (NP a cat) (VP chases (NP the big dog)))
";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = Corpus::from_text(TREES, VocabPolicy::Build(None))?;
    let mut model = PushdownModel::new(
        ModelConfig::pushdown(2, 2, 16, corpus.vocab.len(), 12, 8),
        0,
    )?;
    let cfg = TrainConfig {
        steps: 300,
        warmup: 20,
        lr: 3e-3,
        batch_size: 6,
        schedule: Schedule::Cosine,
        eval_every: 0,
        ..TrainConfig::default()
    };
    train(
        &mut model,
        &corpus.sequences,
        &[],
        &cfg,
        &TrainOutputs::default(),
    )?;

    for text in ["the dog sees a cat", "a big cat barks"] {
        let words: Vec<usize> = text
            .split(' ')
            .map(|w| corpus.vocab.id(w).ok_or(w))
            .collect::<Result<_, _>>()?;
        let exact = exact_marginal(&model, &words)?;
        println!("{text:?}: exact log p(x) = {exact:.6}");
        for width in [1, 2, 4, 8, 16] {
            let trace = beam_search(&model, &words, width, true)?;
            let best = trace.finals.first().ok_or("empty beam")?;
            let lp = pushdown::autodiff::kernels::log_sum_exp(
                &trace.finals.iter().map(|h| h.logprob).collect::<Vec<_>>(),
            );
            println!(
                "  width {width:>2}: beam log p(x) = {lp:.6}  best tree {}",
                best.tree()?
                    .render(&|i| corpus.vocab.token(words[i]).into())
            );
        }
        let s = surprisal(
            &model,
            &words,
            &BeamConfig {
                mode: BeamMode::Surprisal,
                ..BeamConfig::width(16)
            },
        )?;
        println!(
            "  surprisal: {}",
            s.iter()
                .map(|x| format!("{x:.2}"))
                .collect::<Vec<_>>()
                .join(" ")
        );
    }
    Ok(())
}
