//! Acceptance suite. Each test prints one `PASS`/`FAIL` line to stderr
//! (bypassing output capture) before asserting.

use std::collections::HashSet;
use std::io::Write as _;
use std::sync::LazyLock;
use std::time::Instant;

use pushdown::autodiff::Graph;
use pushdown::decode::{beam_search, exact_marginal, marginal_logprob, BeamConfig};
use pushdown::dyck::{dyck_gold_tree, DyckSpec};
use pushdown::eval::{attention_analysis, closing_accuracy, depth_items, dyck_probe, TapeMode};
use pushdown::experiment::{
    outputs_in, parse_f1, score_model, DyckData, DyckExperiment, DyckScores,
};
use pushdown::model::{Batch, Mode, ModelConfig, PushdownModel};
use pushdown::stack::{replay, Span, StackState};
use pushdown::train::{train, TrainConfig, TrainOutputs};
use pushdown::treebank::{
    attach_root, enumerate_binary_trees, oracle_extract, precompute_tape_matrix,
    random_binary_tree, BinaryTree, Sequence,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: usize, ok: bool, what: &str, detail: &str) {
    let line = format!(
        "acceptance {n:>2} {} {what}: {detail}\n",
        if ok { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

/// Depth of each leaf `j <= k` inside its maximal complete constituent of
/// the prefix `0..=k`: the number of internal spans `(s, e)` with
/// `s <= j <= e <= k`.
fn brute_force_row(spans: &[(usize, usize)], k: usize) -> Vec<usize> {
    (0..=k)
        .map(|j| {
            spans
                .iter()
                .filter(|&&(s, e)| s <= j && j <= e && e <= k)
                .count()
        })
        .collect()
}

fn check_tree(t: &BinaryTree) -> Result<(), String> {
    let n = t.num_leaves();
    let r = oracle_extract(t);
    let m = precompute_tape_matrix(n, &r).map_err(|e| e.to_string())?;
    let spans = t.internal_spans();
    for k in 0..n {
        let want = brute_force_row(&spans, k);
        if m.prefix_row(k) != want.as_slice() {
            return Err(format!(
                "{} row {k}: {:?} vs {want:?}",
                t.to_bracketed(),
                m.prefix_row(k)
            ));
        }
    }
    let (_, back) = replay(&r).map_err(|e| e.to_string())?;
    if &back != t {
        return Err(format!(
            "replay of {} gave {}",
            t.to_bracketed(),
            back.to_bracketed()
        ));
    }
    Ok(())
}

#[test]
fn a01_stack_tape_oracle_equivalence() {
    let t0 = Instant::now();
    let mut count = 0;
    let mut err = None;
    for n in 1..=8 {
        for t in enumerate_binary_trees(n) {
            count += 1;
            if let Err(e) = check_tree(&t) {
                err.get_or_insert(e);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=14);
        count += 1;
        if let Err(e) = check_tree(&random_binary_tree(n, &mut rng)) {
            err.get_or_insert(e);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let ok = err.is_none() && secs < 60.0;
    report(
        1,
        ok,
        "stack tape oracle equivalence",
        &format!(
            "{count} trees in {secs:.1}s{}",
            err.as_deref()
                .map(|e| format!(", first error {e}"))
                .unwrap_or_default()
        ),
    );
    assert!(ok);
}

#[test]
fn a02_running_example_transition() {
    let nd = BinaryTree::node;
    let leaf = BinaryTree::Leaf;
    // ((The dog) (is happy))
    let tree = nd(nd(leaf(0), leaf(1)), nd(leaf(2), leaf(3)));
    let r = oracle_extract(&tree);
    let m = precompute_tape_matrix(4, &r).unwrap();
    let before = m.prefix_row(2).to_vec();
    let after = m.prefix_row(3).to_vec();
    // the same transition from the ROOT-prefixed stack [[ROOT], [The dog], [is]]
    let rooted = StackState::from_parts(
        vec![0, 1, 1, 0],
        vec![
            Span { start: 0, end: 0 },
            Span { start: 1, end: 2 },
            Span { start: 3, end: 3 },
        ],
    )
    .unwrap();
    let rooted_after = rooted.update(4, 2).unwrap();
    let r_rooted = oracle_extract(&attach_root(&tree));
    let ok = before == [1, 1, 0]
        && after == [2, 2, 2, 2]
        && r[3] == 1
        && rooted.tape()[1..] == [1, 1, 0]
        && rooted_after.tape()[1..] == [2, 2, 2, 2]
        && r_rooted[..4] == [0, 1, 1, 3];
    report(
        2,
        ok,
        "running example",
        &format!("{before:?} -> {after:?}, r(happy) = {} (dog = 1)", r[3]),
    );
    assert!(ok);
}

fn random_sequence(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Sequence {
    let words: Vec<usize> = (0..n).map(|_| rng.gen_range(2..vocab)).collect();
    Sequence::from_tree(&words, &random_binary_tree(n, rng))
}

#[test]
fn a03_gradient_fidelity() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut c = ModelConfig::pushdown(2, 2, 16, 10, 8, 8);
    c.init_std = 0.3;
    let mut m = PushdownModel::new(c, 4).unwrap();
    let seqs = [
        random_sequence(&mut rng, 6, 10),
        random_sequence(&mut rng, 4, 10),
    ];
    let b = Batch::from_sequences(&seqs.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(b.len, 8);
    let loss_of = |m: &PushdownModel| {
        let mut g = Graph::new();
        let out = m.forward(&mut g, &b).unwrap();
        let l = m.loss(&mut g, &out, &b, 1.0).unwrap();
        g.value(l.total).item()
    };
    {
        let mut g = Graph::new();
        let out = m.forward(&mut g, &b).unwrap();
        let l = m.loss(&mut g, &out, &b, 1.0).unwrap();
        g.backward(l.total, &mut m.params).unwrap();
    }
    let eps = 1e-5;
    // Below 1e-5 the denominator is floored: at eps = 1e-5 one ulp of a loss
    // near 3 moves the central difference by 4.4e-11, so entries whose true
    // gradient is zero (the key bias cancels in softmax) read as a few ulps.
    let floor = 1e-5;
    let mut worst: (f64, String) = (0.0, String::new());
    let mut worst_resolved: f64 = 0.0;
    let mut checked = 0;
    for id in m.params.ids().collect::<Vec<_>>() {
        let analytic = m.params.get(id).grad().unwrap().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let x = m.params.get(id).data()[i];
            m.params.get_mut(id).data_mut()[i] = x + eps;
            let up = loss_of(&m);
            m.params.get_mut(id).data_mut()[i] = x - eps;
            let down = loss_of(&m);
            m.params.get_mut(id).data_mut()[i] = x;
            let fd = (up - down) / (2.0 * eps);
            let scale = a.abs().max(fd.abs());
            let rel = (a - fd).abs() / scale.max(floor);
            if scale >= floor {
                worst_resolved = worst_resolved.max(rel);
            }
            if rel > worst.0 {
                worst = (rel, format!("{}[{i}]", m.params.name(id)));
            }
            checked += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let ok = worst.0 < 1e-4 && secs < 120.0;
    report(
        3,
        ok,
        "gradient fidelity",
        &format!(
            "{checked} entries, max rel err {:.2e} at {}, {worst_resolved:.2e} where |grad| >= {floor:.0e} ({secs:.1}s)",
            worst.0, worst.1
        ),
    );
    assert!(ok);
}

#[test]
fn a04_zero_depth_tables_degenerate_to_base() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut c = ModelConfig::pushdown(2, 4, 16, 12, 16, 8);
    c.init_std = 0.2;
    let mut pd = PushdownModel::new(c.clone(), 1).unwrap();
    for id in pd.depth_tables() {
        pd.params.get_mut(id).data_mut().fill(0.0);
    }
    let mut base = PushdownModel::new(c.with_mode(Mode::BasePlain), 2).unwrap();
    for id in base.params.ids().collect::<Vec<_>>() {
        let src = pd.params.find(base.params.name(id)).unwrap();
        let data = pd.params.get(src).data().to_vec();
        base.params.get_mut(id).data_mut().copy_from_slice(&data);
    }
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.gen_range(1..=14);
        let seq = random_sequence(&mut rng, n, 12);
        let b = Batch::from_sequences(&[&seq]).unwrap();
        let x = pd.forward_values(&b).unwrap();
        let y = base.forward_values(&b).unwrap();
        let same_bits =
            |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(p, q)| p.to_bits() == q.to_bits());
        if !same_bits(x.lm_logits.data(), y.lm_logits.data())
            || !x
                .attention
                .iter()
                .zip(&y.attention)
                .all(|(p, q)| same_bits(p.data(), q.data()))
        {
            mismatches += 1;
        }
    }
    let ok = mismatches == 0;
    report(
        4,
        ok,
        "zeroed depth tables equal base forward",
        &format!("{mismatches}/100 inputs differ"),
    );
    assert!(ok);
}

fn catalan(n: usize) -> usize {
    (0..n).fold(1, |c, i| c * 2 * (2 * i + 1) / (i + 2))
}

/// A small model trained on random trees over a two-word vocabulary.
fn toy_model(seed: u64) -> PushdownModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<Sequence> = (0..200)
        .map(|_| {
            let n = rng.gen_range(1..=7);
            random_sequence(&mut rng, n, 4)
        })
        .collect();
    let mut m = PushdownModel::new(ModelConfig::pushdown(2, 2, 16, 4, 9, 8), seed).unwrap();
    let cfg = TrainConfig {
        steps: 150,
        warmup: 10,
        lr: 3e-3,
        batch_size: 16,
        eval_every: 0,
        seed,
        ..TrainConfig::default()
    };
    train(&mut m, &data, &[], &cfg, &TrainOutputs::default()).unwrap();
    m
}

#[test]
fn a05_exact_marginalization() {
    let t0 = Instant::now();
    let mut worst_gap: f64 = 0.0;
    let mut strings = 0;
    let mut non_monotone = Vec::new();
    for seed in [1, 2] {
        let m = toy_model(seed);
        for n in 1..=7 {
            let full = catalan(n - 1);
            for code in 0..(1usize << n) {
                let words: Vec<usize> = (0..n).map(|i| 2 + ((code >> i) & 1)).collect();
                let exact = exact_marginal(&m, &words).unwrap();
                let beam = marginal_logprob(&m, &words, &BeamConfig::width(full)).unwrap();
                worst_gap = worst_gap.max((exact - beam).abs());
                strings += 1;
                let mut prev = f64::NEG_INFINITY;
                for w in 1..=full {
                    let lp = marginal_logprob(&m, &words, &BeamConfig::width(w)).unwrap();
                    if lp < prev - 1e-12 {
                        non_monotone
                            .push(format!("seed {seed} {words:?} width {w}: {lp} < {prev}"));
                    }
                    prev = lp;
                }
            }
        }
    }
    let ok = worst_gap < 1e-10 && non_monotone.is_empty();
    report(
        5,
        ok,
        "exact marginalization",
        &format!(
            "{strings} strings, max |beam - exact| {worst_gap:.1e}, {} width decreases{} ({:.0}s)",
            non_monotone.len(),
            non_monotone
                .first()
                .map(|s| format!(", first: {s}"))
                .unwrap_or_default(),
            t0.elapsed().as_secs_f64()
        ),
    );
    assert!(ok);
}

struct SeedRun {
    seed: u64,
    pushdown: PushdownModel,
    base: PushdownModel,
    pd: DyckScores,
    bs: DyckScores,
}

impl SeedRun {
    fn margins(&self) -> (f64, f64) {
        (
            self.pd.depth_gen.accuracy - self.bs.depth_gen.accuracy,
            self.pd.longrange.accuracy - self.bs.longrange.accuracy,
        )
    }

    fn passes(&self) -> bool {
        let (d, l) = self.margins();
        d >= 10.0 && l >= 5.0
    }
}

struct DyckTrend {
    exp: DyckExperiment,
    data: DyckData,
    runs: Vec<SeedRun>,
    secs: f64,
}

/// Seeds are trained in order until two pass or two fail.
static DYCK: LazyLock<DyckTrend> = LazyLock::new(|| {
    let t0 = Instant::now();
    let exp = DyckExperiment::default();
    let data = exp.build_data().unwrap();
    let mut runs: Vec<SeedRun> = Vec::new();
    for seed in 0..3 {
        let (pushdown, _) = exp
            .train_model(&data, Mode::Pushdown, seed, &outputs_in(None, false))
            .unwrap();
        let (base, _) = exp
            .train_model(&data, Mode::BaseMultitask, seed, &outputs_in(None, false))
            .unwrap();
        let pd = score_model(&pushdown, &exp, &data, TapeMode::ModelGreedy).unwrap();
        let bs = score_model(&base, &exp, &data, TapeMode::ModelGreedy).unwrap();
        runs.push(SeedRun {
            seed,
            pushdown,
            base,
            pd,
            bs,
        });
        let passed = runs.iter().filter(|r| r.passes()).count();
        if passed >= 2 || runs.len() - passed >= 2 {
            break;
        }
    }
    DyckTrend {
        exp,
        data,
        runs,
        secs: t0.elapsed().as_secs_f64(),
    }
});

#[test]
fn a06_dyck_trend() {
    let d = &*DYCK;
    let passed = d.runs.iter().filter(|r| r.passes()).count();
    let detail: Vec<String> = d
        .runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: depth {:.1} vs {:.1}, long-range {:.1} vs {:.1}",
                r.seed,
                r.pd.depth_gen.accuracy,
                r.bs.depth_gen.accuracy,
                r.pd.longrange.accuracy,
                r.bs.longrange.accuracy
            )
        })
        .collect();
    let ok = passed >= 2 && d.secs <= 3600.0;
    report(
        6,
        ok,
        "Dyck trend (pushdown vs base)",
        &format!("{passed} seeds pass; {}; {:.0}s", detail.join("; "), d.secs),
    );
    assert!(ok);
}

#[test]
fn a07_parsing_sanity() {
    let d = &*DYCK;
    let f = parse_f1(&d.runs[0].pushdown, &d.data.test, 32).unwrap();
    let ok = f.f1() >= 95.0;
    report(
        7,
        ok,
        "held-out Dyck parse F1",
        &format!("{:.2} over {} strings", f.f1(), d.data.test.len()),
    );
    assert!(ok);
}

#[test]
fn a08_perplexity_parity() {
    let d = &*DYCK;
    let r = &d.runs[0];
    let ok = r.pd.val_perplexity <= r.bs.val_perplexity * 1.05;
    report(
        8,
        ok,
        "validation perplexity parity",
        &format!(
            "pushdown {:.4} vs base {:.4}",
            r.pd.val_perplexity, r.bs.val_perplexity
        ),
    );
    assert!(ok);
}

#[test]
fn a09_chance_level_when_untrained() {
    let exp = DyckExperiment::default();
    let k = exp.spec.num_types;
    let strings = pushdown::dyck::build_depth_gen_split(&exp.spec, 8..=12, 200, 99).unwrap();
    let items = depth_items(&strings);
    let chance = 100.0 / k as f64;
    let mut lines = Vec::new();
    let mut ok = true;
    for mode in [Mode::Pushdown, Mode::BaseMultitask] {
        let m = PushdownModel::new(exp.model_config(mode), 7).unwrap();
        let (rep, _) = closing_accuracy(&m, "chance", &items, k, TapeMode::ModelGreedy).unwrap();
        ok &= rep.total >= 1000 && (rep.accuracy - chance).abs() <= 2.0;
        lines.push(format!("{mode:?} {:.2}% over {}", rep.accuracy, rep.total));
    }
    report(
        9,
        ok,
        "untrained closing accuracy at chance",
        &format!("chance {chance:.1}%: {}", lines.join(", ")),
    );
    assert!(ok);
}

#[test]
fn a10_training_is_deterministic() {
    let exp = DyckExperiment {
        spec: DyckSpec {
            num_types: 3,
            max_depth: 3,
            max_len: 20,
            seed: 8,
            ..DyckSpec::default()
        },
        train_count: 300,
        val_count: 30,
        layers: 2,
        d_model: 16,
        train: TrainConfig {
            steps: 40,
            warmup: 5,
            eval_every: 10,
            batch_size: 8,
            dropout: 0.1,
            ..TrainConfig::default()
        },
        ..DyckExperiment::default()
    };
    let data = exp.build_data().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        std::fs::create_dir_all(&out).unwrap();
        exp.train_model(&data, Mode::Pushdown, 5, &outputs_in(Some(&out), false))
            .unwrap();
        csvs.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    let ok = csvs[0] == csvs[1] && csvs[0].len() > 100;
    report(
        10,
        ok,
        "byte-identical metrics CSV",
        &format!("{} bytes", csvs[0].len()),
    );
    assert!(ok);
}

// Further trained-model properties of the evaluation harness, sharing the
// models above.

#[test]
fn gold_tapes_help_at_least_as_much_as_greedy() {
    let d = &*DYCK;
    let m = &d.runs[0].pushdown;
    let items = depth_items(&d.data.depth_gen);
    let k = d.exp.spec.num_types;
    let (greedy, _) = closing_accuracy(m, "depth", &items, k, TapeMode::ModelGreedy).unwrap();
    let (gold, _) = closing_accuracy(m, "depth", &items, k, TapeMode::GoldOracle).unwrap();
    let _ = writeln!(
        std::io::stderr(),
        "property gold-oracle {:.2}% vs model-greedy {:.2}% over {} prefixes",
        gold.accuracy,
        greedy.accuracy,
        gold.total
    );
    assert!(gold.total >= 1000);
    assert!(gold.accuracy >= greedy.accuracy);
}

#[test]
fn pushdown_attends_more_to_open_brackets() {
    let d = &*DYCK;
    // held-out strings, probed at the closer with the farthest match
    let probes: Vec<_> = d
        .data
        .test
        .iter()
        .filter_map(|s| {
            let far = (0..s.len())
                .filter(|&i| !s.tokens[i].is_open())
                .max_by_key(|&i| i - s.matching[i])?;
            Some(dyck_probe(s, far))
        })
        .collect();
    let pd = attention_analysis(&d.runs[0].pushdown, &probes).unwrap();
    let bs = attention_analysis(&d.runs[0].base, &probes).unwrap();
    let _ = writeln!(
        std::io::stderr(),
        "property open-bracket attention mass: pushdown {:.3} vs base {:.3}",
        pd.mean_target_mass,
        bs.mean_target_mass
    );
    assert!(pd.mean_target_mass > bs.mean_target_mass);
}

#[test]
fn long_range_split_avoids_training_strings() {
    let d = &*DYCK;
    let seen: HashSet<u64> = d.data.train.iter().map(|s| s.hash64()).collect();
    assert!(d
        .data
        .longrange
        .iter()
        .all(|it| !seen.contains(&it.string.hash64())));
    // every long-range dependency is longer than any seen in training
    let longest_train = d
        .data
        .train
        .iter()
        .flat_map(|s| (0..s.len()).filter(|&i| !s.tokens[i].is_open()).map(|i| i - s.matching[i]))
        .max()
        .unwrap();
    assert!(d.data.longrange.iter().all(|it| it.distance() > longest_train));
    assert!(d
        .data
        .test
        .iter()
        .all(|s| dyck_gold_tree(s).num_leaves() == s.len()));
}

#[test]
fn beam_finals_are_complete_trees() {
    let m = toy_model(3);
    let words = [2, 3, 2, 2, 3];
    let trace = beam_search(&m, &words, 14, true).unwrap();
    assert_eq!(trace.finals.len(), 14);
    assert!(trace.finals.iter().all(|h| h.tree().is_ok()));
}
