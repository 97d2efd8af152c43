//! Evaluation harness: closing-bracket accuracy, unlabeled bracketing F1,
//! perplexity tables and attention analysis.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels;
use crate::decode::force_greedy;
use crate::dyck::{Bracket, DyckString, LongRangeItem};
use crate::model::{Batch, ModelError, PushdownModel};
use crate::train::{validate, TrainError};
use crate::treebank::{BinaryTree, Sequence, ROOT_ID};

/// Where the stack tape for an evaluation prefix comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TapeMode {
    /// The model parses the prefix itself, greedily.
    ModelGreedy,
    /// Gold attachments from the Dyck structure.
    GoldOracle,
}

impl FromStr for TapeMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "model-greedy" => Ok(TapeMode::ModelGreedy),
            "gold-oracle" => Ok(TapeMode::GoldOracle),
            _ => Err(format!("unknown tape mode {s:?}")),
        }
    }
}

/// One string and the closing positions to test in it.
#[derive(Clone, Debug)]
pub struct ClosingItem {
    pub string: DyckString,
    pub positions: Vec<usize>,
    /// Bucket key per position (depth or distance).
    pub buckets: Vec<usize>,
}

/// Every closing bracket of each string, bucketed by the nesting depth of
/// the pair it closes.
pub fn depth_items(strings: &[DyckString]) -> Vec<ClosingItem> {
    strings
        .iter()
        .map(|s| {
            let positions: Vec<usize> = (0..s.len()).filter(|&i| !s.tokens[i].is_open()).collect();
            let buckets = positions.iter().map(|&i| s.depth[i]).collect();
            ClosingItem {
                string: s.clone(),
                positions,
                buckets,
            }
        })
        .collect()
}

/// The designated close of each long-range item, bucketed by its target.
pub fn longrange_items(items: &[LongRangeItem]) -> Vec<ClosingItem> {
    items
        .iter()
        .map(|it| ClosingItem {
            string: it.string.clone(),
            positions: vec![it.close_pos],
            buckets: vec![it.target],
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub task: String,
    /// Number of brackets before the tested position.
    pub prefix_len: usize,
    pub bucket: usize,
    pub correct: bool,
    /// Type of the gold closing bracket.
    pub gold: usize,
    /// Full-vocabulary log-probability of each closing type.
    pub logprobs: Vec<f64>,
}

/// Per-prefix closing accuracy records: the prediction is correct when the
/// gold closer has the highest probability among the `num_types` closers.
pub fn closing_records(
    model: &PushdownModel,
    task: &str,
    items: &[ClosingItem],
    num_types: usize,
    mode: TapeMode,
) -> Result<Vec<EvalRecord>, ModelError> {
    let inf = model.inference();
    let closers: Vec<usize> = (0..num_types).map(|t| Bracket::Close(t).id()).collect();
    let mut out = Vec::new();
    for item in items {
        let Some(&last) = item.positions.iter().max() else {
            continue;
        };
        // sequence position p + 1 holds bracket p; bracket p is predicted
        // from the cache at position p
        let mut ids = vec![ROOT_ID];
        ids.extend(item.string.tokens[..last].iter().map(|b| b.id()));
        let caches = match mode {
            TapeMode::GoldOracle => {
                let seq = item.string.to_sequence();
                inf.run(&ids, &seq.r[..ids.len()])?
            }
            TapeMode::ModelGreedy => force_greedy(model, &ids)?.0,
        };
        for (&p, &bucket) in item.positions.iter().zip(&item.buckets) {
            let lp = inf.lm_log_probs(&caches[p]);
            let logprobs: Vec<f64> = closers.iter().map(|&c| lp[c]).collect();
            let gold = item.string.tokens[p].kind();
            out.push(EvalRecord {
                task: task.to_string(),
                prefix_len: p,
                bucket,
                correct: crate::train::argmax(&logprobs) == gold,
                gold,
                logprobs,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BucketAccuracy {
    pub bucket: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClosingReport {
    pub correct: usize,
    pub total: usize,
    /// Percent.
    pub accuracy: f64,
    pub buckets: Vec<BucketAccuracy>,
}

pub fn summarize(records: &[EvalRecord]) -> ClosingReport {
    let mut by: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for r in records {
        let e = by.entry(r.bucket).or_default();
        e.0 += usize::from(r.correct);
        e.1 += 1;
    }
    let pct = |c: usize, t: usize| {
        if t == 0 {
            0.0
        } else {
            100.0 * c as f64 / t as f64
        }
    };
    let correct = records.iter().filter(|r| r.correct).count();
    ClosingReport {
        correct,
        total: records.len(),
        accuracy: pct(correct, records.len()),
        buckets: by
            .into_iter()
            .map(|(bucket, (c, t))| BucketAccuracy {
                bucket,
                correct: c,
                total: t,
                accuracy: pct(c, t),
            })
            .collect(),
    }
}

/// Convenience wrapper: records plus summary.
pub fn closing_accuracy(
    model: &PushdownModel,
    task: &str,
    items: &[ClosingItem],
    num_types: usize,
    mode: TapeMode,
) -> Result<(ClosingReport, Vec<EvalRecord>), ModelError> {
    let records = closing_records(model, task, items, num_types, mode)?;
    Ok((summarize(&records), records))
}

/// `task,prefix_len,bucket,gold,correct,logprobs` with the log-probs
/// separated by `;`.
pub fn records_csv(records: &[EvalRecord]) -> String {
    let mut s = String::from("task,prefix_len,bucket,gold,correct,logprobs\n");
    for r in records {
        let lp: Vec<String> = r.logprobs.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.task,
            r.prefix_len,
            r.bucket,
            r.gold,
            u8::from(r.correct),
            lp.join(";")
        );
    }
    s
}

/// `bucket,correct,total,accuracy`, then an `all` row.
pub fn report_csv(report: &ClosingReport) -> String {
    let mut s = String::from("bucket,correct,total,accuracy\n");
    for b in &report.buckets {
        let _ = writeln!(s, "{},{},{},{}", b.bucket, b.correct, b.total, b.accuracy);
    }
    let _ = writeln!(
        s,
        "all,{},{},{}",
        report.correct, report.total, report.accuracy
    );
    s
}

/// Unlabeled bracketing scores. Spans are internal nodes other than the
/// whole sentence; single words never form spans.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct F1Result {
    pub matched: usize,
    pub gold: usize,
    pub predicted: usize,
}

impl F1Result {
    pub fn precision(&self) -> f64 {
        ratio(self.matched, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.matched, self.gold)
    }

    /// Percent; 100 when neither tree has a scorable span.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    /// Micro-averaged accumulation over a corpus.
    pub fn add(&mut self, other: F1Result) {
        self.matched += other.matched;
        self.gold += other.gold;
        self.predicted += other.predicted;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        100.0
    } else {
        100.0 * a as f64 / b as f64
    }
}

fn scored_spans(t: &BinaryTree) -> Vec<(usize, usize)> {
    let whole = (0, t.num_leaves() - 1);
    let mut s: Vec<(usize, usize)> = t
        .internal_spans()
        .into_iter()
        .filter(|&sp| sp != whole)
        .collect();
    s.sort_unstable();
    s
}

pub fn unlabeled_f1(pred: &BinaryTree, gold: &BinaryTree) -> F1Result {
    assert_eq!(
        pred.num_leaves(),
        gold.num_leaves(),
        "trees cover different sentences"
    );
    let p = scored_spans(pred);
    let g = scored_spans(gold);
    let matched = p.iter().filter(|s| g.binary_search(s).is_ok()).count();
    F1Result {
        matched,
        gold: g.len(),
        predicted: p.len(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerplexityRow {
    pub model: String,
    pub perplexity: f64,
    pub nll: f64,
    pub tokens: usize,
}

/// Teacher-forced perplexity of each model on the same sequences.
pub fn perplexity_report(
    models: &[(&str, &PushdownModel)],
    seqs: &[Sequence],
    batch_size: usize,
) -> Result<Vec<PerplexityRow>, TrainError> {
    models
        .iter()
        .map(|(name, m)| {
            let v = validate(m, seqs, batch_size)?;
            Ok(PerplexityRow {
                model: name.to_string(),
                perplexity: v.perplexity,
                nll: v.nll,
                tokens: v.tokens,
            })
        })
        .collect()
}

pub fn perplexity_csv(rows: &[PerplexityRow]) -> String {
    let mut s = String::from("model,perplexity,nll,tokens\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.model, r.perplexity, r.nll, r.tokens);
    }
    s
}

/// A probe sentence: tokens (ROOT first), gold attachments, the query
/// position whose attention is read, and the positions of interest.
#[derive(Clone, Debug)]
pub struct Probe {
    pub ids: Vec<usize>,
    pub r: Vec<usize>,
    pub query: usize,
    pub targets: Vec<usize>,
}

/// Probe at the last bracket before a close: targets are the brackets
/// still open there. Positions count ROOT as 0.
pub fn dyck_probe(s: &DyckString, close_pos: usize) -> Probe {
    let seq = s.to_sequence();
    let targets = (0..close_pos)
        .filter(|&i| s.tokens[i].is_open() && s.matching[i] >= close_pos)
        .map(|i| i + 1)
        .collect();
    Probe {
        ids: seq.ids[..close_pos + 1].to_vec(),
        r: seq.r[..close_pos + 1].to_vec(),
        query: close_pos,
        targets,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeAttention {
    /// Per layer, head-averaged attention of the query over keys.
    pub layers: Vec<Vec<f64>>,
    /// Layer average of `layers`.
    pub mean: Vec<f64>,
    /// Attention mass on the targets, per layer.
    pub target_mass: Vec<f64>,
    /// Layer-averaged full matrix `[T][T]` for heatmaps.
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionReport {
    pub probes: Vec<ProbeAttention>,
    /// Mean over probes of the layer-averaged target mass.
    pub mean_target_mass: f64,
}

/// Teacher-forced attention at each probe's query, with gold tapes.
pub fn attention_analysis(
    model: &PushdownModel,
    probes: &[Probe],
) -> Result<AttentionReport, ModelError> {
    let mut out = Vec::with_capacity(probes.len());
    for p in probes {
        let batch = Batch::from_pairs(&[(&p.ids, &p.r)])?;
        let fwd = model.forward_values(&batch)?;
        let t = batch.len;
        let h = model.config.heads;
        let mut layers = Vec::new();
        let mut matrix = vec![vec![0.0; t]; t];
        for att in &fwd.attention {
            let a = att.data();
            let mut row = vec![0.0; t];
            for hh in 0..h {
                for i in 0..t {
                    for j in 0..t {
                        let w = a[(hh * t + i) * t + j] / h as f64;
                        if i == p.query {
                            row[j] += w;
                        }
                        matrix[i][j] += w / fwd.attention.len() as f64;
                    }
                }
            }
            layers.push(row);
        }
        let nl = layers.len() as f64;
        let mean: Vec<f64> = (0..t)
            .map(|j| layers.iter().map(|l| l[j]).sum::<f64>() / nl)
            .collect();
        let target_mass = layers
            .iter()
            .map(|l| p.targets.iter().map(|&j| l[j]).sum())
            .collect();
        out.push(ProbeAttention {
            layers,
            mean,
            target_mass,
            matrix,
        });
    }
    let mean_target_mass = if out.is_empty() {
        0.0
    } else {
        out.iter()
            .map(|p| p.target_mass.iter().sum::<f64>() / p.target_mass.len() as f64)
            .sum::<f64>()
            / out.len() as f64
    };
    Ok(AttentionReport {
        probes: out,
        mean_target_mass,
    })
}

/// `probe,layer,key,token,weight,target` rows; layer `mean` is the
/// layer average.
pub fn attention_csv(
    report: &AttentionReport,
    probes: &[Probe],
    tokens: &dyn Fn(usize) -> String,
) -> String {
    let mut s = String::from("probe,layer,key,token,weight,target\n");
    for (pi, (pa, probe)) in report.probes.iter().zip(probes).enumerate() {
        let rows = pa
            .layers
            .iter()
            .enumerate()
            .map(|(l, r)| (l.to_string(), r))
            .chain(std::iter::once(("mean".to_string(), &pa.mean)));
        for (layer, row) in rows {
            for (j, w) in row.iter().enumerate() {
                let tok = tokens(probe.ids[j]);
                let _ = writeln!(
                    s,
                    "{pi},{layer},{j},{tok},{w},{}",
                    u8::from(probe.targets.contains(&j))
                );
            }
        }
    }
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Grayscale heatmap of an attention matrix (darker is heavier) with token
/// labels on both axes.
pub fn attention_svg(matrix: &[Vec<f64>], labels: &[String]) -> String {
    let n = matrix.len();
    let cell = 18;
    let margin = 60;
    let size = margin + n * cell;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" font-family=\"monospace\" font-size=\"10\">\n"
    );
    for (i, l) in labels.iter().enumerate().take(n) {
        let l = xml_escape(l);
        let c = margin + i * cell + cell / 2;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{c}\" text-anchor=\"end\" dominant-baseline=\"middle\">{l}</text>",
            margin - 4
        );
        let _ = writeln!(
            s,
            "<text x=\"{c}\" y=\"{}\" text-anchor=\"start\" transform=\"rotate(-90 {c} {})\">{l}</text>",
            margin - 4,
            margin - 4
        );
    }
    for (i, row) in matrix.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            let v = (255.0 * (1.0 - w.clamp(0.0, 1.0))).round() as u8;
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({v},{v},{v})\"><title>{w:.4}</title></rect>",
                margin + j * cell,
                margin + i * cell
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Log-sum-exp of closing-type log-probs; handy for calibration checks.
pub fn closer_mass(record: &EvalRecord) -> f64 {
    kernels::log_sum_exp(&record.logprobs).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyck::{build_depth_gen_split, dyck_gold_tree, parse_tokens, sample_dyck, DyckSpec};
    use crate::model::{Mode, ModelConfig};
    use crate::treebank::{enumerate_binary_trees, parse_sexpr, random_binary_tree};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tree(s: &str) -> BinaryTree {
        // leaves are numbered left to right
        let p = parse_sexpr(&s.replace('(', "(X ")).unwrap();
        crate::treebank::binarize(&p).0
    }

    #[test]
    fn f1_hand_cases() {
        let a = tree("(a (b (c d)))");
        let b = tree("(((a b) c) d)");
        assert_eq!(unlabeled_f1(&a, &a).f1(), 100.0);
        let r = unlabeled_f1(&b, &a);
        assert_eq!((r.matched, r.gold, r.predicted), (0, 2, 2));
        assert_eq!(r.f1(), 0.0);
        // two words have no scorable span
        let two = tree("(a b)");
        assert_eq!(unlabeled_f1(&two, &two).f1(), 100.0);
    }

    /// Independent span counter working on bracket strings.
    fn spans_from_text(s: &str) -> Vec<(usize, usize)> {
        let mut stack = Vec::new();
        let mut out = Vec::new();
        let mut leaf = 0;
        for tok in s.replace('(', " ( ").replace(')', " ) ").split_whitespace() {
            match tok {
                "(" => stack.push(leaf),
                ")" => {
                    let start = stack.pop().unwrap();
                    out.push((start, leaf - 1));
                }
                _ => leaf += 1,
            }
        }
        out.retain(|&(a, b)| !(a == 0 && b == leaf - 1) && a != b);
        out.sort();
        out.dedup();
        out
    }

    #[test]
    fn one_rotation_matches_brute_force_counter() {
        let gold = "((a b) ((c d) e))";
        let pred = "((a b) (c (d e)))";
        let g = spans_from_text(gold);
        let p = spans_from_text(pred);
        let m = p.iter().filter(|s| g.contains(s)).count();
        let expect = 2.0 * m as f64 / (g.len() + p.len()) as f64 * 100.0;
        let r = unlabeled_f1(&tree(pred), &tree(gold));
        assert_eq!((r.matched, r.gold, r.predicted), (m, g.len(), p.len()));
        assert!((r.f1() - expect).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn f1_is_symmetric(n in 2usize..12, s1 in 0u64..1000, s2 in 0u64..1000) {
            let a = random_binary_tree(n, &mut ChaCha8Rng::seed_from_u64(s1));
            let b = random_binary_tree(n, &mut ChaCha8Rng::seed_from_u64(s2));
            let ab = unlabeled_f1(&a, &b);
            let ba = unlabeled_f1(&b, &a);
            prop_assert_eq!(ab.precision(), ba.recall());
            prop_assert_eq!(ab.f1(), ba.f1());
            prop_assert!(ab.f1() <= 100.0);
        }
    }

    #[test]
    fn dyck_gold_trees_score_full_marks_against_pairing() {
        let spec = DyckSpec {
            num_types: 3,
            max_depth: 4,
            min_len: 4,
            max_len: 30,
            seed: 2,
            ..DyckSpec::default()
        };
        for s in sample_dyck(&spec, 50).unwrap() {
            let t = dyck_gold_tree(&s);
            assert_eq!(unlabeled_f1(&t, &t).f1(), 100.0);
            // every matched pair is a constituent of the gold tree
            let spans = t.internal_spans();
            for (i, b) in s.tokens.iter().enumerate() {
                if b.is_open() {
                    assert!(spans.contains(&(i, s.matching[i])));
                }
            }
        }
    }

    #[test]
    fn closing_record_definition() {
        let s = parse_tokens("<2 <0 0> 2>").unwrap();
        let items = depth_items(&[s]);
        assert_eq!(items[0].positions, vec![2, 3]);
        assert_eq!(items[0].buckets, vec![2, 1]);
        let m = PushdownModel::new(ModelConfig::pushdown(1, 2, 8, 2 + 2 * 3, 16, 6), 0).unwrap();
        let recs = closing_records(&m, "t", &items, 3, TapeMode::GoldOracle).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].gold, 0);
        assert_eq!(recs[1].gold, 2);
        for r in &recs {
            assert_eq!(r.correct, crate::train::argmax(&r.logprobs) == r.gold);
            assert!(closer_mass(r) <= 1.0);
        }
    }

    #[test]
    fn gold_mode_matches_teacher_forced_forward() {
        let spec = DyckSpec {
            num_types: 3,
            max_depth: 4,
            min_len: 6,
            max_len: 16,
            seed: 4,
            ..DyckSpec::default()
        };
        let strings = sample_dyck(&spec, 5).unwrap();
        let mut c = ModelConfig::pushdown(2, 2, 8, 8, 24, 6);
        c.init_std = 0.4;
        let m = PushdownModel::new(c, 3).unwrap();
        let items = depth_items(&strings);
        let recs = closing_records(&m, "t", &items, 3, TapeMode::GoldOracle).unwrap();
        let mut it = recs.iter();
        for s in &strings {
            let seq = s.to_sequence();
            let out = m
                .forward_values(&Batch::from_sequences(&[&seq]).unwrap())
                .unwrap();
            let v = 8;
            for p in (0..s.len()).filter(|&i| !s.tokens[i].is_open()) {
                let rec = it.next().unwrap();
                let row = &out.lm_logits.data()[p * v..(p + 1) * v];
                let mut lp = vec![0.0; v];
                kernels::log_softmax_masked_row(row, |_| true, &mut lp);
                for t in 0..3 {
                    assert!((rec.logprobs[t] - lp[3 + 2 * t]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let train = DyckSpec {
            num_types: 8,
            max_depth: 6,
            min_len: 4,
            max_len: 40,
            seed: 1,
            ..DyckSpec::default()
        };
        let strings = build_depth_gen_split(&train, 8..=12, 30, 3).unwrap();
        let items = depth_items(&strings);
        // one random init favours some types; average several
        let mut accs = Vec::new();
        let mut rep = None;
        for seed in 0..6 {
            let m = PushdownModel::new(ModelConfig::pushdown(2, 2, 16, 18, 48, 12), seed).unwrap();
            let (r, recs) = closing_accuracy(&m, "depth", &items, 8, TapeMode::GoldOracle).unwrap();
            assert!(recs.len() >= 400, "{}", recs.len());
            accs.push(r.accuracy);
            rep = Some(r);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 12.5).abs() < 4.0, "{accs:?}");
        let rep = rep.unwrap();
        assert!(report_csv(&rep).lines().last().unwrap().starts_with("all,"));
    }

    #[test]
    fn attention_rows_sum_to_one_and_degenerate_without_depth() {
        let s = parse_tokens("<0 <1 <2 2> 1> <1 1> 0>").unwrap();
        let probes = vec![dyck_probe(&s, 4), dyck_probe(&s, 7)];
        assert_eq!(probes[0].targets, vec![1, 2]);
        assert_eq!(probes[1].targets, vec![1]);
        let mut c = ModelConfig::pushdown(2, 2, 8, 8, 16, 6);
        c.init_std = 0.3;
        let mut pd = PushdownModel::new(c.clone(), 1).unwrap();
        let rep = attention_analysis(&pd, &probes).unwrap();
        for p in &rep.probes {
            for row in p
                .layers
                .iter()
                .chain(std::iter::once(&p.mean))
                .chain(p.matrix.iter())
            {
                let total: f64 = row.iter().sum();
                assert!((total - 1.0).abs() < 1e-9 || total == 0.0 || row.len() != p.mean.len());
            }
            assert!((p.mean.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        for id in pd.depth_tables() {
            pd.params.get_mut(id).data_mut().fill(0.0);
        }
        let mut base = PushdownModel::new(c.with_mode(Mode::BaseMultitask), 2).unwrap();
        for id in base.params.ids().collect::<Vec<_>>() {
            let src = pd.params.find(base.params.name(id)).unwrap();
            let data = pd.params.get(src).data().to_vec();
            base.params.get_mut(id).data_mut().copy_from_slice(&data);
        }
        let a = attention_analysis(&pd, &probes).unwrap();
        let b = attention_analysis(&base, &probes).unwrap();
        assert_eq!(a, b);
        let labels: Vec<String> = probes[1].ids.iter().map(|i| format!("t{i}")).collect();
        let svg = attention_svg(&a.probes[1].matrix, &labels);
        assert!(svg.starts_with("<svg") && svg.matches("<rect").count() == 64);
        let csv = attention_csv(&a, &probes, &|i| format!("t{i}"));
        assert_eq!(csv.lines().count(), 1 + (3 * 5) + (3 * 8));
    }

    #[test]
    fn perplexity_rows() {
        let words = [2, 3, 4];
        let seqs: Vec<Sequence> = enumerate_binary_trees(3)
            .iter()
            .map(|t| Sequence::from_tree(&words, t))
            .collect();
        let m = PushdownModel::new(ModelConfig::pushdown(1, 2, 8, 6, 8, 4), 0).unwrap();
        let rows = perplexity_report(&[("a", &m), ("b", &m)], &seqs, 4).unwrap();
        assert_eq!(rows[0].perplexity, rows[1].perplexity);
        assert_eq!(rows[0].tokens, 8);
        assert!(perplexity_csv(&rows).starts_with("model,perplexity"));
    }
}
