//! Decoding with synchronous stack-tape updates: generation, joint scoring,
//! beam marginalization over parses, surprisal and best-parse extraction.
//!
//! The generative process scored here: at each step the next word is drawn
//! from the LM head renormalized over the tokens that are legal in the
//! current state (any word while the sentence is open, only EOS once the
//! last word has attached to ROOT), then its attachment is drawn from the
//! attachment head renormalized over the stack candidates. EOS always
//! shifts. Every `(x, y)` with a binary tree `y` over `x` has exactly one
//! derivation, and [`score_joint`] returns its log-probability.

use std::cmp::Ordering;
use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::kernels;
use crate::model::{masked_log_probs, Inference, ModelError, PositionCache, PushdownModel};
use crate::stack::{AttachmentError, StackState};
use crate::treebank::{BinaryTree, Sequence, EOS_ID, ROOT_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BeamMode {
    Score,
    Parse,
    Surprisal,
    Generate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamConfig {
    pub width: usize,
    pub mode: BeamMode,
    /// Maximum number of words to generate.
    pub max_len: usize,
    /// Sampling temperature for generation; 0 means greedy.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            width: 32,
            mode: BeamMode::Score,
            max_len: 64,
            temperature: 0.0,
            seed: 0,
        }
    }
}

impl BeamConfig {
    pub fn width(width: usize) -> Self {
        Self {
            width,
            ..Self::default()
        }
    }
}

/// A partial derivation: tokens so far (ROOT first), their attachments,
/// the resulting stack state and the joint log-probability.
#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub ids: Vec<usize>,
    pub r: Vec<usize>,
    pub state: StackState,
    pub logprob: f64,
    caches: Vec<Arc<PositionCache>>,
}

impl Hypothesis {
    fn start(inf: &Inference) -> Result<Self, ModelError> {
        let mut state = StackState::new();
        state.apply(0, 0)?;
        let c = inf.step(&[], ROOT_ID, state.tape())?;
        Ok(Self {
            ids: vec![ROOT_ID],
            r: vec![0],
            state,
            logprob: 0.0,
            caches: vec![Arc::new(c)],
        })
    }

    /// The last word has attached to ROOT; only EOS may follow.
    pub fn is_complete(&self) -> bool {
        self.state.next_index() > 1 && self.state.height() == 1
    }

    pub fn is_finished(&self) -> bool {
        self.ids.last() == Some(&EOS_ID)
    }

    /// Tree over the words, once finished.
    pub fn tree(&self) -> Result<BinaryTree, AttachmentError> {
        Sequence {
            ids: self.ids.clone(),
            r: self.r.clone(),
        }
        .gold_tree()
    }

    pub fn words(&self) -> &[usize] {
        let end = if self.is_finished() {
            self.ids.len() - 1
        } else {
            self.ids.len()
        };
        &self.ids[1..end]
    }
}

/// Word log-probabilities in `hyp`'s state, renormalized over legal tokens.
fn word_log_probs(inf: &Inference, hyp: &Hypothesis) -> Vec<f64> {
    let logits = inf.lm_logits(hyp.caches.last().expect("hypotheses hold ROOT"));
    let complete = hyp.is_complete();
    let mask: Vec<bool> = (0..logits.len())
        .map(|t| {
            if complete {
                t == EOS_ID
            } else {
                t != EOS_ID && t != ROOT_ID
            }
        })
        .collect();
    masked_log_probs(&logits, &mask)
}

/// Attachment log-probabilities for `token` arriving at `hyp`, indexed by
/// target (`len = k + 1`, shift last). EOS always shifts.
fn attach_log_probs(
    inf: &Inference,
    hyp: &Hypothesis,
    token: usize,
) -> Result<Vec<f64>, ModelError> {
    let k = hyp.state.next_index();
    if token == EOS_ID {
        let mut out = vec![f64::NEG_INFINITY; k + 1];
        out[k] = 0.0;
        return Ok(out);
    }
    let logits = inf.attach_logits(&hyp.caches, hyp.state.tape(), token)?;
    Ok(masked_log_probs(&logits, &hyp.state.candidate_mask()))
}

fn extend(
    inf: &Inference,
    parent: &Hypothesis,
    token: usize,
    r: usize,
    logprob: f64,
) -> Result<Hypothesis, ModelError> {
    let k = parent.state.next_index();
    let state = parent.state.update(k, r)?;
    let mut caches = parent.caches.clone();
    if token != EOS_ID {
        caches.push(Arc::new(inf.step(&parent.caches, token, state.tape())?));
    }
    let mut ids = parent.ids.clone();
    ids.push(token);
    let mut rs = parent.r.clone();
    rs.push(r);
    Ok(Hypothesis {
        ids,
        r: rs,
        state,
        logprob,
        caches,
    })
}

/// Score descending, then attachment history ascending.
fn rank(
    a_score: f64,
    a_hist: (&[usize], usize),
    b_score: f64,
    b_hist: (&[usize], usize),
) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_hist.0.cmp(b_hist.0))
        .then_with(|| a_hist.1.cmp(&b_hist.1))
}

/// Beam state after each word, plus the per-token surprisals.
#[derive(Clone, Debug)]
pub struct BeamTrace {
    /// Finished hypotheses, best first.
    pub finals: Vec<Hypothesis>,
    /// `−log p̂(x_t | x_<t)` for each word and for EOS.
    pub surprisal: Vec<f64>,
    /// Largest number of live hypotheses seen after pruning.
    pub peak_width: usize,
}

fn require_head(model: &PushdownModel) -> Result<(), ModelError> {
    if model.config.has_attach_head() {
        Ok(())
    } else {
        Err(ModelError::NoAttachHead)
    }
}

/// Beam search over attachments for fixed `words`. At each word the
/// attachments of every hypothesis are expanded, scored jointly with the
/// word, and the best `width` kept.
///
/// With `lookahead`, continuations that cannot complete `x` (attaching to
/// ROOT before the last word, or not at the last word) are dropped before
/// pruning; they have probability zero for this `x`. Without it the beam
/// never uses the sentence length, so its per-step word probabilities are
/// genuine incremental predictions; such hypotheses then die one step later.
/// Hypotheses that close the sentence are pruned separately from open ones,
/// each group to `width`.
pub fn beam_search(
    model: &PushdownModel,
    words: &[usize],
    width: usize,
    lookahead: bool,
) -> Result<BeamTrace, ModelError> {
    require_head(model)?;
    assert!(width >= 1, "beam width must be at least 1");
    if words.is_empty() {
        return Err(ModelError::Attachment(AttachmentError::Empty));
    }
    let inf = model.inference();
    let n = words.len();
    let mut beam = vec![Hypothesis::start(&inf)?];
    let mut surprisal = Vec::with_capacity(n + 1);
    let mut peak = 1;
    for (step, &token) in words.iter().chain(std::iter::once(&EOS_ID)).enumerate() {
        let k = step + 1;
        let lse_prev = kernels::log_sum_exp(&beam.iter().map(|h| h.logprob).collect::<Vec<_>>());
        let mut mass = Vec::with_capacity(beam.len());
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (pi, hyp) in beam.iter().enumerate() {
            let w = word_log_probs(&inf, hyp)[token];
            mass.push(hyp.logprob + w);
            if w == f64::NEG_INFINITY {
                continue;
            }
            let a = attach_log_probs(&inf, hyp, token)?;
            for (r, &lp) in a.iter().enumerate() {
                let feasible = match (token == EOS_ID, lookahead) {
                    (true, _) => r == k,
                    (false, false) => true,
                    (false, true) => (k < n) == (r != 0),
                };
                if feasible && lp > f64::NEG_INFINITY {
                    cands.push((pi, r, hyp.logprob + w + lp));
                }
            }
        }
        surprisal.push(lse_prev - kernels::log_sum_exp(&mass));
        cands.sort_by(|a, b| rank(a.2, (&beam[a.0].r, a.1), b.2, (&beam[b.0].r, b.1)));
        // closed hypotheses get their own budget so they never crowd out
        // open ones; they only ever survive one more step
        let (mut open, mut closed) = (0, 0);
        cands.retain(|&(_, r, _)| {
            let slot = if r == 0 && token != EOS_ID {
                &mut closed
            } else {
                &mut open
            };
            *slot += 1;
            *slot <= width
        });
        if cands.is_empty() {
            return Err(ModelError::Attachment(AttachmentError::Incomplete {
                height: beam[0].state.height(),
            }));
        }
        beam = cands
            .iter()
            .map(|&(pi, r, s)| extend(&inf, &beam[pi], token, r, s))
            .collect::<Result<_, _>>()?;
        peak = peak.max(beam.len());
    }
    Ok(BeamTrace {
        finals: beam,
        surprisal,
        peak_width: peak,
    })
}

/// `log p(x, y)` for words `x` and a tree `y` over them.
pub fn score_joint(
    model: &PushdownModel,
    words: &[usize],
    tree: &BinaryTree,
) -> Result<f64, ModelError> {
    Ok(joint_terms(model, &Sequence::from_tree(words, tree))?
        .iter()
        .map(|(w, a)| w + a)
        .sum())
}

/// Per-step `(log p(x_k | ·), log p(r_k | ·))` along a full sequence.
pub fn joint_terms(model: &PushdownModel, seq: &Sequence) -> Result<Vec<(f64, f64)>, ModelError> {
    require_head(model)?;
    let inf = model.inference();
    let mut hyp = Hypothesis::start(&inf)?;
    let mut out = Vec::with_capacity(seq.len() - 1);
    for k in 1..seq.len() {
        let (token, r) = (seq.ids[k], seq.r[k]);
        let w = word_log_probs(&inf, &hyp)[token];
        let a = attach_log_probs(&inf, &hyp, token)?[r];
        out.push((w, a));
        hyp = extend(&inf, &hyp, token, r, hyp.logprob + w + a)?;
    }
    Ok(out)
}

/// Approximate `log p(x)`: log-sum-exp over the final beam.
pub fn marginal_logprob(
    model: &PushdownModel,
    words: &[usize],
    config: &BeamConfig,
) -> Result<f64, ModelError> {
    let trace = beam_search(model, words, config.width, true)?;
    Ok(kernels::log_sum_exp(
        &trace.finals.iter().map(|h| h.logprob).collect::<Vec<_>>(),
    ))
}

/// Per-token surprisal (words then EOS) from the beam state at each step.
pub fn surprisal(
    model: &PushdownModel,
    words: &[usize],
    config: &BeamConfig,
) -> Result<Vec<f64>, ModelError> {
    Ok(beam_search(model, words, config.width, false)?.surprisal)
}

/// Highest-scoring tree in the final beam.
pub fn best_parse(
    model: &PushdownModel,
    words: &[usize],
    config: &BeamConfig,
) -> Result<BinaryTree, ModelError> {
    let trace = beam_search(model, words, config.width, true)?;
    Ok(trace.finals[0].tree()?)
}

/// Exact `log p(x)` by enumerating every binary tree (small `n` only).
pub fn exact_marginal(model: &PushdownModel, words: &[usize]) -> Result<f64, ModelError> {
    let scores = crate::treebank::enumerate_binary_trees(words.len())
        .iter()
        .map(|t| score_joint(model, words, t))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(kernels::log_sum_exp(&scores))
}

/// Result of [`generate`].
#[derive(Clone, Debug)]
pub struct Generation {
    /// ROOT, words, EOS.
    pub ids: Vec<usize>,
    pub r: Vec<usize>,
    pub tree: BinaryTree,
    /// Tape fed to each computed position (ROOT and words).
    pub tapes: Vec<Vec<usize>>,
    pub logprob: f64,
}

impl Generation {
    pub fn words(&self) -> &[usize] {
        &self.ids[1..self.ids.len() - 1]
    }
}

fn pick(log_probs: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    if temperature <= 0.0 {
        return crate::train::argmax(log_probs);
    }
    let max = log_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_probs
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    WeightedIndex::new(&w)
        .expect("at least one legal token")
        .sample(rng)
}

/// Generates a sentence after forcing `prompt`, choosing each word (argmax
/// or sampled) and then its most likely attachment. Prompt words other than
/// the last may not close the sentence, and the word at the length cap is
/// attached to ROOT. `logprob` is the model's joint log-probability of the
/// emitted derivation.
pub fn generate(
    model: &PushdownModel,
    prompt: &[usize],
    config: &BeamConfig,
) -> Result<Generation, ModelError> {
    require_head(model)?;
    let inf = model.inference();
    let cap = config
        .max_len
        .min(model.config.max_len.saturating_sub(2))
        .max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut hyp = Hypothesis::start(&inf)?;
    let mut tapes = vec![hyp.state.tape().to_vec()];
    loop {
        let k = hyp.state.next_index();
        let words = k - 1;
        let wl = word_log_probs(&inf, &hyp);
        let token = match prompt.get(words) {
            Some(&t) if !hyp.is_complete() => t,
            _ => pick(&wl, config.temperature, &mut rng),
        };
        if wl[token] == f64::NEG_INFINITY {
            return Err(ModelError::TokenOutOfRange {
                id: token,
                vocab: model.config.vocab_size,
            });
        }
        let al = attach_log_probs(&inf, &hyp, token)?;
        let mut choice = al.clone();
        if token != EOS_ID {
            if words + 1 == cap {
                choice
                    .iter_mut()
                    .skip(1)
                    .for_each(|x| *x = f64::NEG_INFINITY);
            } else if words + 1 < prompt.len() {
                choice[0] = f64::NEG_INFINITY;
            }
        }
        let r = crate::train::argmax(&choice);
        hyp = extend(&inf, &hyp, token, r, hyp.logprob + wl[token] + al[r])?;
        if token == EOS_ID {
            break;
        }
        tapes.push(hyp.state.tape().to_vec());
    }
    let tree = hyp.tree()?;
    Ok(Generation {
        ids: hyp.ids,
        r: hyp.r,
        tree,
        tapes,
        logprob: hyp.logprob,
    })
}

/// Teacher-forced pass over `ids` (ROOT first) in which every attachment is
/// the model's own argmax. No token may close the sentence, since `ids`
/// is treated as a prefix that continues. Returns the per-position caches
/// and the attachments chosen. Models without an attachment head shift
/// every token, which leaves their LM predictions unaffected.
pub fn force_greedy(
    model: &PushdownModel,
    ids: &[usize],
) -> Result<(Vec<Arc<PositionCache>>, Vec<usize>), ModelError> {
    let inf = model.inference();
    let mut state = StackState::new();
    let mut caches: Vec<Arc<PositionCache>> = Vec::with_capacity(ids.len());
    let mut r = Vec::with_capacity(ids.len());
    for (k, &tok) in ids.iter().enumerate() {
        let rk = if k == 0 || !model.config.has_attach_head() {
            k
        } else {
            let logits = inf.attach_logits(&caches, state.tape(), tok)?;
            let mut mask = state.candidate_mask();
            mask[0] = false;
            crate::train::argmax(&masked_log_probs(&logits, &mask))
        };
        state.apply(k, rk)?;
        r.push(rk);
        caches.push(Arc::new(inf.step(&caches, tok, state.tape())?));
    }
    Ok((caches, r))
}

/// One JSON line of `score` output.
#[derive(Clone, Debug, Serialize)]
pub struct ScoreRecord {
    pub tokens: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logprob: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub surprisals: Option<Vec<f64>>,
    pub beam_width: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttachHeadKind, ModelConfig};
    use crate::stack;
    use crate::treebank::{enumerate_binary_trees, random_binary_tree};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::Rng;

    fn model(seed: u64, std: f64) -> PushdownModel {
        let mut c = ModelConfig::pushdown(2, 2, 8, 7, 16, 6);
        c.init_std = std;
        PushdownModel::new(c, seed).unwrap()
    }

    fn catalan(n: usize) -> usize {
        (0..n).fold(1, |c, i| c * 2 * (2 * i + 1) / (i + 2))
    }

    #[test]
    fn joint_scores_are_log_probabilities() {
        let m = model(1, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in 1..6 {
            let words: Vec<usize> = (0..n).map(|_| rng.gen_range(2..7)).collect();
            for t in enumerate_binary_trees(n) {
                assert!(score_joint(&m, &words, &t).unwrap() <= 0.0);
            }
        }
    }

    #[test]
    fn three_words_two_trees() {
        let m = model(3, 0.5);
        let words = [2, 5, 3];
        let trees = enumerate_binary_trees(3);
        assert_eq!(trees.len(), 2);
        let by_hand = trees
            .iter()
            .map(|t| score_joint(&m, &words, t).unwrap().exp())
            .sum::<f64>()
            .ln();
        let beam = marginal_logprob(&m, &words, &BeamConfig::width(2)).unwrap();
        assert!((by_hand - beam).abs() < 1e-12);
    }

    #[test]
    fn full_width_beam_is_exact() {
        for seed in 0..3 {
            let m = model(seed, 0.4);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for n in 1..=6 {
                let words: Vec<usize> = (0..n).map(|_| rng.gen_range(2..7)).collect();
                let exact = exact_marginal(&m, &words).unwrap();
                let trace = beam_search(&m, &words, catalan(n - 1), true).unwrap();
                assert_eq!(trace.finals.len(), catalan(n - 1));
                let beam = kernels::log_sum_exp(
                    &trace.finals.iter().map(|h| h.logprob).collect::<Vec<_>>(),
                );
                assert!((exact - beam).abs() < 1e-10, "n={n}: {exact} vs {beam}");
                // without pruning the surprisals telescope to the marginal
                let open = beam_search(&m, &words, 10_000, false).unwrap();
                let total: f64 = open.surprisal.iter().sum();
                assert!((total + exact).abs() < 1e-10, "{total} vs {exact}");
                for h in &trace.finals {
                    let s = score_joint(&m, &words, &h.tree().unwrap()).unwrap();
                    assert!((s - h.logprob).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn width_one_follows_the_greedy_parse() {
        let m = model(4, 0.4);
        let words = [2, 3, 4, 5, 6, 2];
        let trace = beam_search(&m, &words, 1, true).unwrap();
        let h = &trace.finals[0];
        assert!((score_joint(&m, &words, &h.tree().unwrap()).unwrap() - h.logprob).abs() < 1e-12);
        assert_eq!(
            best_parse(&m, &words, &BeamConfig::width(1)).unwrap(),
            h.tree().unwrap()
        );
    }

    #[test]
    fn first_surprisal_ignores_width() {
        let m = model(5, 0.4);
        let words = [3, 4, 2, 2, 6];
        let a = surprisal(&m, &words, &BeamConfig::width(1)).unwrap();
        let b = surprisal(&m, &words, &BeamConfig::width(9)).unwrap();
        assert_eq!(a[0], b[0]);
        assert_eq!(a.len(), words.len() + 1);
    }

    #[test]
    fn best_parse_breaks_ties_by_attachment_order() {
        // zero model: every tree has the same score
        let mut m = model(6, 0.1);
        for id in m.params.ids().collect::<Vec<_>>() {
            m.params.get_mut(id).data_mut().fill(0.0);
        }
        let words = [2, 3, 4, 5];
        let tree = best_parse(&m, &words, &BeamConfig::width(5)).unwrap();
        let r = Sequence::from_tree(&words, &tree).r;
        let smallest = enumerate_binary_trees(4)
            .iter()
            .map(|t| Sequence::from_tree(&words, t).r)
            .min()
            .unwrap();
        assert_eq!(r, smallest);
    }

    #[test]
    fn generation_replays_and_matches_scoring() {
        for head in [AttachHeadKind::Mlp, AttachHeadKind::Bilinear] {
            let mut c = ModelConfig::pushdown(2, 2, 8, 7, 24, 6);
            c.init_std = 0.5;
            c.attach_head = head;
            let m = PushdownModel::new(c, 8).unwrap();
            for seed in 0..10 {
                let cfg = BeamConfig {
                    temperature: 1.0,
                    seed,
                    max_len: 12,
                    mode: BeamMode::Generate,
                    ..BeamConfig::default()
                };
                let g = generate(&m, &[], &cfg).unwrap();
                assert!(g.words().len() <= 12 && !g.words().is_empty());
                let (_, replayed) = stack::replay(&g.r[..g.r.len() - 1]).unwrap();
                assert_eq!(replayed, crate::treebank::attach_root(&g.tree));
                let tapes = stack::tape_matrix(&g.r).unwrap();
                for (k, tape) in g.tapes.iter().enumerate() {
                    assert_eq!(tape.as_slice(), tapes.prefix_row(k));
                }
                let s = score_joint(&m, g.words(), &g.tree).unwrap();
                assert!((s - g.logprob).abs() < 1e-10, "{s} vs {}", g.logprob);
            }
        }
    }

    #[test]
    fn prompt_is_respected() {
        let m = model(9, 0.5);
        let g = generate(
            &m,
            &[4, 4, 5],
            &BeamConfig {
                max_len: 3,
                ..BeamConfig::default()
            },
        )
        .unwrap();
        assert_eq!(g.words(), &[4, 4, 5]);
        assert_eq!(g.r[3], 0);
    }

    #[test]
    fn forced_greedy_prefix_stays_open() {
        let m = model(10, 0.5);
        let ids = [0, 2, 3, 4, 5, 6, 2];
        let (caches, r) = force_greedy(&m, &ids).unwrap();
        assert_eq!(caches.len(), ids.len());
        assert!(r[1..].iter().all(|&x| x != 0));
        let (state, _) = stack::replay_forest(&r).unwrap();
        assert!(state.height() >= 2);
        // the caches are those of a teacher-forced run along the same r
        let again = m.inference().run(&ids, &r).unwrap();
        assert_eq!(again.last().unwrap().hidden, caches.last().unwrap().hidden);
    }

    #[test]
    fn base_plain_cannot_parse() {
        let c = ModelConfig::pushdown(1, 2, 8, 7, 16, 6).with_mode(crate::model::Mode::BasePlain);
        let m = PushdownModel::new(c, 0).unwrap();
        assert!(matches!(
            best_parse(&m, &[2, 3], &BeamConfig::width(2)),
            Err(ModelError::NoAttachHead)
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn beam_hypotheses_are_valid(seed in 0u64..1000, n in 2usize..9, width in 1usize..6) {
            let m = model(seed % 3, 0.4);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let words: Vec<usize> = (0..n).map(|_| rng.gen_range(2..7)).collect();
            let trace = beam_search(&m, &words, width, true).unwrap();
            prop_assert!(trace.peak_width <= width);
            let open = beam_search(&m, &words, width, false).unwrap();
            prop_assert!(open.surprisal.iter().all(|x| x.is_finite()));
            for h in &trace.finals {
                let tree = h.tree().unwrap();
                prop_assert!(tree.num_leaves() == n);
                let s = score_joint(&m, &words, &tree).unwrap();
                prop_assert!((s - h.logprob).abs() < 1e-10);
            }
            let _ = random_binary_tree(n, &mut rng);
        }
    }
}
