//! Dyck_{k,d} strings: bounded-depth well-nested brackets with `k` types.
//!
//! Bracket `t` opens as `<t` and closes as `t>`, so the corpus can use the
//! ordinary bracketed tree format without escaping.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashSet;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::treebank::{BinaryTree, Corpus, Sequence, Vocab};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DyckError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("string is not well nested at position {0}")]
    IllNested(usize),
    #[error("sampling budget exhausted: produced {achieved} of {requested}")]
    Budget { achieved: usize, requested: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DyckSpec {
    pub num_types: usize,
    pub max_depth: usize,
    pub open_prob: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for DyckSpec {
    fn default() -> Self {
        Self {
            num_types: 20,
            max_depth: 10,
            open_prob: 0.49,
            min_len: 4,
            max_len: 256,
            seed: 0,
        }
    }
}

impl DyckSpec {
    pub fn validate(&self) -> Result<(), DyckError> {
        let bad = |m: &str| Err(DyckError::InvalidSpec(m.to_string()));
        if self.num_types == 0 {
            return bad("num_types must be at least 1");
        }
        if self.max_depth == 0 {
            return bad("max_depth must be at least 1");
        }
        if !(self.open_prob > 0.0 && self.open_prob < 1.0) {
            return bad("open_prob must lie strictly between 0 and 1");
        }
        if self.min_len > self.max_len {
            return bad("min_len exceeds max_len");
        }
        if self.even_lengths().is_none() {
            return bad("no even length in [min_len, max_len]");
        }
        Ok(())
    }

    fn even_lengths(&self) -> Option<(usize, usize)> {
        let lo = self.min_len.max(2).div_ceil(2) * 2;
        let hi = self.max_len / 2 * 2;
        (lo <= hi).then_some((lo, hi))
    }

    pub fn vocab(&self) -> Vocab {
        dyck_vocab(self.num_types)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Bracket {
    Open(usize),
    Close(usize),
}

impl Bracket {
    pub fn is_open(self) -> bool {
        matches!(self, Bracket::Open(_))
    }

    pub fn kind(self) -> usize {
        match self {
            Bracket::Open(t) | Bracket::Close(t) => t,
        }
    }

    pub fn token(self) -> String {
        match self {
            Bracket::Open(t) => format!("<{t}"),
            Bracket::Close(t) => format!("{t}>"),
        }
    }

    /// Vocabulary id under [`dyck_vocab`].
    pub fn id(self) -> usize {
        match self {
            Bracket::Open(t) => 2 + 2 * t,
            Bracket::Close(t) => 3 + 2 * t,
        }
    }

    pub fn from_id(id: usize) -> Option<Bracket> {
        match id {
            0 | 1 => None,
            i if i % 2 == 0 => Some(Bracket::Open((i - 2) / 2)),
            i => Some(Bracket::Close((i - 3) / 2)),
        }
    }
}

/// `<ROOT> <EOS> <0 0> <1 1> ...`: `2 + 2k` tokens.
pub fn dyck_vocab(num_types: usize) -> Vocab {
    Vocab::from_tokens(
        (0..num_types).flat_map(|t| [Bracket::Open(t).token(), Bracket::Close(t).token()]),
    )
}

pub fn is_close_id(id: usize) -> bool {
    matches!(Bracket::from_id(id), Some(Bracket::Close(_)))
}

/// A well-nested string with its pairing and per-position nesting depth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DyckString {
    pub tokens: Vec<Bracket>,
    /// Partner index of every position.
    pub matching: Vec<usize>,
    /// Number of brackets open around a position, counting its own pair.
    pub depth: Vec<usize>,
}

impl DyckString {
    pub fn new(tokens: Vec<Bracket>) -> Result<Self, DyckError> {
        let n = tokens.len();
        let mut matching = vec![0; n];
        let mut depth = vec![0; n];
        let mut open: Vec<usize> = Vec::new();
        for (i, b) in tokens.iter().enumerate() {
            match *b {
                Bracket::Open(_) => {
                    open.push(i);
                    depth[i] = open.len();
                }
                Bracket::Close(t) => {
                    let j = open.pop().ok_or(DyckError::IllNested(i))?;
                    if tokens[j] != Bracket::Open(t) {
                        return Err(DyckError::IllNested(i));
                    }
                    depth[i] = open.len() + 1;
                    matching[i] = j;
                    matching[j] = i;
                }
            }
        }
        if let Some(&j) = open.last() {
            return Err(DyckError::IllNested(j));
        }
        Ok(Self {
            tokens,
            matching,
            depth,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn max_depth(&self) -> usize {
        self.depth.iter().copied().max().unwrap_or(0)
    }

    pub fn ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|b| b.id()).collect()
    }

    /// Space separated tokens.
    pub fn text(&self) -> String {
        self.tokens
            .iter()
            .map(|b| b.token())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn hash64(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.tokens.hash(&mut h);
        h.finish()
    }

    /// Training sequence (ROOT, brackets, EOS) with gold attachments.
    pub fn to_sequence(&self) -> Sequence {
        Sequence::from_tree(&self.ids(), &dyck_gold_tree(self))
    }
}

/// Samples one string from the process described on [`sample_dyck`].
pub fn sample_one<R: Rng + ?Sized>(spec: &DyckSpec, rng: &mut R) -> DyckString {
    let (lo, hi) = spec.even_lengths().expect("spec validated");
    let len = 2 * rng.gen_range(lo / 2..=hi / 2);
    let mut tokens = Vec::with_capacity(len);
    let mut open: Vec<usize> = Vec::new();
    for pos in 0..len {
        let remaining = len - pos;
        let d = open.len();
        let must_close = remaining == d || d == spec.max_depth;
        let do_open = d == 0 || (!must_close && rng.gen_bool(spec.open_prob));
        if do_open {
            let t = rng.gen_range(0..spec.num_types);
            open.push(t);
            tokens.push(Bracket::Open(t));
        } else {
            tokens.push(Bracket::Close(open.pop().unwrap()));
        }
    }
    DyckString::new(tokens).expect("sampler emits well-nested strings")
}

/// Draws `count` strings. The length is uniform over the even values in
/// `[min_len, max_len]`; each step opens a bracket of uniform type with
/// probability `open_prob`, always opens at depth 0, never opens at
/// `max_depth`, and closes whenever the remaining budget equals the depth.
pub fn sample_dyck(spec: &DyckSpec, count: usize) -> Result<Vec<DyckString>, DyckError> {
    sample_dyck_shard(spec, 0, count)
}

/// Independent, reproducible shard `shard` of the stream seeded by `spec.seed`.
pub fn sample_dyck_shard(
    spec: &DyckSpec,
    shard: u64,
    count: usize,
) -> Result<Vec<DyckString>, DyckError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(shard);
    Ok((0..count).map(|_| sample_one(spec, &mut rng)).collect())
}

/// Gold binary tree over positions `0..n` (no ROOT).
///
/// A matched pair is the left-branching fold of `[open, children.., close]`;
/// top-level pairs are folded left-branching too.
pub fn dyck_gold_tree(s: &DyckString) -> BinaryTree {
    fn fold(items: Vec<BinaryTree>) -> BinaryTree {
        let mut it = items.into_iter();
        let mut acc = it.next().expect("non-empty");
        for t in it {
            acc = BinaryTree::node(acc, t);
        }
        acc
    }
    // stack of partially collected sibling lists; level 0 is the top level
    let mut levels: Vec<Vec<BinaryTree>> = vec![Vec::new()];
    for (i, b) in s.tokens.iter().enumerate() {
        if b.is_open() {
            levels.push(vec![BinaryTree::Leaf(i)]);
        } else {
            let mut items = levels.pop().expect("well nested");
            items.push(BinaryTree::Leaf(i));
            levels.last_mut().expect("well nested").push(fold(items));
        }
    }
    fold(levels.pop().expect("top level"))
}

/// Bracketed corpus line, e.g. `(X <0 (X <1 1>) 0>)`.
pub fn to_bracketed(s: &DyckString) -> String {
    let mut out = String::new();
    let pairs_at_top = s
        .depth
        .iter()
        .zip(&s.tokens)
        .filter(|(&d, b)| d == 1 && b.is_open())
        .count();
    let wrap = pairs_at_top > 1;
    if wrap {
        out.push_str("(X");
    }
    for b in &s.tokens {
        match b {
            Bracket::Open(_) => {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str("(X ");
                out.push_str(&b.token());
            }
            Bracket::Close(_) => {
                out.push(' ');
                out.push_str(&b.token());
                out.push(')');
            }
        }
    }
    if wrap {
        out.push(')');
    }
    out
}

/// Parses space separated bracket tokens.
pub fn parse_tokens(text: &str) -> Result<DyckString, DyckError> {
    let mut tokens = Vec::new();
    for (i, tok) in text.split_whitespace().enumerate() {
        let b = if let Some(t) = tok.strip_prefix('<') {
            t.parse().ok().map(Bracket::Open)
        } else if let Some(t) = tok.strip_suffix('>') {
            t.parse().ok().map(Bracket::Close)
        } else {
            None
        };
        tokens.push(b.ok_or(DyckError::IllNested(i))?);
    }
    DyckString::new(tokens)
}

pub fn dyck_corpus(num_types: usize, strings: &[DyckString]) -> Corpus {
    let mut c = Corpus::new(dyck_vocab(num_types));
    c.sequences = strings.iter().map(DyckString::to_sequence).collect();
    c
}

fn budget(count: usize) -> usize {
    count.saturating_mul(2000).max(10_000)
}

/// Strings whose maximum nesting depth lies in `depths`, drawn from
/// `train_spec` with the depth cap raised to the top of the range and
/// rejected until they are deep enough.
pub fn build_depth_gen_split(
    train_spec: &DyckSpec,
    depths: std::ops::RangeInclusive<usize>,
    count: usize,
    seed: u64,
) -> Result<Vec<DyckString>, DyckError> {
    let (lo, hi) = (*depths.start(), *depths.end());
    if lo == 0 || lo > hi {
        return Err(DyckError::InvalidSpec(format!(
            "bad depth range {lo}..={hi}"
        )));
    }
    let spec = DyckSpec {
        max_depth: hi,
        seed,
        ..train_spec.clone()
    };
    spec.validate()?;
    if spec.max_len < 2 * lo {
        return Err(DyckError::InvalidSpec(format!(
            "max_len {} cannot reach depth {lo}",
            spec.max_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..budget(count) {
        if out.len() == count {
            break;
        }
        let s = sample_one(&spec, &mut rng);
        if s.max_depth() >= lo {
            out.push(s);
        }
    }
    if out.len() < count {
        return Err(DyckError::Budget {
            achieved: out.len(),
            requested: count,
        });
    }
    Ok(out)
}

/// A string and one closing position whose bracket was opened far back.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LongRangeItem {
    pub target: usize,
    pub string: DyckString,
    pub open_pos: usize,
    pub close_pos: usize,
}

impl LongRangeItem {
    pub fn distance(&self) -> usize {
        self.close_pos - self.open_pos
    }

    /// Tokens before the closing bracket.
    pub fn prefix(&self) -> &[Bracket] {
        &self.string.tokens[..self.close_pos]
    }

    pub fn gold(&self) -> Bracket {
        self.string.tokens[self.close_pos]
    }
}

/// Slack added above each distance target: 10%, rounded up.
pub fn longrange_slack(target: usize) -> usize {
    target.div_ceil(10)
}

/// Length range used to mine items for target distance `target`: at least
/// `target + 2` tokens, up to half the target again above that (never below
/// the training maximum).
pub fn longrange_lengths(train_spec: &DyckSpec, target: usize) -> (usize, usize) {
    let min_len = (target + 2).max(train_spec.min_len);
    (min_len, train_spec.max_len.max(min_len + target / 2))
}

/// Longest string any long-range target can produce.
pub fn longrange_max_len(train_spec: &DyckSpec, targets: &[usize]) -> usize {
    targets
        .iter()
        .map(|&t| longrange_lengths(train_spec, t).1)
        .max()
        .unwrap_or(0)
}

/// For each target `D`, `count` items whose open–close distance lies in
/// `[D, D + slack(D)]`. Strings come from `train_spec` with the length range
/// from [`longrange_lengths`]; any string whose hash is in `exclude` is
/// skipped.
pub fn build_longrange_split(
    train_spec: &DyckSpec,
    targets: &[usize],
    count: usize,
    seed: u64,
    exclude: &HashSet<u64>,
) -> Result<Vec<LongRangeItem>, DyckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(targets.len() * count);
    for &target in targets {
        let (min_len, max_len) = longrange_lengths(train_spec, target);
        let spec = DyckSpec {
            min_len,
            max_len,
            seed,
            ..train_spec.clone()
        };
        spec.validate()?;
        let hi = target + longrange_slack(target);
        let mut seen = HashSet::new();
        let mut got = 0;
        for _ in 0..budget(count) {
            if got == count {
                break;
            }
            let s = sample_one(&spec, &mut rng);
            let h = s.hash64();
            if exclude.contains(&h) || !seen.insert(h) {
                continue;
            }
            let hits: Vec<usize> = (0..s.len())
                .filter(|&i| !s.tokens[i].is_open() && (target..=hi).contains(&(i - s.matching[i])))
                .collect();
            if hits.is_empty() {
                continue;
            }
            let close_pos = hits[rng.gen_range(0..hits.len())];
            out.push(LongRangeItem {
                target,
                open_pos: s.matching[close_pos],
                close_pos,
                string: s,
            });
            got += 1;
        }
        if got < count {
            return Err(DyckError::Budget {
                achieved: out.len(),
                requested: targets.len() * count,
            });
        }
    }
    Ok(out)
}

/// One line of a split manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: String,
    pub file: String,
    pub count: usize,
    pub seed: u64,
    pub spec: DyckSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depths: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<usize>>,
}
