//! Pushdown state: the constituent stack and the stack tape it summarises.
//!
//! [`StackState::update`] is the only mutation path. It implements the stack
//! tape update: a shift pushes a singleton constituent at depth 0; a reduce
//! pops constituents into the growing one, bumping the depth of every token
//! in it once per pop, until the popped constituent's rightmost token is the
//! attachment target.

use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::treebank::BinaryTree;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AttachmentError {
    #[error("step {step}: token {target} is not the rightmost token of a stack constituent")]
    InvalidTarget { step: usize, target: usize },
    #[error("step {step}: expected next token index {expected}")]
    OutOfOrder { step: usize, expected: usize },
    #[error("replay left {height} constituents on the stack")]
    Incomplete { height: usize },
    #[error("empty attachment sequence")]
    Empty,
}

/// Contiguous token span `[start, end]` on the stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Stack tape plus the constituent stack, after `tape.len()` tokens.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct StackState {
    tape: Vec<usize>,
    stack: Vec<Span>,
}

impl StackState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a state directly; spans must partition `0..tape.len()` in order.
    pub fn from_parts(tape: Vec<usize>, stack: Vec<Span>) -> Option<Self> {
        let mut next = 0;
        for s in &stack {
            if s.start != next || s.end < s.start {
                return None;
            }
            next = s.end + 1;
        }
        (next == tape.len()).then_some(Self { tape, stack })
    }

    /// Depth per token seen so far.
    pub fn tape(&self) -> &[usize] {
        &self.tape
    }

    pub fn stack(&self) -> &[Span] {
        &self.stack
    }

    /// Index of the next token to be attached.
    pub fn next_index(&self) -> usize {
        self.tape.len()
    }

    pub fn height(&self) -> usize {
        self.stack.len()
    }

    /// Whether `target` is a legal attachment for the next token.
    pub fn is_candidate(&self, target: usize) -> bool {
        target == self.next_index() || self.stack.iter().any(|s| s.end == target)
    }

    /// Attach token `k` to `r`; returns the new state and leaves `self` intact.
    pub fn update(&self, k: usize, r: usize) -> Result<StackState, AttachmentError> {
        let mut next = self.clone();
        next.apply(k, r)?;
        Ok(next)
    }

    /// In-place form of [`StackState::update`].
    pub fn apply(&mut self, k: usize, r: usize) -> Result<(), AttachmentError> {
        self.apply_traced(k, r, |_| {})
    }

    /// Like [`StackState::apply`], calling `on_merge(popped)` for each pop.
    fn apply_traced(
        &mut self,
        k: usize,
        r: usize,
        mut on_merge: impl FnMut(Span),
    ) -> Result<(), AttachmentError> {
        if k != self.tape.len() {
            return Err(AttachmentError::OutOfOrder {
                step: k,
                expected: self.tape.len(),
            });
        }
        if !self.is_candidate(r) {
            return Err(AttachmentError::InvalidTarget { step: k, target: r });
        }
        self.tape.push(0);
        let mut merged = Span { start: k, end: k };
        if r == k {
            self.stack.push(merged);
            return Ok(());
        }
        loop {
            let top = self
                .stack
                .pop()
                .expect("candidate check guarantees a match");
            merged.start = top.start;
            for d in &mut self.tape[merged.start..=merged.end] {
                *d += 1;
            }
            on_merge(top);
            if top.end == r {
                break;
            }
        }
        self.stack.push(merged);
        Ok(())
    }

    /// True at each constituent's rightmost token and at the shift slot `k`.
    pub fn candidate_mask(&self) -> Vec<bool> {
        let k = self.next_index();
        let mut mask = vec![false; k + 1];
        for s in &self.stack {
            mask[s.end] = true;
        }
        mask[k] = true;
        mask
    }

    /// Candidate indices in ascending order (stack rightmost tokens, then
    /// the shift slot).
    pub fn candidates(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.stack.iter().map(|s| s.end).collect();
        c.push(self.next_index());
        c
    }

    /// Debug line: `k r_k tape=[...] stack=[[..],[..]]`.
    pub fn dump_line(&self, k: usize, r: usize) -> String {
        format!("{k} {r} tape={:?} stack={}", self.tape, self)
    }
}

impl fmt::Display for StackState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_char('[')?;
        for (i, s) in self.stack.iter().enumerate() {
            if i > 0 {
                f.write_char(',')?;
            }
            f.write_char('[')?;
            for t in s.start..=s.end {
                if t > s.start {
                    f.write_char(',')?;
                }
                write!(f, "{t}")?;
            }
            f.write_char(']')?;
        }
        f.write_char(']')
    }
}

/// Replays a full attachment sequence and returns the final state and the
/// stack's trees, bottom first.
pub fn replay_forest(r: &[usize]) -> Result<(StackState, Vec<BinaryTree>), AttachmentError> {
    let mut state = StackState::new();
    let mut trees: Vec<BinaryTree> = Vec::new();
    for (k, &rk) in r.iter().enumerate() {
        let mut acc = BinaryTree::Leaf(k);
        let mut pops = 0;
        state.apply_traced(k, rk, |_| pops += 1)?;
        for _ in 0..pops {
            let popped = trees.pop().expect("tree stack mirrors constituent stack");
            acc = BinaryTree::node(popped, acc);
        }
        trees.push(acc);
    }
    Ok((state, trees))
}

/// Replays an attachment sequence that reduces to a single tree.
pub fn replay(r: &[usize]) -> Result<(StackState, BinaryTree), AttachmentError> {
    if r.is_empty() {
        return Err(AttachmentError::Empty);
    }
    let (state, mut trees) = replay_forest(r)?;
    if trees.len() != 1 {
        return Err(AttachmentError::Incomplete {
            height: trees.len(),
        });
    }
    Ok((state, trees.pop().unwrap()))
}

/// Per-step debug dump of a replay, one [`StackState::dump_line`] per token.
pub fn dump_replay(r: &[usize]) -> Result<String, AttachmentError> {
    let mut state = StackState::new();
    let mut out = String::new();
    for (k, &rk) in r.iter().enumerate() {
        state.apply(k, rk)?;
        out.push_str(&state.dump_line(k, rk));
        out.push('\n');
    }
    Ok(out)
}

/// Lower-triangular depth matrix: row `k` is the tape after token `k` has
/// been attached. Entries above the diagonal are 0 and carry no meaning.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TapeMatrix {
    n: usize,
    data: Vec<usize>,
}

impl TapeMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0; n * n],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, k: usize, j: usize) -> usize {
        self.data[k * self.n + j]
    }

    pub fn set(&mut self, k: usize, j: usize, v: usize) {
        self.data[k * self.n + j] = v;
    }

    /// Full row `k` (length `n`, zero past the diagonal).
    pub fn row(&self, k: usize) -> &[usize] {
        &self.data[k * self.n..(k + 1) * self.n]
    }

    /// Row `k` restricted to tokens `0..=k`.
    pub fn prefix_row(&self, k: usize) -> &[usize] {
        &self.data[k * self.n..k * self.n + k + 1]
    }

    pub fn max_depth(&self) -> usize {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.data
    }
}

/// Stack-tape rows for every prefix of the attachment sequence `r`.
pub fn tape_matrix(r: &[usize]) -> Result<TapeMatrix, AttachmentError> {
    let n = r.len();
    let mut m = TapeMatrix::zeros(n);
    let mut state = StackState::new();
    for (k, &rk) in r.iter().enumerate() {
        state.apply(k, rk)?;
        m.data[k * n..k * n + k + 1].copy_from_slice(state.tape());
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_example_reduce() {
        // [The dog] is + happy -> dog
        let state = StackState::from_parts(
            vec![1, 1, 0],
            vec![Span { start: 0, end: 1 }, Span { start: 2, end: 2 }],
        )
        .unwrap();
        let next = state.update(3, 1).unwrap();
        assert_eq!(next.tape(), &[2, 2, 2, 2]);
        assert_eq!(next.stack(), &[Span { start: 0, end: 3 }]);
        // the input state is untouched
        assert_eq!(state.tape(), &[1, 1, 0]);
    }

    #[test]
    fn shift_extends_with_zero() {
        let state = StackState::from_parts(vec![1, 1], vec![Span { start: 0, end: 1 }]).unwrap();
        let next = state.update(2, 2).unwrap();
        assert_eq!(next.tape(), &[1, 1, 0]);
        assert_eq!(next.height(), 2);
    }

    #[test]
    fn reduce_across_two_constituents() {
        let state = StackState::from_parts(
            vec![0, 0],
            vec![Span { start: 0, end: 0 }, Span { start: 1, end: 1 }],
        )
        .unwrap();
        let next = state.update(2, 0).unwrap();
        assert_eq!(next.tape(), &[1, 2, 2]);
        let (_, tree) = replay(&[0, 1, 0]).unwrap();
        assert_eq!(
            tree,
            BinaryTree::node(
                BinaryTree::Leaf(0),
                BinaryTree::node(BinaryTree::Leaf(1), BinaryTree::Leaf(2))
            )
        );
        assert_eq!(tree.leaf_depths(), vec![1, 2, 2]);
    }

    #[test]
    fn invalid_target_is_rejected() {
        let state = StackState::from_parts(
            vec![1, 1, 0],
            vec![Span { start: 0, end: 1 }, Span { start: 2, end: 2 }],
        )
        .unwrap();
        assert_eq!(
            state.update(3, 0),
            Err(AttachmentError::InvalidTarget { step: 3, target: 0 })
        );
        assert_eq!(
            state.update(4, 4),
            Err(AttachmentError::OutOfOrder {
                step: 4,
                expected: 3
            })
        );
    }

    #[test]
    fn candidate_masks() {
        let all_single = StackState::from_parts(
            vec![0, 0, 0],
            (0..3).map(|i| Span { start: i, end: i }).collect(),
        )
        .unwrap();
        assert_eq!(all_single.candidate_mask(), vec![true; 4]);
        let s = StackState::from_parts(
            vec![1, 1, 0],
            vec![Span { start: 0, end: 1 }, Span { start: 2, end: 2 }],
        )
        .unwrap();
        assert_eq!(s.candidate_mask(), vec![false, true, true, true]);
        assert_eq!(s.candidates(), vec![1, 2, 3]);
    }

    #[test]
    fn dump_format() {
        let dump = dump_replay(&[0, 1, 2, 1]).unwrap();
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines[0], "0 0 tape=[0] stack=[[0]]");
        assert_eq!(lines[1], "1 1 tape=[0, 0] stack=[[0],[1]]");
        assert_eq!(lines[3], "3 1 tape=[0, 1, 2, 2] stack=[[0],[1,2,3]]");
    }

    #[test]
    fn incomplete_replay_is_reported() {
        assert_eq!(
            replay(&[0, 1]).unwrap_err(),
            AttachmentError::Incomplete { height: 2 }
        );
        assert_eq!(replay(&[]).unwrap_err(), AttachmentError::Empty);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        proptest! {
            #[test]
            fn random_walks_keep_invariants(n in 1usize..24, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut state = StackState::new();
                let mut r = Vec::new();
                for k in 0..n {
                    let mask = state.candidate_mask();
                    prop_assert_eq!(mask.iter().filter(|&&b| b).count(), state.height() + 1);
                    let c = state.candidates();
                    let pick = c[rng.gen_range(0..c.len())];
                    state = state.update(k, pick).unwrap();
                    r.push(pick);
                    prop_assert_eq!(state.tape().len(), k + 1);
                    prop_assert!(StackState::from_parts(state.tape().to_vec(), state.stack().to_vec()).is_some());
                    for s in state.stack() {
                        if s.len() == 1 {
                            prop_assert_eq!(state.tape()[s.start], 0);
                        } else {
                            prop_assert!(state.tape()[s.start..=s.end].iter().all(|&d| d >= 1));
                        }
                    }
                }
                let (final_state, trees) = replay_forest(&r).unwrap();
                prop_assert_eq!(&final_state, &state);
                prop_assert_eq!(trees.len(), state.height());
                for (t, s) in trees.iter().zip(state.stack()) {
                    prop_assert_eq!(t.span(), (s.start, s.end));
                    let depths = t.leaf_depths();
                    prop_assert_eq!(depths.as_slice(), &state.tape()[s.start..=s.end]);
                }
            }

            #[test]
            fn gold_attachments_fall_in_mask(n in 1usize..16, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let t = crate::treebank::attach_root(&crate::treebank::random_binary_tree(n, &mut rng));
                let r = crate::treebank::oracle_extract(&t);
                let mut state = StackState::new();
                for (k, &rk) in r.iter().enumerate() {
                    prop_assert!(state.candidate_mask()[rk]);
                    state.apply(k, rk).unwrap();
                }
                prop_assert_eq!(state.stack(), &[Span { start: 0, end: n }]);
            }
        }
    }
}
