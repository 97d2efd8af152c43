//! Bracketed constituency trees and the supervision derived from them.
//!
//! Text trees are parsed into [`ParseTree`], binarized left-branching into a
//! [`BinaryTree`] over token positions, given a ROOT leaf at position 0, and
//! turned into an attachment sequence with [`oracle_extract`].

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::stack::{self, AttachmentError, TapeMatrix};

pub const ROOT_TOKEN: &str = "<ROOT>";
pub const EOS_TOKEN: &str = "<EOS>";
pub const ROOT_ID: usize = 0;
pub const EOS_ID: usize = 1;

#[derive(Debug, Error)]
pub enum TreebankError {
    #[error("parse error at offset {offset}: {msg}")]
    Parse { offset: usize, msg: &'static str },
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: Box<TreebankError>,
    },
    #[error("line {line}: token {token:?} is not in the vocabulary")]
    UnknownToken { line: usize, token: String },
    #[error("invalid supervision: {0}")]
    Supervision(#[from] AttachmentError),
    #[error("corpus cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// An n-ary, optionally labeled constituency tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParseTree {
    Leaf(String),
    Node {
        label: Option<String>,
        children: Vec<ParseTree>,
    },
}

impl ParseTree {
    pub fn leaves(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            ParseTree::Leaf(t) => out.push(t),
            ParseTree::Node { children, .. } => children.iter().for_each(|c| c.collect_leaves(out)),
        }
    }
}

/// Prints in the same format [`parse_sexpr`] reads. An unlabeled node whose
/// first child is a leaf would re-parse with that leaf as its label.
impl fmt::Display for ParseTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseTree::Leaf(t) => f.write_str(t),
            ParseTree::Node { label, children } => {
                f.write_str("(")?;
                let mut first = true;
                if let Some(l) = label {
                    f.write_str(l)?;
                    first = false;
                }
                for c in children {
                    if !first {
                        f.write_str(" ")?;
                    }
                    first = false;
                    write!(f, "{c}")?;
                }
                f.write_str(")")
            }
        }
    }
}

fn is_atom_byte(b: u8) -> bool {
    !(b.is_ascii_whitespace() || b == b'(' || b == b')')
}

struct SexprParser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> SexprParser<'a> {
    fn skip_ws(&mut self) {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.as_bytes().get(self.pos).copied()
    }

    fn err(&self, msg: &'static str) -> TreebankError {
        TreebankError::Parse {
            offset: self.pos,
            msg,
        }
    }

    fn atom(&mut self) -> &'a str {
        let start = self.pos;
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && is_atom_byte(bytes[self.pos]) {
            self.pos += 1;
        }
        &self.src[start..self.pos]
    }

    // positioned on '('
    fn node(&mut self) -> Result<ParseTree, TreebankError> {
        let open = self.pos;
        self.pos += 1;
        self.skip_ws();
        let mut label = None;
        let mut children = Vec::new();
        match self.peek() {
            None => {
                return Err(TreebankError::Parse {
                    offset: open,
                    msg: "unclosed '('",
                })
            }
            Some(b')') => return Err(self.err("empty node")),
            Some(b'(') => {}
            Some(_) => {
                let a = self.atom();
                self.skip_ws();
                if self.peek() == Some(b')') {
                    return Err(self.err("node has a label but no children"));
                }
                label = Some(a.to_string());
            }
        }
        loop {
            self.skip_ws();
            match self.peek() {
                None => {
                    return Err(TreebankError::Parse {
                        offset: open,
                        msg: "unclosed '('",
                    })
                }
                Some(b')') => {
                    self.pos += 1;
                    return Ok(ParseTree::Node { label, children });
                }
                Some(b'(') => children.push(self.node()?),
                Some(_) => children.push(ParseTree::Leaf(self.atom().to_string())),
            }
        }
    }
}

/// Parses one bracketed tree such as `(S (NP The dog) (VP is happy))`.
///
/// A node is `(` optional-label children `)`. An atom right after `(` is the
/// label, so an unlabeled node must begin with a child node.
pub fn parse_sexpr(text: &str) -> Result<ParseTree, TreebankError> {
    let mut p = SexprParser { src: text, pos: 0 };
    p.skip_ws();
    let tree = match p.peek() {
        None => return Err(p.err("empty input")),
        Some(b'(') => p.node()?,
        Some(b')') => return Err(p.err("unbalanced ')'")),
        Some(_) => return Err(p.err("expected '('")),
    };
    p.skip_ws();
    match p.peek() {
        None => Ok(tree),
        Some(b')') => Err(p.err("unbalanced ')'")),
        Some(_) => Err(p.err("trailing input after tree")),
    }
}

/// Unlabeled binary tree over token positions.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum BinaryTree {
    Leaf(usize),
    Node(Box<BinaryTree>, Box<BinaryTree>),
}

impl BinaryTree {
    pub fn node(left: BinaryTree, right: BinaryTree) -> Self {
        BinaryTree::Node(Box::new(left), Box::new(right))
    }

    /// Leftmost and rightmost leaf index.
    pub fn span(&self) -> (usize, usize) {
        match self {
            BinaryTree::Leaf(i) => (*i, *i),
            BinaryTree::Node(l, r) => (l.span().0, r.span().1),
        }
    }

    pub fn num_leaves(&self) -> usize {
        match self {
            BinaryTree::Leaf(_) => 1,
            BinaryTree::Node(l, r) => l.num_leaves() + r.num_leaves(),
        }
    }

    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.walk_leaves(0, &mut |i, _| out.push(i));
        out
    }

    /// Depth of every leaf below this node, indexed by position in leaf order.
    pub fn leaf_depths(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.walk_leaves(0, &mut |_, d| out.push(d));
        out
    }

    fn walk_leaves(&self, depth: usize, f: &mut impl FnMut(usize, usize)) {
        match self {
            BinaryTree::Leaf(i) => f(*i, depth),
            BinaryTree::Node(l, r) => {
                l.walk_leaves(depth + 1, f);
                r.walk_leaves(depth + 1, f);
            }
        }
    }

    /// Spans `(start, end)` of every internal node, preorder.
    pub fn internal_spans(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        self.collect_spans(&mut out);
        out
    }

    fn collect_spans(&self, out: &mut Vec<(usize, usize)>) {
        if let BinaryTree::Node(l, r) = self {
            out.push(self.span());
            l.collect_spans(out);
            r.collect_spans(out);
        }
    }

    /// Same shape with every leaf index moved by `by`.
    pub fn shifted(&self, by: usize) -> BinaryTree {
        match self {
            BinaryTree::Leaf(i) => BinaryTree::Leaf(i + by),
            BinaryTree::Node(l, r) => BinaryTree::node(l.shifted(by), r.shifted(by)),
        }
    }

    /// Leaves are exactly `0..n` in order.
    pub fn is_well_indexed(&self) -> bool {
        self.leaves().into_iter().enumerate().all(|(i, l)| i == l)
    }

    /// Bracketed form with leaf indices, e.g. `((0 1) 2)`.
    pub fn to_bracketed(&self) -> String {
        self.render(&|i| i.to_string())
    }

    /// Bracketed form with tokens substituted for leaf indices.
    pub fn render(&self, leaf: &dyn Fn(usize) -> String) -> String {
        match self {
            BinaryTree::Leaf(i) => leaf(*i),
            BinaryTree::Node(l, r) => format!("({} {})", l.render(leaf), r.render(leaf)),
        }
    }

    /// Like [`render`](Self::render) but every node carries `label`, so the
    /// output reads back as a corpus line. A lone leaf is wrapped too.
    pub fn render_labeled(&self, label: &str, leaf: &dyn Fn(usize) -> String) -> String {
        match self {
            BinaryTree::Leaf(i) => format!("({label} {})", leaf(*i)),
            BinaryTree::Node(..) => self.render_nodes(label, leaf),
        }
    }

    fn render_nodes(&self, label: &str, leaf: &dyn Fn(usize) -> String) -> String {
        match self {
            BinaryTree::Leaf(i) => leaf(*i),
            BinaryTree::Node(l, r) => format!(
                "({label} {} {})",
                l.render_nodes(label, leaf),
                r.render_nodes(label, leaf)
            ),
        }
    }
}

/// Left-branching binarization: `(A B C)` becomes `((A B) C)`, unary chains
/// collapse, labels are dropped. Returns the tree over positions `0..n` and
/// the tokens in leaf order.
pub fn binarize(tree: &ParseTree) -> (BinaryTree, Vec<String>) {
    let mut tokens = Vec::new();
    let bt = binarize_into(tree, &mut tokens);
    (bt, tokens)
}

fn binarize_into(tree: &ParseTree, tokens: &mut Vec<String>) -> BinaryTree {
    match tree {
        ParseTree::Leaf(t) => {
            tokens.push(t.clone());
            BinaryTree::Leaf(tokens.len() - 1)
        }
        ParseTree::Node { children, .. } => {
            let mut it = children.iter();
            let first = it.next().expect("parsed nodes have children");
            let mut acc = binarize_into(first, tokens);
            for c in it {
                let rhs = binarize_into(c, tokens);
                acc = BinaryTree::node(acc, rhs);
            }
            acc
        }
    }
}

/// Prepends a ROOT leaf at position 0 and attaches the whole tree to it.
pub fn attach_root(tree: &BinaryTree) -> BinaryTree {
    BinaryTree::node(BinaryTree::Leaf(0), tree.shifted(1))
}

/// Gold attachment sequence for a well-indexed binary tree.
///
/// For position `k`, take the highest node whose rightmost leaf is `k`; `r[k]`
/// is the rightmost leaf of its left child, or `k` itself when that node is
/// the leaf.
pub fn oracle_extract(tree: &BinaryTree) -> Vec<usize> {
    let n = tree.num_leaves();
    let mut r = vec![usize::MAX; n];
    fn visit(t: &BinaryTree, r: &mut [usize]) {
        match t {
            BinaryTree::Leaf(i) => {
                if r[*i] == usize::MAX {
                    r[*i] = *i;
                }
            }
            BinaryTree::Node(left, right) => {
                let end = right.span().1;
                if r[end] == usize::MAX {
                    r[end] = left.span().1;
                }
                visit(left, r);
                visit(right, r);
            }
        }
    }
    visit(tree, &mut r);
    r
}

/// Row `k` is the stack tape after token `k` has been attached.
pub fn precompute_tape_matrix(n: usize, r: &[usize]) -> Result<TapeMatrix, AttachmentError> {
    if r.len() != n {
        return Err(AttachmentError::OutOfOrder {
            step: r.len().min(n),
            expected: n,
        });
    }
    stack::tape_matrix(r)
}

/// Every binary tree over leaves `0..n`, Catalan(n−1) of them.
pub fn enumerate_binary_trees(n: usize) -> Vec<BinaryTree> {
    fn over(lo: usize, hi: usize) -> Vec<BinaryTree> {
        if lo == hi {
            return vec![BinaryTree::Leaf(lo)];
        }
        let mut out = Vec::new();
        for split in lo..hi {
            let lefts = over(lo, split);
            let rights = over(split + 1, hi);
            for l in &lefts {
                for r in &rights {
                    out.push(BinaryTree::node(l.clone(), r.clone()));
                }
            }
        }
        out
    }
    if n == 0 {
        return Vec::new();
    }
    over(0, n - 1)
}

/// Random binary tree over `0..n` with a uniform split point at every node.
pub fn random_binary_tree<R: Rng + ?Sized>(n: usize, rng: &mut R) -> BinaryTree {
    fn build<R: Rng + ?Sized>(lo: usize, hi: usize, rng: &mut R) -> BinaryTree {
        if lo == hi {
            return BinaryTree::Leaf(lo);
        }
        let split = rng.gen_range(lo..hi);
        BinaryTree::node(build(lo, split, rng), build(split + 1, hi, rng))
    }
    assert!(n > 0, "tree needs at least one leaf");
    build(0, n - 1, rng)
}

/// String ↔ id table with `<ROOT>` = 0 and `<EOS>` = 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.insert(ROOT_TOKEN);
        v.insert(EOS_TOKEN);
        v
    }

    /// Builds a vocabulary from tokens in order, after the reserved two.
    pub fn from_tokens<S: AsRef<str>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut v = Self::new();
        for t in tokens {
            v.insert(t.as_ref());
        }
        v
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }
}

/// One training sequence: `ROOT w_1 .. w_m EOS` and its attachments.
///
/// `r` covers every position; ROOT and EOS are shifts and the last word
/// attaches into the ROOT constituent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sequence {
    pub ids: Vec<usize>,
    pub r: Vec<usize>,
}

impl Sequence {
    /// Builds a sequence from word ids and a well-indexed tree over them.
    pub fn from_tree(words: &[usize], tree: &BinaryTree) -> Self {
        assert_eq!(words.len(), tree.num_leaves());
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(ROOT_ID);
        ids.extend_from_slice(words);
        ids.push(EOS_ID);
        let mut r = oracle_extract(&attach_root(tree));
        r.push(words.len() + 1);
        Self { ids, r }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of words, excluding ROOT and EOS.
    pub fn num_words(&self) -> usize {
        self.ids.len().saturating_sub(2)
    }

    pub fn words(&self) -> &[usize] {
        &self.ids[1..self.ids.len() - 1]
    }

    pub fn tape_matrix(&self) -> Result<TapeMatrix, AttachmentError> {
        stack::tape_matrix(&self.r)
    }

    /// Gold tree over the words (ROOT and EOS removed, indices from 0).
    pub fn gold_tree(&self) -> Result<BinaryTree, AttachmentError> {
        let (_, tree) = stack::replay(&self.r[..self.r.len() - 1])?;
        match tree {
            BinaryTree::Node(_, words) => Ok(unshift(&words)),
            BinaryTree::Leaf(_) => Err(AttachmentError::Empty),
        }
    }
}

fn unshift(t: &BinaryTree) -> BinaryTree {
    match t {
        BinaryTree::Leaf(i) => BinaryTree::Leaf(i - 1),
        BinaryTree::Node(l, r) => BinaryTree::node(unshift(l), unshift(r)),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub sequences: Vec<Sequence>,
}

pub enum VocabPolicy {
    /// Grow the vocabulary from the data (starting from this one, if given).
    Build(Option<Vocab>),
    /// Tokens must already be present.
    Frozen(Vocab),
}

impl Corpus {
    pub fn new(vocab: Vocab) -> Self {
        Self {
            vocab,
            sequences: Vec::new(),
        }
    }

    /// Parses bracketed trees, one per non-empty line.
    pub fn from_text(text: &str, policy: VocabPolicy) -> Result<Self, TreebankError> {
        let (mut vocab, frozen) = match policy {
            VocabPolicy::Build(v) => (v.unwrap_or_default(), false),
            VocabPolicy::Frozen(v) => (v, true),
        };
        let mut sequences = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let tree = parse_sexpr(line).map_err(|e| TreebankError::Line {
                line: line_no,
                source: Box::new(e),
            })?;
            let (bt, tokens) = binarize(&tree);
            let mut words = Vec::with_capacity(tokens.len());
            for t in &tokens {
                let id = if frozen {
                    vocab.id(t).ok_or_else(|| TreebankError::UnknownToken {
                        line: line_no,
                        token: t.clone(),
                    })?
                } else {
                    vocab.insert(t)
                };
                words.push(id);
            }
            sequences.push(Sequence::from_tree(&words, &bt));
        }
        Ok(Self { vocab, sequences })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Largest tape depth over every prefix of every sequence.
    pub fn max_depth(&self) -> usize {
        self.sequences
            .iter()
            .filter_map(|s| s.tape_matrix().ok())
            .map(|m| m.max_depth())
            .max()
            .unwrap_or(0)
    }

    /// Bracketed text for one sequence's gold tree, using vocabulary tokens.
    pub fn bracketed(&self, idx: usize) -> Result<String, AttachmentError> {
        let seq = &self.sequences[idx];
        let tree = seq.gold_tree()?;
        let words = seq.words();
        Ok(tree.render(&|i| self.vocab.token(words[i]).to_string()))
    }
}

/// Reads a file with one bracketed tree per line.
pub fn load_corpus(path: impl AsRef<Path>, policy: VocabPolicy) -> Result<Corpus, TreebankError> {
    let text = fs::read_to_string(path)?;
    Corpus::from_text(&text, policy)
}

const CACHE_MAGIC: &[u8; 8] = b"PDCORPUS";
const CACHE_VERSION: u32 = 1;

/// Binary corpus cache, all integers little-endian `u32`:
///
/// ```text
/// "PDCORPUS" version
/// vocab_len { byte_len utf8_bytes }*
/// seq_count { len ids[len] r[len] }*
/// ```
pub fn encode_cache(corpus: &Corpus) -> Vec<u8> {
    let mut out = Vec::new();
    let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(CACHE_MAGIC);
    put(&mut out, CACHE_VERSION as usize);
    put(&mut out, corpus.vocab.len());
    for t in corpus.vocab.tokens() {
        put(&mut out, t.len());
        out.extend_from_slice(t.as_bytes());
    }
    put(&mut out, corpus.sequences.len());
    for s in &corpus.sequences {
        put(&mut out, s.len());
        for &id in &s.ids {
            put(&mut out, id);
        }
        for &r in &s.r {
            put(&mut out, r);
        }
    }
    out
}

pub fn decode_cache(bytes: &[u8]) -> Result<Corpus, TreebankError> {
    struct Reader<'a> {
        b: &'a [u8],
        pos: usize,
    }
    impl Reader<'_> {
        fn take(&mut self, n: usize) -> Result<&[u8], TreebankError> {
            let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len());
            let end =
                end.ok_or_else(|| TreebankError::Cache(format!("truncated at byte {}", self.pos)))?;
            let s = &self.b[self.pos..end];
            self.pos = end;
            Ok(s)
        }
        fn u32(&mut self) -> Result<usize, TreebankError> {
            let s = self.take(4)?;
            Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]) as usize)
        }
    }
    let mut rd = Reader { b: bytes, pos: 0 };
    if rd.take(8)? != CACHE_MAGIC {
        return Err(TreebankError::Cache("bad magic".into()));
    }
    let version = rd.u32()?;
    if version != CACHE_VERSION as usize {
        return Err(TreebankError::Cache(format!(
            "unsupported version {version}"
        )));
    }
    let nv = rd.u32()?;
    let mut tokens = Vec::with_capacity(nv);
    for _ in 0..nv {
        let len = rd.u32()?;
        let s =
            std::str::from_utf8(rd.take(len)?).map_err(|e| TreebankError::Cache(e.to_string()))?;
        tokens.push(s.to_string());
    }
    if tokens.len() < 2 || tokens[ROOT_ID] != ROOT_TOKEN || tokens[EOS_ID] != EOS_TOKEN {
        return Err(TreebankError::Cache("reserved tokens missing".into()));
    }
    let vocab = Vocab::from_tokens(tokens.iter().skip(2));
    if vocab.len() != tokens.len() {
        return Err(TreebankError::Cache("duplicate vocabulary entry".into()));
    }
    let ns = rd.u32()?;
    let mut sequences = Vec::with_capacity(ns);
    for _ in 0..ns {
        let len = rd.u32()?;
        let ids = (0..len).map(|_| rd.u32()).collect::<Result<Vec<_>, _>>()?;
        let r = (0..len).map(|_| rd.u32()).collect::<Result<Vec<_>, _>>()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab.len()) {
            return Err(TreebankError::Cache(format!("token id {bad} out of range")));
        }
        stack::tape_matrix(&r)?;
        sequences.push(Sequence { ids, r });
    }
    if rd.pos != bytes.len() {
        return Err(TreebankError::Cache("trailing bytes".into()));
    }
    Ok(Corpus { vocab, sequences })
}
