//! Candidate token trees for one verification pass.
//!
//! Nodes are stored in topological order (parent index < child index).
//! A node at depth 0 continues the committed context directly. Row `i` of the
//! tree mask allows exactly `i` and its ancestors.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::AttnMask;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeNode {
    pub token: u32,
    pub parent: Option<usize>,
    pub depth: usize,
    /// Cumulative log-probability along the root path.
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenTree {
    nodes: Vec<TreeNode>,
}

impl TokenTree {
    /// Validates ordering, depths and sibling uniqueness.
    pub fn new(nodes: Vec<TreeNode>) -> Result<Self> {
        for (i, n) in nodes.iter().enumerate() {
            match n.parent {
                None if n.depth != 0 => {
                    return Err(Error::InvalidTree(format!("node {i}: top-level depth must be 0")))
                }
                Some(p) if p >= i => {
                    return Err(Error::InvalidTree(format!("node {i}: parent {p} not earlier")))
                }
                Some(p) if nodes[p].depth + 1 != n.depth => {
                    return Err(Error::InvalidTree(format!("node {i}: depth mismatch")))
                }
                _ => {}
            }
            if nodes[..i]
                .iter()
                .any(|m| m.parent == n.parent && m.token == n.token)
            {
                return Err(Error::InvalidTree(format!(
                    "node {i}: duplicate sibling token {}",
                    n.token
                )));
            }
        }
        Ok(Self { nodes })
    }

    /// Prefix-merge the sequences into a trie. Duplicate sequences collapse.
    pub fn merge_sequences(seqs: &[Vec<u32>]) -> Result<Self> {
        let mut nodes: Vec<TreeNode> = Vec::new();
        for seq in seqs {
            if seq.is_empty() {
                return Err(Error::Empty("merge_sequences: empty sequence"));
            }
            let mut parent = None;
            for (depth, &tok) in seq.iter().enumerate() {
                let existing = nodes
                    .iter()
                    .position(|n| n.parent == parent && n.token == tok);
                parent = Some(match existing {
                    Some(i) => i,
                    None => {
                        nodes.push(TreeNode {
                            token: tok,
                            parent,
                            depth,
                            score: 0.0,
                        });
                        nodes.len() - 1
                    }
                });
            }
        }
        Ok(Self { nodes })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &TreeNode {
        &self.nodes[i]
    }

    pub fn tokens(&self) -> Vec<u32> {
        self.nodes.iter().map(|n| n.token).collect()
    }

    pub fn parents(&self) -> Vec<Option<usize>> {
        self.nodes.iter().map(|n| n.parent).collect()
    }

    /// Largest node depth (0-based); `None` for an empty tree.
    pub fn max_depth(&self) -> Option<usize> {
        self.nodes.iter().map(|n| n.depth).max()
    }

    pub fn children(&self, parent: Option<usize>) -> impl Iterator<Item = usize> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.parent == parent)
            .map(|(i, _)| i)
    }

    /// Node indices from the top level down to `node`, inclusive.
    pub fn root_path(&self, node: usize) -> Vec<usize> {
        let mut path = vec![node];
        let mut cur = self.nodes[node].parent;
        while let Some(p) = cur {
            path.push(p);
            cur = self.nodes[p].parent;
        }
        path.reverse();
        path
    }

    pub fn path_tokens(&self, node: usize) -> Vec<u32> {
        self.root_path(node)
            .into_iter()
            .map(|i| self.nodes[i].token)
            .collect()
    }

    /// Tree attention mask: `allowed(i, j)` iff `j` is `i` or an ancestor of `i`.
    pub fn build_mask(&self) -> Result<AttnMask> {
        let n = self.nodes.len();
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for j in self.root_path(i) {
                allowed[i * n + j] = true;
            }
        }
        AttnMask::new(n, n, allowed)
    }

    /// A new tree whose single top-level node is `token` and whose remaining
    /// nodes are this tree shifted one level down.
    pub fn with_root(&self, token: u32) -> Self {
        let mut nodes = Vec::with_capacity(self.nodes.len() + 1);
        nodes.push(TreeNode {
            token,
            parent: None,
            depth: 0,
            score: 0.0,
        });
        for n in &self.nodes {
            nodes.push(TreeNode {
                token: n.token,
                parent: Some(n.parent.map_or(0, |p| p + 1)),
                depth: n.depth + 1,
                score: n.score,
            });
        }
        Self { nodes }
    }

    /// One line per node: `idx parent depth token score`, parent `-1` at the top level.
    pub fn to_debug_text(&self) -> String {
        let mut s = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let parent = n.parent.map_or(-1, |p| p as i64);
            writeln!(s, "{i} {parent} {} {} {:.6}", n.depth, n.token, n.score).unwrap();
        }
        s
    }

    pub fn from_debug_text(text: &str) -> Result<Self> {
        let mut nodes = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::InvalidTree(format!("line {}: {line:?}", lineno + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 || f[0].parse::<usize>().ok() != Some(nodes.len()) {
                return Err(bad());
            }
            let parent: i64 = f[1].parse().map_err(|_| bad())?;
            nodes.push(TreeNode {
                parent: if parent < 0 { None } else { Some(parent as usize) },
                depth: f[2].parse().map_err(|_| bad())?,
                token: f[3].parse().map_err(|_| bad())?,
                score: f[4].parse().map_err(|_| bad())?,
            });
        }
        Self::new(nodes)
    }
}

/// One candidate continuation from a draft head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub token: u32,
    pub logprob: f32,
}

/// Per-head top-k candidates, sorted by log-probability descending.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CandidateGrid {
    heads: Vec<Vec<Candidate>>,
}

impl CandidateGrid {
    pub fn new(heads: Vec<Vec<Candidate>>) -> Result<Self> {
        for (h, cands) in heads.iter().enumerate() {
            if cands.windows(2).any(|w| w[0].logprob < w[1].logprob) {
                return Err(Error::InvalidConfig(format!(
                    "grid head {h}: log-probs not sorted descending"
                )));
            }
        }
        Ok(Self { heads })
    }

    pub fn heads(&self) -> &[Vec<Candidate>] {
        &self.heads
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.iter().all(|h| h.is_empty())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TreeMode {
    /// Every head's candidates combine with every parent (fixed distributions).
    #[default]
    IndependentCartesian,
    /// Each head's candidates are conditioned on the parent path.
    RegressivePaths,
}

/// Source of candidate continuations for tree construction.
pub trait CandidateExpander {
    /// Candidates following `path` (tokens from depth 0 down to the parent;
    /// empty for the first speculated position), best first. An empty result
    /// stops expansion below that node.
    fn expand(&mut self, path: &[u32]) -> Result<Vec<Candidate>>;
}

/// Fixed per-depth grid (cartesian semantics).
pub struct GridExpander<'a>(pub &'a CandidateGrid);

impl CandidateExpander for GridExpander<'_> {
    fn expand(&mut self, path: &[u32]) -> Result<Vec<Candidate>> {
        Ok(self.0.heads.get(path.len()).cloned().unwrap_or_default())
    }
}

/// Grid recorded along the greedy top-1 chain: head `h` is conditioned on the
/// chain's top-1 tokens, so only chain nodes have children.
pub struct ChainGridExpander<'a>(pub &'a CandidateGrid);

impl CandidateExpander for ChainGridExpander<'_> {
    fn expand(&mut self, path: &[u32]) -> Result<Vec<Candidate>> {
        let on_chain = path
            .iter()
            .enumerate()
            .all(|(d, &t)| self.0.heads[d].first().map(|c| c.token) == Some(t));
        if !on_chain {
            return Ok(Vec::new());
        }
        Ok(self.0.heads.get(path.len()).cloned().unwrap_or_default())
    }
}

#[derive(Debug, Clone, Copy)]
struct Frontier {
    score: f32,
    depth: usize,
    token: u32,
    parent: Option<usize>,
}

impl PartialEq for Frontier {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Frontier {}
impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Frontier {
    // max-heap: higher score first, then shallower, smaller token, earlier parent
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then(other.depth.cmp(&self.depth))
            .then(other.token.cmp(&self.token))
            .then(other.parent.cmp(&self.parent))
    }
}

/// Best-first selection of up to `budget` nodes by cumulative log-probability.
/// A node becomes eligible once its parent is selected.
pub fn build_tree(expander: &mut dyn CandidateExpander, budget: usize) -> Result<TokenTree> {
    if budget == 0 {
        return Err(Error::InvalidConfig("tree budget must be >= 1".into()));
    }
    let mut nodes: Vec<TreeNode> = Vec::with_capacity(budget);
    let mut heap = BinaryHeap::new();
    push_children(&mut heap, expander.expand(&[])?, None, 0, 0.0);
    while nodes.len() < budget {
        let Some(f) = heap.pop() else { break };
        nodes.push(TreeNode {
            token: f.token,
            parent: f.parent,
            depth: f.depth,
            score: f.score,
        });
        let idx = nodes.len() - 1;
        if nodes.len() < budget {
            let path: Vec<u32> = {
                let tree = TokenTree { nodes };
                let p = tree.path_tokens(idx);
                nodes = tree.nodes;
                p
            };
            push_children(&mut heap, expander.expand(&path)?, Some(idx), f.depth + 1, f.score);
        }
    }
    TokenTree::new(nodes)
}

fn push_children(
    heap: &mut BinaryHeap<Frontier>,
    cands: Vec<Candidate>,
    parent: Option<usize>,
    depth: usize,
    base: f32,
) {
    let mut seen = Vec::with_capacity(cands.len());
    for c in cands {
        if seen.contains(&c.token) {
            continue;
        }
        seen.push(c.token);
        heap.push(Frontier {
            score: base + c.logprob,
            depth,
            token: c.token,
            parent,
        });
    }
}

/// Build a tree from a static grid. In regressive mode the grid is read as
/// recorded along the greedy chain.
pub fn build_tree_from_grid(grid: &CandidateGrid, budget: usize, mode: TreeMode) -> Result<TokenTree> {
    if grid.is_empty() {
        return Err(Error::Empty("candidate grid is empty"));
    }
    match mode {
        TreeMode::IndependentCartesian => build_tree(&mut GridExpander(grid), budget),
        TreeMode::RegressivePaths => build_tree(&mut ChainGridExpander(grid), budget),
    }
}

/// Longest root path whose tokens the target model agrees with.
///
/// `context_verdict` is the target's greedy token after the committed context;
/// `verdicts[i]` is its greedy token after node `i`.
pub fn longest_accepted_path(tree: &TokenTree, context_verdict: u32, verdicts: &[u32]) -> Vec<usize> {
    let mut path = Vec::new();
    let mut parent = None;
    let mut expected = context_verdict;
    loop {
        let next = tree
            .children(parent)
            .find(|&c| tree.nodes[c].token == expected);
        match next {
            Some(c) => {
                path.push(c);
                expected = verdicts[c];
                parent = Some(c);
            }
            None => return path,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cand(token: u32, p: f32) -> Candidate {
        Candidate {
            token,
            logprob: p.ln(),
        }
    }

    fn check_invariants(t: &TokenTree) {
        TokenTree::new(t.nodes().to_vec()).expect("invariants");
        let mask = t.build_mask().unwrap();
        for i in 0..t.len() {
            let anc = t.root_path(i);
            for j in 0..t.len() {
                assert_eq!(mask.allowed(i, j), anc.contains(&j));
            }
        }
    }

    #[test]
    fn merge_chain_and_shared_prefix() {
        let t = TokenTree::merge_sequences(&[vec![1, 2, 3]]).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.parents(), vec![None, Some(0), Some(1)]);
        let t = TokenTree::merge_sequences(&[vec![1, 2], vec![1, 3]]).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.children(Some(0)).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn merge_matches_trie_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let seqs: Vec<Vec<u32>> = (0..10)
                .map(|_| {
                    let len = rng.random_range(1..=4);
                    (0..len).map(|_| rng.random_range(0..3)).collect()
                })
                .collect();
            // trie size = number of distinct non-empty prefixes
            let mut prefixes = std::collections::BTreeSet::new();
            for s in &seqs {
                for l in 1..=s.len() {
                    prefixes.insert(s[..l].to_vec());
                }
            }
            let t = TokenTree::merge_sequences(&seqs).unwrap();
            assert_eq!(t.len(), prefixes.len());
            check_invariants(&t);
            let mut leaves: Vec<Vec<u32>> = (0..t.len())
                .filter(|&i| t.children(Some(i)).next().is_none())
                .map(|i| t.path_tokens(i))
                .collect();
            leaves.sort();
            // every leaf is an input sequence and every input is a root path
            for l in &leaves {
                assert!(seqs.contains(l));
            }
            for s in &seqs {
                assert!(prefixes.contains(s));
            }
        }
    }

    #[test]
    fn mask_shapes() {
        let chain = TokenTree::merge_sequences(&[vec![4, 5, 6]]).unwrap();
        assert_eq!(chain.build_mask().unwrap(), AttnMask::causal(3));
        let star = TokenTree::merge_sequences(&[vec![1], vec![2], vec![3]]).unwrap();
        let m = star.build_mask().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.allowed(i, j), i == j);
            }
        }
    }

    #[test]
    fn budget_one_is_head_zero_top1() {
        let grid = CandidateGrid::new(vec![
            vec![cand(7, 0.6), cand(2, 0.3)],
            vec![cand(1, 0.9)],
        ])
        .unwrap();
        for mode in [TreeMode::IndependentCartesian, TreeMode::RegressivePaths] {
            let t = build_tree_from_grid(&grid, 1, mode).unwrap();
            assert_eq!(t.tokens(), vec![7]);
        }
    }

    #[test]
    fn deep_continuation_beats_weak_sibling() {
        // log 0.9 + log 0.8 > log 0.05, so the depth-1 child comes before token 2
        let grid = CandidateGrid::new(vec![
            vec![cand(1, 0.9), cand(2, 0.05), cand(3, 0.03)],
            vec![cand(5, 0.8), cand(6, 0.1)],
        ])
        .unwrap();
        let t = build_tree_from_grid(&grid, 4, TreeMode::IndependentCartesian).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(
            t.nodes().iter().map(|n| (n.token, n.depth)).collect::<Vec<_>>(),
            vec![(1, 0), (5, 1), (6, 1), (2, 0)]
        );
    }

    #[test]
    fn saturation_gives_full_trie() {
        let grid = CandidateGrid::new(vec![
            vec![cand(1, 0.5), cand(2, 0.4)],
            vec![cand(3, 0.7), cand(4, 0.2)],
            vec![cand(5, 0.6), cand(6, 0.3)],
        ])
        .unwrap();
        let t = build_tree_from_grid(&grid, 100, TreeMode::IndependentCartesian).unwrap();
        assert_eq!(t.len(), 2 + 4 + 8);
        check_invariants(&t);
        let t = build_tree_from_grid(&grid, 100, TreeMode::RegressivePaths).unwrap();
        assert_eq!(t.len(), 6);
        assert!(build_tree_from_grid(&CandidateGrid::default(), 1, TreeMode::RegressivePaths).is_err());
    }

    fn random_grid(rng: &mut ChaCha8Rng, heads: usize, k: usize, vocab: u32) -> CandidateGrid {
        let heads = (0..heads)
            .map(|_| {
                let mut toks: Vec<u32> = (0..vocab).collect();
                let mut out = Vec::new();
                let mut lps: Vec<f32> = (0..k).map(|_| -rng.random_range(0.0f32..6.0)).collect();
                lps.sort_by(|a, b| b.total_cmp(a));
                for lp in lps {
                    let t = toks.remove(rng.random_range(0..toks.len()));
                    out.push(Candidate { token: t, logprob: lp });
                }
                out
            })
            .collect();
        CandidateGrid::new(heads).unwrap()
    }

    // All nodes of the full cartesian trie as (parent index, cumulative score).
    fn full_trie(grid: &CandidateGrid) -> Vec<(Option<usize>, f32)> {
        let mut nodes: Vec<(Option<usize>, f32, usize)> = Vec::new();
        let mut frontier: Vec<Option<usize>> = vec![None];
        for d in 0..grid.n_heads() {
            let mut next = Vec::new();
            for &p in &frontier {
                let base = p.map_or(0.0, |i| nodes[i].1);
                for c in &grid.heads()[d] {
                    nodes.push((p, base + c.logprob, d));
                    next.push(Some(nodes.len() - 1));
                }
            }
            frontier = next;
        }
        nodes.into_iter().map(|(p, s, _)| (p, s)).collect()
    }

    #[test]
    fn greedy_matches_exhaustive_small_trees() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..40 {
            let grid = random_grid(&mut rng, 3, 2, 6);
            let trie = full_trie(&grid);
            let n = trie.len();
            for budget in 1..=4 {
                // exhaustive: every downward-closed subset of exactly `budget` nodes
                let mut best = f32::NEG_INFINITY;
                for mask in 0u32..(1 << n) {
                    if mask.count_ones() as usize != budget {
                        continue;
                    }
                    let closed = (0..n).all(|i| {
                        mask & (1 << i) == 0 || trie[i].0.is_none_or(|p| mask & (1 << p) != 0)
                    });
                    if closed {
                        let total: f32 = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| trie[i].1).sum();
                        best = best.max(total);
                    }
                }
                let t = build_tree_from_grid(&grid, budget, TreeMode::IndependentCartesian).unwrap();
                let got: f32 = t.nodes().iter().map(|n| n.score).sum();
                assert_eq!(t.len(), budget);
                assert!((got - best).abs() < 1e-4, "budget {budget}: {got} vs {best}");
            }
        }
    }

    #[test]
    fn fuzz_invariants_and_nesting() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for i in 0..10_000 {
            let heads = rng.random_range(1..=4);
            let k = rng.random_range(1..=4);
            let grid = random_grid(&mut rng, heads, k, 8);
            let budget = rng.random_range(1..=12);
            let mode = if i % 2 == 0 {
                TreeMode::IndependentCartesian
            } else {
                TreeMode::RegressivePaths
            };
            let t = build_tree_from_grid(&grid, budget, mode).unwrap();
            check_invariants(&t);
            let bigger = build_tree_from_grid(&grid, budget + 1, mode).unwrap();
            assert_eq!(&bigger.nodes()[..t.len()], t.nodes());
        }
    }

    #[test]
    fn accepted_path_cases() {
        let chain = TokenTree::merge_sequences(&[vec![1, 2, 3]]).unwrap();
        assert_eq!(longest_accepted_path(&chain, 1, &[2, 3, 9]), vec![0, 1, 2]);
        assert_eq!(longest_accepted_path(&chain, 4, &[2, 3, 9]), Vec::<usize>::new());
        let t = TokenTree::merge_sequences(&[vec![1, 2], vec![1, 3, 4]]).unwrap();
        assert_eq!(longest_accepted_path(&t, 1, &[3, 0, 4, 0]), vec![0, 2, 3]);
    }

    #[test]
    fn accepted_path_matches_all_paths_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let seqs: Vec<Vec<u32>> = (0..6)
                .map(|_| {
                    let len = rng.random_range(1..=4);
                    (0..len).map(|_| rng.random_range(0..3)).collect()
                })
                .collect();
            let t = TokenTree::merge_sequences(&seqs).unwrap();
            let ctx = rng.random_range(0..3);
            let verdicts: Vec<u32> = (0..t.len()).map(|_| rng.random_range(0..3)).collect();
            let mut best: Vec<usize> = Vec::new();
            for node in 0..t.len() {
                let path = t.root_path(node);
                let ok = path.iter().enumerate().all(|(d, &n)| {
                    let want = if d == 0 { ctx } else { verdicts[path[d - 1]] };
                    t.node(n).token == want
                });
                if ok && path.len() > best.len() {
                    best = path;
                }
            }
            let got = longest_accepted_path(&t, ctx, &verdicts);
            assert_eq!(got, best);
            assert!(got.len() <= t.max_depth().unwrap() + 1);
        }
    }

    #[test]
    fn with_root_shifts_levels() {
        let t = TokenTree::merge_sequences(&[vec![1, 2], vec![3]]).unwrap();
        let r = t.with_root(9);
        assert_eq!(r.tokens(), vec![9, 1, 2, 3]);
        assert_eq!(r.parents(), vec![None, Some(0), Some(1), Some(0)]);
        check_invariants(&r);
    }

    #[test]
    fn debug_text_golden() {
        let grid = CandidateGrid::new(vec![
            vec![cand(10, 0.5), cand(11, 0.25)],
            vec![cand(20, 0.5)],
        ])
        .unwrap();
        let t = build_tree_from_grid(&grid, 3, TreeMode::IndependentCartesian).unwrap();
        let text = t.to_debug_text();
        assert_eq!(
            text,
            "0 -1 0 10 -0.693147\n1 -1 0 11 -1.386294\n2 0 1 20 -1.386294\n"
        );
        let back = TokenTree::from_debug_text(&text).unwrap();
        assert_eq!(back.tokens(), t.tokens());
        assert_eq!(back.parents(), t.parents());
        assert!(TokenTree::from_debug_text("0 3 0 1 0.0").is_err());
    }

    #[test]
    fn single_sequence_mask_is_lower_triangular() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let len = rng.random_range(1..10);
            let s: Vec<u32> = (0..len).map(|_| rng.random_range(0..50)).collect();
            let t = TokenTree::merge_sequences(&[s]).unwrap();
            assert_eq!(t.build_mask().unwrap(), AttnMask::causal(len));
        }
    }
}
