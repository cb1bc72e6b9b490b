//! Turning a function into an ordered instruction list: linear address
//! order, or a walk over the basic-block graph.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Cfg, NormalizedFunction};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Serialization {
    Linear,
    RandomWalk { seed: u64 },
    LongestWalk,
}

impl Serialization {
    pub fn apply(&self, f: &NormalizedFunction) -> Result<Vec<String>> {
        match *self {
            Serialization::Linear => Ok(serialize_linear(f)),
            Serialization::RandomWalk { seed } => serialize_random_walk(f, seed),
            Serialization::LongestWalk => serialize_longest_walk(f),
        }
    }
}

pub fn serialize_linear(f: &NormalizedFunction) -> Vec<String> {
    f.instructions.iter().map(|i| i.text.clone()).collect()
}

fn require_cfg(f: &NormalizedFunction) -> Result<&Cfg> {
    f.cfg.as_ref().ok_or_else(|| {
        Error::Config(format!(
            "{}: walk serialization needs a CFG but the record has none",
            f.meta.name
        ))
    })
}

/// Concatenated instruction texts of a block path.
pub fn path_instructions(f: &NormalizedFunction, cfg: &Cfg, path: &[usize]) -> Vec<String> {
    path.iter()
        .flat_map(|&b| {
            let (s, e) = cfg.blocks[b];
            f.instructions[s..e].iter().map(|i| i.text.clone())
        })
        .collect()
}

/// Block path of a uniformly random walk from the entry block that never
/// revisits a block and stops when no unvisited successor remains.
pub fn random_walk_blocks(cfg: &Cfg, seed: u64) -> Vec<usize> {
    let succ = cfg.successors();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut visited = vec![false; cfg.blocks.len()];
    let mut cur = cfg.entry();
    let mut path = vec![cur];
    visited[cur] = true;
    loop {
        let open: Vec<usize> = succ[cur].iter().copied().filter(|&b| !visited[b]).collect();
        if open.is_empty() {
            return path;
        }
        cur = open[rng.random_range(0..open.len())];
        visited[cur] = true;
        path.push(cur);
    }
}

pub fn serialize_random_walk(f: &NormalizedFunction, seed: u64) -> Result<Vec<String>> {
    let cfg = require_cfg(f)?;
    Ok(path_instructions(f, cfg, &random_walk_blocks(cfg, seed)))
}

/// Successor lists with DFS back edges removed. DFS starts at the entry and
/// visits successors in ascending block order.
fn forward_edges(cfg: &Cfg) -> (Vec<Vec<usize>>, Vec<usize>) {
    let mut succ = cfg.successors();
    for s in &mut succ {
        s.sort_unstable();
    }
    let n = succ.len();
    let mut state = vec![0u8; n]; // 0 unseen, 1 on stack, 2 done
    let mut forward = vec![Vec::new(); n];
    let mut postorder = Vec::new();
    let entry = cfg.entry();
    let mut stack = vec![(entry, 0usize)];
    state[entry] = 1;
    while let Some(&(u, i)) = stack.last() {
        if i < succ[u].len() {
            stack.last_mut().unwrap().1 += 1;
            let v = succ[u][i];
            match state[v] {
                1 => {} // back edge
                0 => {
                    forward[u].push(v);
                    state[v] = 1;
                    stack.push((v, 0));
                }
                _ => forward[u].push(v),
            }
        } else {
            state[u] = 2;
            postorder.push(u);
            stack.pop();
        }
    }
    (forward, postorder)
}

fn chain(next: &[Option<usize>], start: usize) -> impl Iterator<Item = usize> + '_ {
    std::iter::successors(Some(start), move |&b| next[b])
}

/// Entry-rooted block path with the most instructions on the graph without
/// back edges. Ties go to the lexicographically smallest block sequence.
pub fn longest_walk_blocks(cfg: &Cfg) -> Vec<usize> {
    let (forward, postorder) = forward_edges(cfg);
    let n = forward.len();
    let mut total = vec![0usize; n];
    let mut next: Vec<Option<usize>> = vec![None; n];

    // Postorder of a DFS on a DAG visits every successor before its source.
    for &u in &postorder {
        let mut best: Option<usize> = None;
        for &v in &forward[u] {
            best = match best {
                None => Some(v),
                Some(b) => match total[v].cmp(&total[b]) {
                    Ordering::Greater => Some(v),
                    Ordering::Less => Some(b),
                    Ordering::Equal => {
                        if chain(&next, v).lt(chain(&next, b)) {
                            Some(v)
                        } else {
                            Some(b)
                        }
                    }
                },
            };
        }
        total[u] = cfg.block_len(u) + best.map_or(0, |b| total[b]);
        next[u] = best;
    }
    chain(&next, cfg.entry()).collect()
}

pub fn serialize_longest_walk(f: &NormalizedFunction) -> Result<Vec<String>> {
    let cfg = require_cfg(f)?;
    Ok(path_instructions(f, cfg, &longest_walk_blocks(cfg)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::{FunctionMeta, Instruction};
    use crate::dataset::VariantKey;

    pub(crate) fn function(block_sizes: &[usize], edges: &[(usize, usize)]) -> NormalizedFunction {
        let mut instructions = Vec::new();
        let mut blocks = Vec::new();
        for (b, &size) in block_sizes.iter().enumerate() {
            let start = instructions.len();
            for i in 0..size {
                instructions.push(Instruction {
                    address: 0x10 + instructions.len() as u64 * 4,
                    text: format!("b{b}_i{i}"),
                });
            }
            blocks.push((start, instructions.len()));
        }
        NormalizedFunction {
            meta: FunctionMeta {
                project: "p".into(),
                binary: "b".into(),
                key: VariantKey::default(),
                name: "f".into(),
            },
            instructions,
            cfg: Some(Cfg {
                blocks,
                edges: edges.to_vec(),
            }),
        }
    }

    #[test]
    fn linear_follows_address_order() {
        let f = function(&[2, 1], &[(0, 1)]);
        assert_eq!(serialize_linear(&f), vec!["b0_i0", "b0_i1", "b1_i0"]);
        let single = function(&[1], &[]);
        assert_eq!(serialize_linear(&single).len(), 1);
    }

    #[test]
    fn straight_line_walks() {
        let f = function(&[1, 2, 1], &[(0, 1), (1, 2)]);
        let linear = serialize_linear(&f);
        assert_eq!(serialize_random_walk(&f, 9).unwrap(), linear);
        assert_eq!(serialize_longest_walk(&f).unwrap(), linear);
    }

    #[test]
    fn diamond_prefers_heavier_branch() {
        let f = function(&[1, 5, 2, 1], &[(0, 1), (0, 2), (1, 3), (2, 3)]);
        assert_eq!(longest_walk_blocks(f.cfg.as_ref().unwrap()), vec![0, 1, 3]);
        let g = function(&[1, 2, 5, 1], &[(0, 1), (0, 2), (1, 3), (2, 3)]);
        assert_eq!(longest_walk_blocks(g.cfg.as_ref().unwrap()), vec![0, 2, 3]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let f = function(&[1, 2, 2, 1], &[(0, 2), (0, 1), (1, 3), (2, 3)]);
        assert_eq!(longest_walk_blocks(f.cfg.as_ref().unwrap()), vec![0, 1, 3]);
    }

    #[test]
    fn cycle_back_edge_removed() {
        // A -> B -> A, B -> C
        let f = function(&[1, 1, 1], &[(0, 1), (1, 0), (1, 2)]);
        assert_eq!(longest_walk_blocks(f.cfg.as_ref().unwrap()), vec![0, 1, 2]);
    }

    #[test]
    fn random_walk_is_deterministic() {
        let f = function(&[1, 1, 1, 1], &[(0, 1), (0, 2), (1, 3), (2, 3)]);
        let cfg = f.cfg.as_ref().unwrap();
        assert_eq!(random_walk_blocks(cfg, 5), random_walk_blocks(cfg, 5));
        let seen: std::collections::HashSet<_> =
            (0..64).map(|s| random_walk_blocks(cfg, s)).collect();
        assert_eq!(seen.len(), 2);
        assert!(seen.contains(&vec![0, 1, 3]) && seen.contains(&vec![0, 2, 3]));
    }

    #[test]
    fn entry_is_lowest_instruction_block() {
        let mut f = function(&[2, 1], &[(0, 1)]);
        let cfg = f.cfg.as_mut().unwrap();
        cfg.blocks.swap(0, 1);
        cfg.edges = vec![(1, 0)];
        assert_eq!(cfg.entry(), 1);
        assert_eq!(longest_walk_blocks(cfg), vec![1, 0]);
    }

    #[test]
    fn walks_need_cfg() {
        let mut f = function(&[2], &[]);
        f.cfg = None;
        assert!(matches!(serialize_random_walk(&f, 1), Err(Error::Config(_))));
        assert!(matches!(serialize_longest_walk(&f), Err(Error::Config(_))));
    }
}
