//! Maximum-weight independent set over a conflict graph.

use serde::Serialize;

use crate::error::{Error, Result};

/// Largest graph [`mwis_bruteforce`] accepts.
pub const BRUTEFORCE_LIMIT: usize = 20;

/// Search nodes explored per component before [`solve_mwis`] gives up.
pub const SEARCH_NODE_BUDGET: u64 = 2_000_000;

/// Undirected graph with positive vertex weights, stored as bit rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ConflictGraph {
    weights: Vec<f64>,
    adj: Vec<Vec<u64>>,
}

fn words(n: usize) -> usize {
    n.div_ceil(64)
}

fn has(bits: &[u64], i: usize) -> bool {
    bits[i / 64] >> (i % 64) & 1 == 1
}

fn set(bits: &mut [u64], i: usize) {
    bits[i / 64] |= 1 << (i % 64);
}

fn clear(bits: &mut [u64], i: usize) {
    bits[i / 64] &= !(1 << (i % 64));
}

fn ones(bits: &[u64]) -> impl Iterator<Item = usize> + '_ {
    bits.iter().enumerate().flat_map(|(w, &word)| {
        let mut x = word;
        std::iter::from_fn(move || {
            if x == 0 {
                return None;
            }
            let b = x.trailing_zeros() as usize;
            x &= x - 1;
            Some(w * 64 + b)
        })
    })
}

impl ConflictGraph {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidValue(format!("vertex weight {w} is not positive")));
        }
        let n = weights.len();
        Ok(Self {
            adj: vec![vec![0; words(n)]; n],
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weight(&self, v: usize) -> f64 {
        self.weights[v]
    }

    pub fn add_edge(&mut self, a: usize, b: usize) {
        if a != b {
            set(&mut self.adj[a], b);
            set(&mut self.adj[b], a);
        }
    }

    pub fn adjacent(&self, a: usize, b: usize) -> bool {
        has(&self.adj[a], b)
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(|r| r.iter().map(|w| w.count_ones() as usize).sum::<usize>()).sum::<usize>() / 2
    }

    /// True when no two of `vertices` are adjacent.
    pub fn is_independent(&self, vertices: &[usize]) -> bool {
        vertices
            .iter()
            .enumerate()
            .all(|(i, &a)| vertices[i + 1..].iter().all(|&b| a != b && !self.adjacent(a, b)))
    }

    /// Vertex sets of the connected components, each sorted, ordered by
    /// smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.len();
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for s in 0..n {
            if seen[s] {
                continue;
            }
            seen[s] = true;
            let mut comp = vec![s];
            let mut i = 0;
            while i < comp.len() {
                for u in ones(&self.adj[comp[i]]) {
                    if !seen[u] {
                        seen[u] = true;
                        comp.push(u);
                    }
                }
                i += 1;
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    fn total(&self, vertices: &[usize]) -> f64 {
        vertices.iter().map(|&v| self.weights[v]).sum()
    }

    fn hypothesis(&self, mut vertices: Vec<usize>) -> MwisSolution {
        vertices.sort_unstable();
        MwisSolution {
            total: self.total(&vertices),
            vertices,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MwisSolution {
    /// Selected vertices in ascending order.
    pub vertices: Vec<usize>,
    /// Sum of selected weights, accumulated in ascending vertex order.
    pub total: f64,
}

/// `a` beats `b`: larger total, then the lexicographically smaller set.
fn better(a_total: f64, a: &[usize], b_total: f64, b: &[usize]) -> bool {
    a_total > b_total || (a_total == b_total && a < b)
}

/// Exhaustive search, for graphs of at most [`BRUTEFORCE_LIMIT`] vertices.
pub fn mwis_bruteforce(graph: &ConflictGraph) -> Result<MwisSolution> {
    let n = graph.len();
    if n > BRUTEFORCE_LIMIT {
        return Err(Error::SizeLimit {
            vertices: n,
            cap: BRUTEFORCE_LIMIT,
        });
    }
    let masks: Vec<u32> = (0..n).map(|v| graph.adj[v].first().copied().unwrap_or(0) as u32).collect();
    let mut best = graph.hypothesis(Vec::new());
    for subset in 1u32..(1u32 << n) {
        let independent = (0..n).all(|v| subset >> v & 1 == 0 || masks[v] & subset == 0);
        if !independent {
            continue;
        }
        let verts: Vec<usize> = (0..n).filter(|v| subset >> v & 1 == 1).collect();
        let total = graph.total(&verts);
        if better(total, &verts, best.total, &best.vertices) {
            best = MwisSolution { vertices: verts, total };
        }
    }
    Ok(best)
}

/// Highest weight first, skipping conflicts. Ties go to the lower index.
pub fn mwis_greedy(graph: &ConflictGraph) -> MwisSolution {
    let mut order: Vec<usize> = (0..graph.len()).collect();
    order.sort_by(|&a, &b| graph.weights[b].total_cmp(&graph.weights[a]).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = Vec::new();
    for v in order {
        if chosen.iter().all(|&c| !graph.adjacent(c, v)) {
            chosen.push(v);
        }
    }
    graph.hypothesis(chosen)
}

/// Exact solution by branch and bound on each connected component.
///
/// Fails with `SizeLimit` when a component has more than `cap` vertices
/// or its search exceeds [`SEARCH_NODE_BUDGET`] nodes; callers fall back
/// to [`mwis_greedy`].
pub fn solve_mwis(graph: &ConflictGraph, cap: usize) -> Result<MwisSolution> {
    let comps = graph.components();
    if let Some(big) = comps.iter().find(|c| c.len() > cap) {
        return Err(Error::SizeLimit {
            vertices: big.len(),
            cap,
        });
    }
    let mut chosen = Vec::new();
    for comp in comps {
        if comp.len() == 1 {
            chosen.push(comp[0]);
            continue;
        }
        match solve_component(graph, &comp) {
            Some(c) => chosen.extend(c),
            None => {
                return Err(Error::SizeLimit {
                    vertices: comp.len(),
                    cap: comp.len() - 1,
                })
            }
        }
    }
    Ok(graph.hypothesis(chosen))
}

struct Search<'a> {
    /// Component-local weights and adjacency rows.
    weights: Vec<f64>,
    adj: Vec<Vec<u64>>,
    /// Local index to graph vertex.
    ids: &'a [usize],
    best: Vec<usize>,
    best_total: f64,
    slack: f64,
    nodes: u64,
}

fn solve_component(graph: &ConflictGraph, comp: &[usize]) -> Option<Vec<usize>> {
    let n = comp.len();
    let mut adj = vec![vec![0u64; words(n)]; n];
    for (i, &a) in comp.iter().enumerate() {
        for (j, &b) in comp.iter().enumerate() {
            if graph.adjacent(a, b) {
                set(&mut adj[i], j);
            }
        }
    }
    let weights: Vec<f64> = comp.iter().map(|&v| graph.weights[v]).collect();
    let sum: f64 = weights.iter().sum();

    // greedy incumbent
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut start: Vec<usize> = Vec::new();
    for v in order {
        if start.iter().all(|&c| !has(&adj[c], v)) {
            start.push(v);
        }
    }
    start.sort_unstable();
    let mut search = Search {
        best_total: sorted_total(&weights, &start),
        best: start,
        weights,
        adj,
        ids: comp,
        slack: 1e-9 * (1.0 + sum),
        nodes: 0,
    };
    let mut cand = vec![0u64; words(n)];
    for v in 0..n {
        set(&mut cand, v);
    }
    let mut chosen = Vec::new();
    search.branch(&mut cand, &mut chosen, 0.0);
    (search.nodes <= SEARCH_NODE_BUDGET).then(|| search.best.iter().map(|&i| search.ids[i]).collect())
}

fn sorted_total(weights: &[f64], chosen: &[usize]) -> f64 {
    let mut c = chosen.to_vec();
    c.sort_unstable();
    c.iter().map(|&v| weights[v]).sum()
}

impl Search<'_> {
    /// Greedy clique cover of `cand`; the sum of each clique's heaviest
    /// vertex bounds any independent set inside `cand`.
    fn clique_bound(&self, cand: &[u64]) -> f64 {
        let mut verts: Vec<usize> = ones(cand).collect();
        verts.sort_by(|&a, &b| self.weights[b].total_cmp(&self.weights[a]).then(a.cmp(&b)));
        let mut cliques: Vec<Vec<usize>> = Vec::new();
        let mut bound = 0.0;
        for v in verts {
            match cliques.iter_mut().find(|c| c.iter().all(|&u| has(&self.adj[v], u))) {
                Some(c) => c.push(v),
                None => {
                    bound += self.weights[v];
                    cliques.push(vec![v]);
                }
            }
        }
        bound
    }

    fn branch(&mut self, cand: &mut Vec<u64>, chosen: &mut Vec<usize>, weight: f64) {
        self.nodes += 1;
        if self.nodes > SEARCH_NODE_BUDGET {
            return;
        }
        if cand.iter().all(|w| *w == 0) {
            let total = sorted_total(&self.weights, chosen);
            let mut sorted = chosen.clone();
            sorted.sort_unstable();
            // compare in graph ids so ties resolve like the oracle
            let as_ids = |s: &[usize]| s.iter().map(|&i| self.ids[i]).collect::<Vec<_>>();
            if better(total, &as_ids(&sorted), self.best_total, &as_ids(&self.best)) {
                self.best_total = total;
                self.best = sorted;
            }
            return;
        }
        if weight + self.clique_bound(cand) + self.slack < self.best_total {
            return;
        }
        // branch on the candidate with most neighbours among candidates
        let v = ones(cand)
            .max_by_key(|&v| {
                let deg: u32 = self.adj[v].iter().zip(cand.iter()).map(|(a, c)| (a & c).count_ones()).sum();
                (deg, std::cmp::Reverse(v))
            })
            .expect("candidates are non-empty");

        if self.adj[v].iter().zip(cand.iter()).all(|(a, c)| a & c == 0) {
            // isolated among candidates: always take it
            clear(cand, v);
            chosen.push(v);
            let w = self.weights[v];
            self.branch(cand, chosen, weight + w);
            chosen.pop();
            set(cand, v);
            return;
        }

        let mut with: Vec<u64> = cand.iter().zip(&self.adj[v]).map(|(c, a)| c & !a).collect();
        clear(&mut with, v);
        chosen.push(v);
        let w = self.weights[v];
        self.branch(&mut with, chosen, weight + w);
        chosen.pop();

        clear(cand, v);
        self.branch(cand, chosen, weight);
        set(cand, v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn graph(weights: &[f64], edges: &[(usize, usize)]) -> ConflictGraph {
        let mut g = ConflictGraph::new(weights.to_vec()).unwrap();
        for &(a, b) in edges {
            g.add_edge(a, b);
        }
        g
    }

    fn random_graph(n: usize, p: f64, rng: &mut ChaCha8Rng) -> ConflictGraph {
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..10.0)).collect();
        let mut g = ConflictGraph::new(w).unwrap();
        for a in 0..n {
            for b in a + 1..n {
                if rng.random_bool(p) {
                    g.add_edge(a, b);
                }
            }
        }
        g
    }

    #[test]
    fn small_examples() {
        let single = graph(&[1.0], &[]);
        let s = solve_mwis(&single, 500).unwrap();
        assert_eq!((s.vertices, s.total), (vec![0], 1.0));

        let tri = graph(&[1.0, 2.0, 3.0], &[(0, 1), (1, 2), (0, 2)]);
        assert_eq!(solve_mwis(&tri, 500).unwrap().vertices, vec![2]);

        let path = graph(&[2.0, 3.0, 2.0], &[(0, 1), (1, 2)]);
        let s = solve_mwis(&path, 500).unwrap();
        assert_eq!((s.vertices.clone(), s.total), (vec![0, 2], 4.0));
        assert_eq!(mwis_bruteforce(&path).unwrap(), s);

        let empty = ConflictGraph::new(vec![]).unwrap();
        let b = mwis_bruteforce(&empty).unwrap();
        assert!(b.vertices.is_empty() && b.total == 0.0);
        assert_eq!(solve_mwis(&empty, 500).unwrap(), b);
    }

    #[test]
    fn ties_prefer_the_smaller_vertex_set() {
        // {0} and {1} tie; {0} wins
        let g = graph(&[5.0, 5.0], &[(0, 1)]);
        assert_eq!(solve_mwis(&g, 500).unwrap().vertices, vec![0]);
        assert_eq!(mwis_bruteforce(&g).unwrap().vertices, vec![0]);
        // {0,3} and {1,2} tie at 4 on a 4-cycle
        let c = graph(&[2.0, 2.0, 2.0, 2.0], &[(0, 1), (1, 3), (3, 2), (2, 0)]);
        assert_eq!(solve_mwis(&c, 500).unwrap().vertices, vec![0, 3]);
        assert_eq!(mwis_bruteforce(&c).unwrap().vertices, vec![0, 3]);
    }

    #[test]
    fn weights_must_be_positive() {
        assert!(ConflictGraph::new(vec![1.0, 0.0]).is_err());
        assert!(ConflictGraph::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn size_limits() {
        let big = ConflictGraph::new(vec![1.0; 21]).unwrap();
        assert!(matches!(mwis_bruteforce(&big), Err(Error::SizeLimit { vertices: 21, cap: 20 })));
        let mut chain = ConflictGraph::new(vec![1.0; 6]).unwrap();
        for v in 0..5 {
            chain.add_edge(v, v + 1);
        }
        assert!(matches!(solve_mwis(&chain, 5), Err(Error::SizeLimit { vertices: 6, cap: 5 })));
        // isolated vertices form separate components and pass the cap
        assert_eq!(solve_mwis(&big, 5).unwrap().vertices.len(), 21);
    }

    #[test]
    fn exact_matches_bruteforce_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let n = rng.random_range(1..=12);
            let g = random_graph(n, 0.3, &mut rng);
            let exact = solve_mwis(&g, 500).unwrap();
            let brute = mwis_bruteforce(&g).unwrap();
            assert_eq!(exact, brute);
            assert!(g.is_independent(&exact.vertices));
        }
    }

    #[test]
    fn greedy_is_independent_and_never_better() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let g = random_graph(15, 0.4, &mut rng);
            let gr = mwis_greedy(&g);
            assert!(g.is_independent(&gr.vertices));
            assert!(gr.total <= solve_mwis(&g, 500).unwrap().total);
        }
    }

    #[test]
    fn medium_graphs_solve_quickly() {
        // clique-structured graphs like track trees: 40 trees of 8 leaves
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 320;
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..10.0)).collect();
        let mut g = ConflictGraph::new(w).unwrap();
        for t in 0..40 {
            for a in 0..8 {
                for b in a + 1..8 {
                    g.add_edge(t * 8 + a, t * 8 + b);
                }
            }
        }
        for _ in 0..120 {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            g.add_edge(a, b);
        }
        let s = solve_mwis(&g, 500).unwrap();
        assert!(g.is_independent(&s.vertices));
        assert!(s.total >= mwis_greedy(&g).total);
    }
}
