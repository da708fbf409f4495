//! Rooted-tree distribution grid: electrical parameters, station limits and
//! derived tree structure.
//!
//! Nodes are dense ids `0..=I`; node 0 is the feeder. Every other node `k`
//! has exactly one parent and the edge into `k` is identified by `k` itself.
//! Per-station arrays (`v_lo`, `v_hi`, `m`, `capacity`) are indexed by node
//! id; their entry 0 belongs to the feeder and is not used by the models.

mod file;

pub use file::{load_grid, parse_grid, GridFile, GridFormat};

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Number of parking spaces at a station.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Capacity {
    Finite(u64),
    /// Rejection disabled.
    Unlimited,
}

impl Capacity {
    pub fn admits(self, occupied: u64) -> bool {
        match self {
            Capacity::Finite(k) => occupied < k,
            Capacity::Unlimited => true,
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Capacity::Finite(k) => k as f64,
            Capacity::Unlimited => f64::INFINITY,
        }
    }

    pub fn scaled(self, n: u64) -> Self {
        match self {
            Capacity::Finite(k) => Capacity::Finite(k * n),
            Capacity::Unlimited => Capacity::Unlimited,
        }
    }
}

/// A directed edge `ε_pk` from `parent` (closer to the feeder) to `child`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EdgeRef {
    pub parent: usize,
    pub child: usize,
}

/// Raw line data as supplied by a caller or a grid file.
#[derive(Debug, Clone, PartialEq)]
pub struct Line<T> {
    pub from: usize,
    pub to: usize,
    pub r: T,
    pub x: T,
}

/// Unvalidated grid description; turn it into a [`GridSpec`] with
/// [`GridSpec::new`].
#[derive(Debug, Clone)]
pub struct GridParams<T> {
    pub nodes: usize,
    pub types: usize,
    pub lines: Vec<Line<T>>,
    pub w00: T,
    /// Per load node `1..=I`, length `I`.
    pub v_lo: Vec<T>,
    pub v_hi: Vec<T>,
    pub m: Vec<T>,
    pub capacity: Vec<Capacity>,
    /// Per EV type, length `J`.
    pub c_max: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct GridSpec<T> {
    nodes: usize,
    types: usize,
    w00: T,
    parent: Vec<usize>,
    r: Vec<T>,
    x: Vec<T>,
    v_lo: Vec<T>,
    v_hi: Vec<T>,
    m: Vec<T>,
    capacity: Vec<Capacity>,
    c_max: Vec<T>,
    children: Vec<Vec<usize>>,
    depth: Vec<usize>,
    /// Breadth-first order from the feeder.
    order: Vec<usize>,
}

impl<T: Real> GridSpec<T> {
    pub fn new(p: GridParams<T>) -> Result<Self> {
        let n = p.nodes;
        if n == 0 {
            return Err(Error::bad_grid("grid needs at least one load node"));
        }
        if p.types == 0 {
            return Err(Error::bad_grid("at least one EV type is required"));
        }
        if p.lines.len() != n {
            return Err(Error::bad_grid(format!(
                "a tree on {} nodes has exactly {} edges, got {}",
                n + 1,
                n,
                p.lines.len()
            )));
        }
        for (name, len, want) in [
            ("v_lo", p.v_lo.len(), n),
            ("v_hi", p.v_hi.len(), n),
            ("m", p.m.len(), n),
            ("k", p.capacity.len(), n),
            ("c_max", p.c_max.len(), p.types),
        ] {
            if len != want {
                return Err(Error::Dimension(format!("{name} has length {len}, expected {want}")));
            }
        }

        let mut parent = vec![usize::MAX; n + 1];
        let mut r = vec![T::zero(); n + 1];
        let mut x = vec![T::zero(); n + 1];
        for (idx, line) in p.lines.iter().enumerate() {
            if line.from > n || line.to > n {
                return Err(Error::bad_edge(idx, format!("edge {idx} ({} -> {}) references a node outside 0..={n}",
                    line.from, line.to
                )));
            }
            if line.to == 0 {
                return Err(Error::bad_edge(idx, format!("edge {idx} points into the feeder")));
            }
            if line.from == line.to {
                return Err(Error::bad_edge(idx, format!("edge {idx} is a self loop")));
            }
            if parent[line.to] != usize::MAX {
                return Err(Error::bad_edge(idx, format!("edge {idx}: node {} already has parent {}",
                    line.to, parent[line.to]
                )));
            }
            if !(line.r > T::zero() && line.x > T::zero()) {
                return Err(Error::bad_edge(idx, format!("edge {idx}: r and x must be positive")));
            }
            parent[line.to] = line.from;
            r[line.to] = line.r;
            x[line.to] = line.x;
        }

        let mut children = vec![Vec::new(); n + 1];
        for k in 1..=n {
            children[parent[k]].push(k);
        }
        let mut depth = vec![usize::MAX; n + 1];
        let mut order = Vec::with_capacity(n + 1);
        let mut queue = VecDeque::from([0usize]);
        depth[0] = 0;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for &c in &children[v] {
                depth[c] = depth[v] + 1;
                queue.push_back(c);
            }
        }
        if order.len() != n + 1 {
            let orphan = (1..=n).find(|&k| depth[k] == usize::MAX).unwrap_or(0);
            return Err(Error::bad_grid(format!(
                "node {orphan} is not connected to the feeder (cycle or detached component)"
            )));
        }

        if !(p.w00 > T::zero()) {
            return Err(Error::bad_grid("w00 must be positive"));
        }
        for k in 0..n {
            if !(p.v_lo[k] > T::zero()) || p.v_lo[k] > p.v_hi[k] {
                return Err(Error::bad_grid(format!(
                    "node {}: need 0 < v_lo <= v_hi",
                    k + 1
                )));
            }
            if !(p.m[k] > T::zero()) {
                return Err(Error::bad_grid(format!("node {}: m must be positive", k + 1)));
            }
            if p.capacity[k] == Capacity::Finite(0) {
                return Err(Error::bad_grid(format!("node {}: k must be positive", k + 1)));
            }
        }
        if p.c_max.iter().any(|c| !(*c > T::zero())) {
            return Err(Error::bad_grid("c_max must be positive"));
        }

        let pad = |v: Vec<T>, fill: T| std::iter::once(fill).chain(v).collect::<Vec<_>>();
        Ok(GridSpec {
            nodes: n,
            types: p.types,
            w00: p.w00,
            parent,
            r,
            x,
            v_lo: pad(p.v_lo, p.w00),
            v_hi: pad(p.v_hi, p.w00),
            m: pad(p.m, T::zero()),
            capacity: std::iter::once(Capacity::Unlimited).chain(p.capacity).collect(),
            c_max: p.c_max,
            children,
            depth,
            order,
        })
    }

    /// Number of load nodes `I`.
    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// Number of EV types `J`.
    pub fn types(&self) -> usize {
        self.types
    }

    pub fn w00(&self) -> T {
        self.w00
    }

    /// Parent of node `k >= 1`.
    pub fn parent(&self, k: usize) -> usize {
        self.parent[k]
    }

    /// Resistance of the edge into `k`.
    pub fn r(&self, k: usize) -> T {
        self.r[k]
    }

    /// Reactance of the edge into `k`.
    pub fn x(&self, k: usize) -> T {
        self.x[k]
    }

    pub fn v_lo(&self, k: usize) -> T {
        self.v_lo[k]
    }

    pub fn v_hi(&self, k: usize) -> T {
        self.v_hi[k]
    }

    pub fn m(&self, k: usize) -> T {
        self.m[k]
    }

    pub fn capacity(&self, k: usize) -> Capacity {
        self.capacity[k]
    }

    pub fn c_max(&self, j: usize) -> T {
        self.c_max[j]
    }

    pub fn children(&self, k: usize) -> &[usize] {
        &self.children[k]
    }

    pub fn depth(&self, k: usize) -> usize {
        self.depth[k]
    }

    /// Nodes in breadth-first order starting at the feeder.
    pub fn bfs_order(&self) -> &[usize] {
        &self.order
    }

    /// Edges of the tree, one per load node, in breadth-first order.
    pub fn edges(&self) -> impl Iterator<Item = EdgeRef> + '_ {
        self.order[1..].iter().map(|&k| EdgeRef { parent: self.parent[k], child: k })
    }

    fn check_node(&self, k: usize) -> Result<()> {
        if k > self.nodes {
            Err(Error::domain(format!("unknown node {k} (grid has nodes 0..={})", self.nodes)))
        } else {
            Ok(())
        }
    }

    /// Node set `I(k)` of the subtree rooted at `k`, including `k`, sorted.
    pub fn subtree_nodes(&self, k: usize) -> Result<Vec<usize>> {
        self.check_node(k)?;
        let mut out = vec![k];
        let mut head = 0;
        while head < out.len() {
            let v = out[head];
            out.extend_from_slice(&self.children[v]);
            head += 1;
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Edges on the unique path from the feeder to `k`, feeder side first.
    /// The path to the feeder itself is empty.
    pub fn root_path(&self, k: usize) -> Result<Vec<EdgeRef>> {
        self.check_node(k)?;
        let mut path = Vec::with_capacity(self.depth[k]);
        let mut v = k;
        while v != 0 {
            let p = self.parent[v];
            path.push(EdgeRef { parent: p, child: v });
            v = p;
        }
        path.reverse();
        Ok(path)
    }

    /// Partition of all nodes into strata `L_0, L_1, ...`: `L_0` holds the
    /// leaves and `L_m` the nodes whose subtrees are covered by earlier strata
    /// plus the node itself. The last stratum is `{0}`.
    pub fn leaf_strata(&self) -> Vec<Vec<usize>> {
        let mut height = vec![0usize; self.nodes + 1];
        for &v in self.order.iter().rev() {
            if let Some(h) = self.children[v].iter().map(|&c| height[c] + 1).max() {
                height[v] = h;
            }
        }
        let mut strata = vec![Vec::new(); height[0] + 1];
        for v in 0..=self.nodes {
            strata[height[v]].push(v);
        }
        strata
    }

    /// Whether `r/x` is the same on every edge (relative tolerance 1e-12).
    pub fn has_constant_ratio(&self) -> bool {
        let ratio0 = self.r[1] / self.x[1];
        (1..=self.nodes).all(|k| {
            let ratio = self.r[k] / self.x[k];
            (ratio - ratio0).abs() <= T::tol(1e-12) * ratio0.abs().max(T::one())
        })
    }

    pub fn check_constant_ratio(&self) -> Result<()> {
        if self.has_constant_ratio() {
            Ok(())
        } else {
            Err(Error::bad_grid(
                "the AC model requires the same r/x ratio on every edge",
            ))
        }
    }

    /// Grid of the `n`-th system in the fluid scaling: `K -> nK`, `M -> nM`,
    /// `r -> r/n`, `x -> x/n`.
    pub fn scaled(&self, n: u64) -> Self {
        let nf = T::lit(n as f64);
        let mut g = self.clone();
        for k in 1..=self.nodes {
            g.r[k] = self.r[k] / nf;
            g.x[k] = self.x[k] / nf;
            g.m[k] = self.m[k] * nf;
            g.capacity[k] = self.capacity[k].scaled(n);
        }
        g
    }

    /// Recovers the parameters this grid was built from.
    pub fn params(&self) -> GridParams<T> {
        GridParams {
            nodes: self.nodes,
            types: self.types,
            lines: (1..=self.nodes)
                .map(|k| Line { from: self.parent[k], to: k, r: self.r[k], x: self.x[k] })
                .collect(),
            w00: self.w00,
            v_lo: self.v_lo[1..].to_vec(),
            v_hi: self.v_hi[1..].to_vec(),
            m: self.m[1..].to_vec(),
            capacity: self.capacity[1..].to_vec(),
            c_max: self.c_max.clone(),
        }
    }

    /// Same grid with different station data, reusing the topology.
    pub fn with_params(&self, f: impl FnOnce(&mut GridParams<T>)) -> Result<Self> {
        let mut p = self.params();
        f(&mut p);
        GridSpec::new(p)
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Real>(&self) -> GridSpec<U> {
        let c = |v: T| U::lit(v.as_f64());
        let p = self.params();
        GridSpec::new(GridParams {
            nodes: p.nodes,
            types: p.types,
            lines: p.lines.iter().map(|l| Line { from: l.from, to: l.to, r: c(l.r), x: c(l.x) }).collect(),
            w00: c(p.w00),
            v_lo: p.v_lo.into_iter().map(c).collect(),
            v_hi: p.v_hi.into_iter().map(c).collect(),
            m: p.m.into_iter().map(c).collect(),
            capacity: p.capacity,
            c_max: p.c_max.into_iter().map(c).collect(),
        })
        .expect("cast of a valid grid is valid")
    }
}

/// Dense `(node, type)` table; row 0 belongs to the feeder and stays zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTypeTable<T> {
    nodes: usize,
    types: usize,
    data: Vec<T>,
}

impl<T: Copy + num_traits::Zero> NodeTypeTable<T> {
    pub fn zeros(nodes: usize, types: usize) -> Self {
        NodeTypeTable { nodes, types, data: vec![T::zero(); nodes * types] }
    }

    /// Builds a table from rows for nodes `1..=I`.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let nodes = rows.len();
        let types = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != types) {
            return Err(Error::Dimension("ragged (node, type) table".into()));
        }
        Ok(NodeTypeTable { nodes, types, data: rows.concat() })
    }

    /// One type per node.
    pub fn from_node_values(values: &[T]) -> Self {
        NodeTypeTable { nodes: values.len(), types: 1, data: values.to_vec() }
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn types(&self) -> usize {
        self.types
    }

    /// Entry for load node `i >= 1` and type `j` (0-based).
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[(i - 1) * self.types + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[(i - 1) * self.types + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[(i - 1) * self.types..i * self.types]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn rows(&self) -> Vec<Vec<T>> {
        self.data.chunks(self.types.max(1)).map(<[T]>::to_vec).collect()
    }

    pub fn map<U: Copy + num_traits::Zero>(&self, f: impl Fn(T) -> U) -> NodeTypeTable<U> {
        NodeTypeTable { nodes: self.nodes, types: self.types, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Entrywise combination of two tables of the same shape.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!((self.nodes, self.types), (other.nodes, other.types), "table shapes differ");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        NodeTypeTable { nodes: self.nodes, types: self.types, data }
    }

    pub fn check_shape<U>(&self, g: &GridSpec<U>) -> Result<()> {
        if self.nodes != g.nodes || self.types != g.types {
            return Err(Error::Dimension(format!(
                "table is {}x{}, grid has {} nodes and {} types",
                self.nodes, self.types, g.nodes, g.types
            )));
        }
        Ok(())
    }

    /// `(i, j)` pairs with `i` in `1..=I`.
    pub fn indices(&self) -> impl Iterator<Item = (usize, usize)> {
        let types = self.types;
        (1..=self.nodes).flat_map(move |i| (0..types).map(move |j| (i, j)))
    }
}

impl<T: Copy + num_traits::Zero + std::ops::Add<Output = T>> NodeTypeTable<T> {
    /// `Σ_j table[i][j]`.
    pub fn node_sum(&self, i: usize) -> T {
        self.row(i).iter().fold(T::zero(), |a, &b| a + b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tree(lines: &[(usize, usize)]) -> GridSpec<f64> {
        let n = lines.len();
        GridSpec::new(GridParams {
            nodes: n,
            types: 1,
            lines: lines.iter().map(|&(f, t)| Line { from: f, to: t, r: 0.1, x: 0.1 }).collect(),
            w00: 1.0,
            v_lo: vec![0.81; n],
            v_hi: vec![1.0; n],
            m: vec![1.0; n],
            capacity: vec![Capacity::Finite(5); n],
            c_max: vec![1.0],
        })
        .unwrap()
    }

    #[test]
    fn subtree_of_counterexample_tree() {
        let g = tree(&[(0, 1), (1, 2), (1, 3)]);
        assert_eq!(g.subtree_nodes(1).unwrap(), vec![1, 2, 3]);
        assert_eq!(g.subtree_nodes(3).unwrap(), vec![3]);
        assert_eq!(g.subtree_nodes(0).unwrap(), vec![0, 1, 2, 3]);
        assert!(matches!(g.subtree_nodes(4), Err(Error::Domain(_))));
    }

    #[test]
    fn root_paths() {
        let line = tree(&[(0, 1), (1, 2)]);
        assert_eq!(
            line.root_path(2).unwrap(),
            vec![EdgeRef { parent: 0, child: 1 }, EdgeRef { parent: 1, child: 2 }]
        );
        let g = tree(&[(0, 1), (1, 2), (1, 3)]);
        assert_eq!(
            g.root_path(3).unwrap(),
            vec![EdgeRef { parent: 0, child: 1 }, EdgeRef { parent: 1, child: 3 }]
        );
        assert!(g.root_path(0).unwrap().is_empty());
    }

    #[test]
    fn strata_examples() {
        let line = tree(&[(0, 1), (1, 2)]);
        assert_eq!(line.leaf_strata(), vec![vec![2], vec![1], vec![0]]);
        let g = tree(&[(0, 1), (1, 2), (1, 3)]);
        assert_eq!(g.leaf_strata(), vec![vec![2, 3], vec![1], vec![0]]);
        // Five-stratum tree: 0-1-2-3-4 spine with side leaves hanging off 1, 2 and 3.
        let fig = tree(&[(0, 1), (1, 2), (2, 3), (3, 4), (1, 5), (2, 6), (3, 7), (0, 8)]);
        let strata = fig.leaf_strata();
        assert_eq!(strata, vec![vec![4, 5, 6, 7, 8], vec![3], vec![2], vec![1], vec![0]]);
    }

    #[test]
    fn rejects_non_trees() {
        let mut p = tree(&[(0, 1), (1, 2)]).params();
        p.lines[1] = Line { from: 2, to: 1, r: 0.1, x: 0.1 };
        assert!(matches!(GridSpec::new(p.clone()), Err(Error::InvalidGrid { .. })));
        p.lines[1] = Line { from: 2, to: 2, r: 0.1, x: 0.1 };
        assert!(GridSpec::new(p.clone()).is_err());
        p.lines.pop();
        assert!(GridSpec::new(p).is_err());
        // cycle 1 -> 2 -> 1 detached from the feeder
        let p = GridParams {
            lines: vec![Line { from: 2, to: 1, r: 0.1, x: 0.1 }, Line { from: 1, to: 2, r: 0.1, x: 0.1 }],
            ..tree(&[(0, 1), (1, 2)]).params()
        };
        assert!(GridSpec::new(p).is_err());
    }

    #[test]
    fn constant_ratio_check() {
        let g = tree(&[(0, 1), (1, 2)]);
        assert!(g.check_constant_ratio().is_ok());
        let g2 = g.with_params(|p| p.lines[1].x = 0.2).unwrap();
        assert!(g2.check_constant_ratio().is_err());
    }

    #[test]
    fn scaling() {
        let g = tree(&[(0, 1), (1, 2)]).scaled(10);
        assert!((g.r(2) - 0.01).abs() < 1e-15);
        assert_eq!(g.capacity(1), Capacity::Finite(50));
        assert!((g.m(2) - 10.0).abs() < 1e-12);
    }
}
