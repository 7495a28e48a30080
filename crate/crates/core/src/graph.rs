//! Directed input graphs, the self-looped row-stochastic adjacency built from
//! them, and sparse propagation of score matrices over it.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::ScoreMatrix;

/// Directed adjacency in CSR form. Duplicate edges are collapsed; columns are
/// sorted within each row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    num_nodes: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
}

impl Graph {
    /// Builds a graph from `(src, dst)` pairs. Repeated pairs are stored once.
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adjacency = vec![Vec::new(); num_nodes];
        for &(src, dst) in edges {
            for id in [src, dst] {
                if id >= num_nodes {
                    return Err(Error::NodeOutOfRange { id, num_nodes });
                }
            }
            adjacency[src].push(dst);
        }
        Ok(Self::from_adjacency_lists(adjacency))
    }

    fn from_adjacency_lists(mut adjacency: Vec<Vec<usize>>) -> Self {
        let num_nodes = adjacency.len();
        let mut row_offsets = Vec::with_capacity(num_nodes + 1);
        let mut col_indices = Vec::new();
        row_offsets.push(0);
        for row in &mut adjacency {
            row.sort_unstable();
            row.dedup();
            col_indices.extend_from_slice(row);
            row_offsets.push(col_indices.len());
        }
        Self {
            num_nodes,
            row_offsets,
            col_indices,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.col_indices.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.col_indices[self.row_offsets[node]..self.row_offsets[node + 1]]
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes)
            .flat_map(move |src| self.neighbors(src).iter().map(move |&dst| (src, dst)))
    }

    /// Writes one `src dst` line per stored edge.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (src, dst) in self.edges() {
            writeln!(out, "{src} {dst}")?;
        }
        Ok(())
    }
}

/// Reads a whitespace-separated edge list. Blank lines and lines starting
/// with `#` are skipped.
pub fn load_edge_list(path: impl AsRef<Path>, num_nodes: usize) -> Result<Graph> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_edge_list(BufReader::new(file), path, num_nodes)
}

pub fn parse_edge_list<R: BufRead>(reader: R, path: &Path, num_nodes: usize) -> Result<Graph> {
    let mut edges = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let (Some(src), Some(dst), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::parse(path, lineno, "expected two node ids"));
        };
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::parse(path, lineno, format!("invalid node id {s:?}")))
        };
        let (src, dst) = (parse(src)?, parse(dst)?);
        for id in [src, dst] {
            if id >= num_nodes {
                return Err(Error::parse(
                    path,
                    lineno,
                    Error::NodeOutOfRange { id, num_nodes }.to_string(),
                ));
            }
        }
        edges.push((src, dst));
    }
    Graph::from_edges(num_nodes, &edges)
}

/// Row-stochastic `D^-1 (A + I)` where `A` has been symmetrized and made
/// binary. Every row holds its diagonal entry.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    num_nodes: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `(column, weight)` pairs of one row in ascending column order.
    pub fn row(&self, node: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_offsets[node]..self.row_offsets[node + 1];
        self.col_indices[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let range = self.row_offsets[row]..self.row_offsets[row + 1];
        match self.col_indices[range.clone()].binary_search(&col) {
            Ok(pos) => self.values[range.start + pos],
            Err(_) => 0.0,
        }
    }
}

pub fn build_normalized_adjacency(graph: &Graph) -> NormalizedAdjacency {
    let n = graph.num_nodes();
    let mut adjacency: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for (src, dst) in graph.edges() {
        adjacency[src].push(dst);
        adjacency[dst].push(src);
    }
    // Collapsing here keeps an input self-loop from stacking with I.
    let binary = Graph::from_adjacency_lists(adjacency);
    let values = (0..n)
        .flat_map(|row| {
            let degree = binary.neighbors(row).len();
            std::iter::repeat_n(1.0 / degree as f64, degree)
        })
        .collect();
    NormalizedAdjacency {
        num_nodes: n,
        row_offsets: binary.row_offsets,
        col_indices: binary.col_indices,
        values,
    }
}

/// Applies `steps` rounds of `Z <- Ã Z`. Rows are computed in parallel with a
/// fixed neighbor order, so results do not depend on the thread count.
pub fn propagate(z: &ScoreMatrix, adj: &NormalizedAdjacency, steps: usize) -> Result<ScoreMatrix> {
    if z.rows() != adj.num_nodes() {
        return Err(Error::Dimension(format!(
            "score matrix has {} rows but graph has {} nodes",
            z.rows(),
            adj.num_nodes()
        )));
    }
    let cols = z.cols();
    if steps == 0 || cols == 0 {
        return Ok(z.clone());
    }
    let mut current = z.as_slice().to_vec();
    let mut next = vec![0.0; current.len()];
    for _ in 0..steps {
        spmm_into(adj, &current, cols, &mut next);
        std::mem::swap(&mut current, &mut next);
    }
    ScoreMatrix::from_vec(z.rows(), cols, current)
}

fn spmm_into(adj: &NormalizedAdjacency, input: &[f64], cols: usize, output: &mut [f64]) {
    output
        .par_chunks_mut(cols)
        .enumerate()
        .for_each(|(row, out_row)| {
            // Rows of Ã sum to one, so Σ w_j z_j = z_i + Σ w_j (z_j - z_i).
            // Anchoring on z_i keeps constant rows fixed bit-for-bit.
            let own = &input[row * cols..(row + 1) * cols];
            out_row.copy_from_slice(own);
            for (col, weight) in adj.row(row) {
                if col == row {
                    continue;
                }
                let src = &input[col * cols..(col + 1) * cols];
                for ((o, &s), &a) in out_row.iter_mut().zip(src).zip(own) {
                    *o += weight * (s - a);
                }
            }
        });
}
