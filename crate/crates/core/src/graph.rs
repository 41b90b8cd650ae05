//! Undirected communication graphs.

use std::collections::{BTreeSet, VecDeque};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("edge ({0}, {1}) references a node outside 0..{2}")]
    OutOfRange(usize, usize, usize),
    #[error("self-loop at node {0}")]
    SelfLoop(usize),
    #[error("unknown graph generator '{0}' (expected cycle, path, complete or star)")]
    UnknownGenerator(String),
    #[error("graph must have at least one node")]
    Empty,
}

/// Simple undirected graph stored as sorted adjacency sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    adj: Vec<BTreeSet<usize>>,
}

impl Graph {
    pub fn empty(nodes: usize) -> Self {
        Self {
            adj: vec![BTreeSet::new(); nodes],
        }
    }

    pub fn from_edges(nodes: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        let mut g = Self::empty(nodes);
        for &(i, j) in edges {
            if i >= nodes || j >= nodes {
                return Err(GraphError::OutOfRange(i, j, nodes));
            }
            if i == j {
                return Err(GraphError::SelfLoop(i));
            }
            g.adj[i].insert(j);
            g.adj[j].insert(i);
        }
        Ok(g)
    }

    pub fn cycle(nodes: usize) -> Self {
        let edges: Vec<_> = (0..nodes)
            .map(|i| (i, (i + 1) % nodes))
            .filter(|(i, j)| i != j)
            .collect();
        Self::from_edges(nodes, &edges).expect("cycle edges are in range")
    }

    pub fn path(nodes: usize) -> Self {
        let edges: Vec<_> = (1..nodes).map(|i| (i - 1, i)).collect();
        Self::from_edges(nodes, &edges).expect("path edges are in range")
    }

    pub fn complete(nodes: usize) -> Self {
        let edges: Vec<_> = (0..nodes)
            .flat_map(|i| (i + 1..nodes).map(move |j| (i, j)))
            .collect();
        Self::from_edges(nodes, &edges).expect("complete edges are in range")
    }

    /// Node 0 is the hub.
    pub fn star(nodes: usize) -> Self {
        let edges: Vec<_> = (1..nodes).map(|i| (0, i)).collect();
        Self::from_edges(nodes, &edges).expect("star edges are in range")
    }

    pub fn named(name: &str, nodes: usize) -> Result<Self, GraphError> {
        if nodes == 0 {
            return Err(GraphError::Empty);
        }
        match name {
            "cycle" => Ok(Self::cycle(nodes)),
            "path" => Ok(Self::path(nodes)),
            "complete" => Ok(Self::complete(nodes)),
            "star" => Ok(Self::star(nodes)),
            other => Err(GraphError::UnknownGenerator(other.to_string())),
        }
    }

    pub fn nodes(&self) -> usize {
        self.adj.len()
    }

    pub fn neighbors(&self, i: usize) -> &BTreeSet<usize> {
        &self.adj[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adj[i].len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i].contains(&j)
    }

    /// Each edge once, as `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.adj
            .iter()
            .enumerate()
            .flat_map(|(i, n)| n.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect()
    }

    pub fn is_connected(&self) -> bool {
        if self.adj.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.adj.len()];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &self.adj[i] {
                if !std::mem::replace(&mut seen[j], true) {
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}
