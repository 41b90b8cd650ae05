//! Built-in instances, the seeded QP generator and the problem-file format.
//!
//! Problem files are JSON documents with a `"schema": 1` field and a `"kind"`
//! of either `"block"` or `"consensus"`; see `docs/problem-format.md`.
//! Numbers are parsed with correct rounding, so a file describes the same
//! `f64` values on every platform.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributed::{metropolis_weights, ConsensusProblem, DistributedError};
use crate::graph::{Graph, GraphError};
use crate::operator::{Block, BlockProblem, ShapeError};
use crate::prox::{FunctionSpec, ProxFunction, Quadratic, Zero};

pub const SCHEMA_VERSION: u32 = 1;

/// Names accepted by [`builtin`].
pub const BUILTINS: [&str; 5] = [
    "example1",
    "qp-two-block",
    "random-qp",
    "consensus-ls-5cycle",
    "consensus-ls-5complete",
];

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported schema version {0} (expected {SCHEMA_VERSION})")]
    Schema(u32),
    #[error("{path}: {message}")]
    Validation { path: String, message: String },
    #[error("{0}")]
    Shape(#[from] ShapeError),
    #[error("{0}")]
    Consensus(#[from] DistributedError),
    #[error("unknown problem '{0}'")]
    Unknown(String),
    #[error("generator: {0}")]
    Generator(String),
    #[error("cannot serialize: {0}")]
    Unserializable(String),
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> ProblemError {
    ProblemError::Validation {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone)]
pub enum Problem {
    Block(BlockProblem),
    Consensus(ConsensusProblem),
}

impl Problem {
    pub fn kind(&self) -> &'static str {
        match self {
            Problem::Block(_) => "block",
            Problem::Consensus(_) => "consensus",
        }
    }
}

/// `min ½x₁²  s.t.  A₁[x₁;x₂] + A₂x₃ + A₃x₄ = 0` with `A₁ = 1₃1₂ᵀ`,
/// `A₂ = [1,1,2]ᵀ`, `A₃ = [1,2,2]ᵀ`. The unique solution is the origin, and
/// directly extended three-block ADMM diverges on it.
pub fn example1() -> BlockProblem {
    let blocks = vec![
        Block::new(
            DMatrix::from_element(3, 2, 1.0),
            Arc::new(Quadratic::new(vec![1.0, 0.0]).expect("valid curvature")),
        ),
        Block::new(
            DMatrix::from_column_slice(3, 1, &[1.0, 1.0, 2.0]),
            Arc::new(Zero::new(1)),
        ),
        Block::new(
            DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 2.0]),
            Arc::new(Zero::new(1)),
        ),
    ];
    BlockProblem::new(blocks, DVector::zeros(3)).expect("example dimensions are consistent")
}

/// A generated QP together with a KKT point `col{x*, y*}`.
#[derive(Debug, Clone)]
pub struct GeneratedQp {
    pub problem: BlockProblem,
    pub solution: DVector<f64>,
}

impl GeneratedQp {
    pub fn primal(&self) -> DVector<f64> {
        self.solution
            .rows(0, self.problem.primal_dim())
            .clone_owned()
    }
}

/// Uniform on `{lo, lo + 1/8, …, hi}`; dyadic values keep generated problems
/// bit-identical across platforms.
fn eighths(rng: &mut ChaCha8Rng, lo: i32, hi: i32) -> f64 {
    f64::from(rng.random_range(lo * 8..=hi * 8)) / 8.0
}

/// Strongly convex separable QP `f_i(u) = ½ Σ a(u − b)²` with a prescribed
/// KKT point: draw `A_i`, `a_i ∈ [1/2, 2]`, `x*`, `y*`, then set `c = Σ A_i x_i*`
/// and `b_i = x_i* + A_iᵀy* / a_i` so that `a_i(x_i* − b_i) + A_iᵀy* = 0`.
pub fn random_qp(
    q: usize,
    p: usize,
    dims: &[usize],
    seed: u64,
) -> Result<GeneratedQp, ProblemError> {
    if q == 0 || p == 0 {
        return Err(ProblemError::Generator(format!(
            "need q > 0 and p > 0, got q={q}, p={p}"
        )));
    }
    if dims.len() != q {
        return Err(ProblemError::Generator(format!(
            "expected {q} block dimensions, got {}",
            dims.len()
        )));
    }
    if dims.contains(&0) {
        return Err(ProblemError::Generator(
            "block dimensions must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y_star = DVector::from_fn(p, |_, _| eighths(&mut rng, -1, 1));
    let mut blocks = Vec::with_capacity(q);
    let mut c = DVector::zeros(p);
    let mut x_star = Vec::new();
    for &n in dims {
        // an all-zero block would decouple x_i from the constraint
        let a = loop {
            let a = DMatrix::from_fn(p, n, |_, _| eighths(&mut rng, -1, 1));
            if a.iter().any(|v| *v != 0.0) {
                break a;
            }
        };
        let curvature: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.random_range(4..=16)) / 8.0)
            .collect();
        let x = DVector::from_fn(n, |_, _| eighths(&mut rng, -1, 1));
        let aty = a.tr_mul(&y_star);
        let center: Vec<f64> = (0..n).map(|j| x[j] + aty[j] / curvature[j]).collect();
        c += &a * &x;
        x_star.extend(x.iter().copied());
        let f = Quadratic::with_center(curvature, center)
            .map_err(|e| ProblemError::Generator(e.to_string()))?;
        blocks.push(Block::new(a, Arc::new(f)));
    }
    let problem = BlockProblem::new(blocks, c)?;
    x_star.extend(y_star.iter().copied());
    Ok(GeneratedQp {
        problem,
        solution: DVector::from_vec(x_star),
    })
}

/// Agent `i = 1..m` holds `f_i(s) = ½(s − i)²`; the consensus minimizer is `(m + 1)/2`.
pub fn consensus_least_squares(graph: Graph) -> Result<ConsensusProblem, ProblemError> {
    let costs: Vec<Arc<dyn ProxFunction>> = (1..=graph.nodes())
        .map(|i| {
            Arc::new(Quadratic::with_center(vec![1.0], vec![i as f64]).expect("valid curvature"))
                as Arc<dyn ProxFunction>
        })
        .collect();
    Ok(ConsensusProblem::with_metropolis(graph, costs, 1)?)
}

/// Looks up a built-in by name. `seed` only affects `random-qp`.
pub fn builtin(name: &str, seed: u64) -> Result<Problem, ProblemError> {
    Ok(match name {
        "example1" => Problem::Block(example1()),
        "qp-two-block" => Problem::Block(random_qp(2, 3, &[2, 2], 7)?.problem),
        "random-qp" => Problem::Block(random_qp(3, 4, &[2, 2, 2], seed)?.problem),
        "consensus-ls-5cycle" => Problem::Consensus(consensus_least_squares(Graph::cycle(5))?),
        "consensus-ls-5complete" => {
            Problem::Consensus(consensus_least_squares(Graph::complete(5))?)
        }
        other => return Err(ProblemError::Unknown(other.to_string())),
    })
}

/// A built-in name, or else a path to a problem file.
pub fn resolve(name_or_path: &str, seed: u64) -> Result<Problem, ProblemError> {
    if BUILTINS.contains(&name_or_path) {
        builtin(name_or_path, seed)
    } else {
        load_problem(name_or_path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockEntry {
    /// Row-major.
    pub matrix: Vec<Vec<f64>>,
    pub function: FunctionSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GraphSpec {
    Generator {
        generator: String,
        nodes: usize,
    },
    Edges {
        nodes: usize,
        edges: Vec<(usize, usize)>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProblemBody {
    Block {
        blocks: Vec<BlockEntry>,
        c: Vec<f64>,
    },
    Consensus {
        local_dim: usize,
        graph: GraphSpec,
        /// Metropolis weights when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<Vec<f64>>>,
        costs: Vec<FunctionSpec>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemFile {
    pub schema: u32,
    #[serde(flatten)]
    pub body: ProblemBody,
}

fn matrix_from_rows(rows: &[Vec<f64>], path: &str) -> Result<DMatrix<f64>, ProblemError> {
    let Some(first) = rows.first() else {
        return Err(invalid(path, "matrix has no rows"));
    };
    let cols = first.len();
    if cols == 0 {
        return Err(invalid(path, "matrix has no columns"));
    }
    for (r, row) in rows.iter().enumerate() {
        if row.len() != cols {
            return Err(invalid(
                format!("{path}[{r}]"),
                format!("row has {} entries, expected {cols}", row.len()),
            ));
        }
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn build_function(spec: &FunctionSpec, path: &str) -> Result<Arc<dyn ProxFunction>, ProblemError> {
    spec.build().map_err(|e| invalid(path, e.to_string()))
}

impl ProblemFile {
    pub fn into_problem(self) -> Result<Problem, ProblemError> {
        if self.schema != SCHEMA_VERSION {
            return Err(ProblemError::Schema(self.schema));
        }
        match self.body {
            ProblemBody::Block { blocks, c } => {
                let mut built = Vec::with_capacity(blocks.len());
                for (i, b) in blocks.iter().enumerate() {
                    let m = matrix_from_rows(&b.matrix, &format!("blocks[{i}].matrix"))?;
                    let f = build_function(&b.function, &format!("blocks[{i}].function"))?;
                    built.push(Block::new(m, f));
                }
                BlockProblem::new(built, DVector::from_vec(c))
                    .map(Problem::Block)
                    .map_err(|e| {
                        let path = match &e {
                            ShapeError::RowMismatch { block, .. } => {
                                format!("blocks[{block}].matrix")
                            }
                            ShapeError::ColumnMismatch { block, .. }
                            | ShapeError::EmptyBlock { block } => {
                                format!("blocks[{block}]")
                            }
                            _ => "blocks".into(),
                        };
                        invalid(path, e.to_string())
                    })
            }
            ProblemBody::Consensus {
                local_dim,
                graph,
                weights,
                costs,
            } => {
                let g = match &graph {
                    GraphSpec::Generator { generator, nodes } => Graph::named(generator, *nodes),
                    GraphSpec::Edges { nodes, edges } => Graph::from_edges(*nodes, edges),
                }
                .map_err(|e: GraphError| invalid("graph", e.to_string()))?;
                let w = match &weights {
                    Some(rows) => matrix_from_rows(rows, "weights")?,
                    None => metropolis_weights(&g),
                };
                let mut fs = Vec::with_capacity(costs.len());
                for (i, spec) in costs.iter().enumerate() {
                    fs.push(build_function(spec, &format!("costs[{i}]"))?);
                }
                ConsensusProblem::new(w, g, fs, local_dim)
                    .map(Problem::Consensus)
                    .map_err(|e| {
                        let path = match &e {
                            DistributedError::Assumption(_) => "weights".to_string(),
                            DistributedError::Dimension { agent, .. } => format!("costs[{agent}]"),
                            _ => "costs".into(),
                        };
                        invalid(path, e.to_string())
                    })
            }
        }
    }

    pub fn from_problem(problem: &Problem) -> Result<Self, ProblemError> {
        let spec_of = |f: &Arc<dyn ProxFunction>, path: String| {
            f.spec().ok_or_else(|| {
                ProblemError::Unserializable(format!("{path} has no file representation"))
            })
        };
        let body = match problem {
            Problem::Block(p) => ProblemBody::Block {
                blocks: p
                    .blocks()
                    .iter()
                    .enumerate()
                    .map(|(i, b)| {
                        Ok(BlockEntry {
                            matrix: matrix_to_rows(&b.matrix),
                            function: spec_of(&b.function, format!("blocks[{i}].function"))?,
                        })
                    })
                    .collect::<Result<_, ProblemError>>()?,
                c: p.c().iter().copied().collect(),
            },
            Problem::Consensus(p) => ProblemBody::Consensus {
                local_dim: p.local_dim(),
                graph: GraphSpec::Edges {
                    nodes: p.agents(),
                    edges: p.graph().edges(),
                },
                weights: Some(matrix_to_rows(p.weights())),
                costs: p
                    .costs()
                    .iter()
                    .enumerate()
                    .map(|(i, f)| spec_of(f, format!("costs[{i}]")))
                    .collect::<Result<_, _>>()?,
            },
        };
        Ok(Self {
            schema: SCHEMA_VERSION,
            body,
        })
    }
}

// Parsing goes through these kind-specific mirrors of `ProblemFile` instead
// of the flattened enum so that serde reports errors at the offending token.
#[derive(Deserialize)]
struct Header {
    schema: u32,
    kind: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockDoc {
    #[allow(dead_code)]
    schema: u32,
    #[allow(dead_code)]
    kind: String,
    blocks: Vec<BlockEntry>,
    c: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConsensusDoc {
    #[allow(dead_code)]
    schema: u32,
    #[allow(dead_code)]
    kind: String,
    local_dim: usize,
    graph: GraphSpec,
    #[serde(default)]
    weights: Option<Vec<Vec<f64>>>,
    costs: Vec<FunctionSpec>,
}

fn from_json<'a, T: Deserialize<'a>>(text: &'a str) -> Result<T, ProblemError> {
    serde_json::from_str(text).map_err(|e| ProblemError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub fn parse_problem(text: &str) -> Result<Problem, ProblemError> {
    let header: Header = from_json(text)?;
    if header.schema != SCHEMA_VERSION {
        return Err(ProblemError::Schema(header.schema));
    }
    let body = match header.kind.as_str() {
        "block" => {
            let d: BlockDoc = from_json(text)?;
            ProblemBody::Block {
                blocks: d.blocks,
                c: d.c,
            }
        }
        "consensus" => {
            let d: ConsensusDoc = from_json(text)?;
            ProblemBody::Consensus {
                local_dim: d.local_dim,
                graph: d.graph,
                weights: d.weights,
                costs: d.costs,
            }
        }
        other => {
            return Err(invalid(
                "kind",
                format!("unknown kind '{other}' (expected block or consensus)"),
            ))
        }
    };
    ProblemFile {
        schema: header.schema,
        body,
    }
    .into_problem()
}

pub fn load_problem(path: impl AsRef<Path>) -> Result<Problem, ProblemError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ProblemError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_problem(&text)
}

pub fn serialize_problem(problem: &Problem) -> Result<String, ProblemError> {
    let file = ProblemFile::from_problem(problem)?;
    let mut s = serde_json::to_string_pretty(&file).expect("problem files always serialize");
    s.push('\n');
    Ok(s)
}
