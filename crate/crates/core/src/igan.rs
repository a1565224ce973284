//! Graph reasoning over candidate moments: a fixed-graph graph-convolution
//! layer and the iterative graph adjustment stack that learns the adjacency
//! matrix jointly with the node features.

use crate::error::{Error, Result};
use crate::lang::DynamicFilter;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One graph convolution H = relu(G X W) over a fixed adjacency.
pub struct GcnLayer {
    pub adjacency: Var,
    pub weight: Var,
}

impl GcnLayer {
    pub fn forward(&self, tape: &mut Tape, nodes: Var) -> Result<Var> {
        gcn_forward(tape, self.adjacency, nodes, self.weight)
    }
}

/// H = relu(G X W).
pub fn gcn_forward(tape: &mut Tape, adjacency: Var, nodes: Var, weight: Var) -> Result<Var> {
    let mixed = tape.matmul(adjacency, nodes)?;
    let projected = tape.matmul(mixed, weight)?;
    Ok(tape.relu(projected))
}

/// Learnable weights of one adjustment cell. Cells in a stack do not share
/// weights.
pub struct IganCell {
    /// `[d, d]` residual projection.
    pub w_residual: Var,
    /// `[d, d]` output projection.
    pub w_output: Var,
}

/// Adjacency/node-feature pair evolved by the adjustment recurrence.
pub struct IganState {
    pub adjacency: Var,
    pub nodes: Var,
    pub step: usize,
}

/// One adjustment step:
///   R = l2_normalize_rows(signed_sqrt(X W_r X^T))
///   G' = tanh(G + R)
///   X' = relu(G' X_0 W_o)
/// Note the node update reads the original moment features X_0, not the
/// previous step's nodes.
pub fn igan_cell_forward(
    tape: &mut Tape,
    state: &IganState,
    initial_nodes: Var,
    cell: &IganCell,
) -> Result<IganState> {
    let projected = tape.matmul(state.nodes, cell.w_residual)?;
    let nodes_t = tape.transpose(state.nodes)?;
    let correlation = tape.matmul(projected, nodes_t)?;
    let rooted = tape.signed_sqrt(correlation);
    let residual = tape.l2_normalize_rows(rooted)?;
    let accumulated = tape.add(state.adjacency, residual)?;
    let adjacency = tape.tanh(accumulated);
    let mixed = tape.matmul(adjacency, initial_nodes)?;
    let projected_out = tape.matmul(mixed, cell.w_output)?;
    let nodes = tape.relu(projected_out);
    Ok(IganState { adjacency, nodes, step: state.step + 1 })
}

/// Run the full stack from G_0 = diag_value * I, returning the final state.
pub fn igan_stack_forward(
    tape: &mut Tape,
    initial_nodes: Var,
    cells: &[IganCell],
    diag_value: f64,
) -> Result<IganState> {
    if cells.is_empty() {
        return Err(Error::Config("the adjustment stack needs at least one cell".into()));
    }
    let n = tape.shape(initial_nodes)[0];
    let mut diag = vec![0.0; n * n];
    for i in 0..n {
        diag[i * n + i] = diag_value;
    }
    let g0 = tape.constant(Tensor::from_vec(vec![n, n], diag)?);
    let mut state = IganState { adjacency: g0, nodes: initial_nodes, step: 0 };
    for cell in cells {
        state = igan_cell_forward(tape, &state, initial_nodes, cell)?;
    }
    Ok(state)
}

/// Matching probabilities, one per candidate moment.
pub struct MatchingScores {
    /// `[N, 1]` pre-sigmoid logits: the mean over words of the node/filter
    /// inner products.
    pub logits: Var,
    /// `[N, 1]` sigmoid probabilities in (0, 1).
    pub probs: Var,
}

/// Convolve the dynamic filter with the final node features: logit_i is the
/// word-mean of <node_i, filter column w>, squashed by a sigmoid.
pub fn score_moments(tape: &mut Tape, nodes: Var, filter: &DynamicFilter) -> Result<MatchingScores> {
    let per_word = tape.matmul(nodes, filter.gamma)?;
    let sums = tape.row_sums(per_word)?;
    let logits = tape.scale(sums, 1.0 / filter.words as f64);
    let probs = tape.sigmoid(logits);
    Ok(MatchingScores { logits, probs })
}
