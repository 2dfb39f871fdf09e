//! Linear assignment and matched averaging of inference-head neurons.
//!
//! Local heads live on `|D_m| * E` inputs; [`embed_local_head`] lifts them to
//! the global `D * E` input layout by zero-filling unowned feature columns.
//! [`match_client`] then aligns a client's hidden neurons with the global
//! head's neurons by solving a minimum-cost assignment over squared parameter
//! distances, and [`update_global_head`] rebuilds the global head as the
//! per-neuron mean of everything assigned to it. Heads of different hidden
//! widths are reconciled by padding the cost matrix with dummy rows; dummy
//! rows carry uniform zero cost so they never distort the assignment of real
//! neurons, and they contribute nothing to the averaged model.

use crate::data::FeatureSchema;
use crate::error::{Error, Result};
use crate::nn::{Activation, DenseLayer, Mlp};

/// Square, finite, non-negative assignment costs.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    size: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let size = rows.len();
        let mut entries = Vec::with_capacity(size * size);
        for row in &rows {
            if row.len() != size {
                return Err(Error::invalid(format!(
                    "cost matrix is not square: row of {} in a matrix of {size}",
                    row.len()
                )));
            }
            for &v in row {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::invalid(format!("cost entry {v} is not usable")));
                }
                entries.push(v);
            }
        }
        Ok(CostMatrix { size, entries })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.size + col]
    }
}

/// Minimum-cost perfect matching.
///
/// Returns the row-to-column assignment and its total cost. Among equally
/// cheap matchings the lexicographically smallest assignment wins: row 0
/// takes the lowest column compatible with optimality, then row 1, and so on.
pub fn hungarian(cost: &CostMatrix) -> (Vec<usize>, f64) {
    let n = cost.size();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let base = solve_square(n, &|i, j| cost.get(i, j));
    let optimal = assignment_cost(cost, &base);
    let eps = 1e-9 * (1.0 + optimal.abs());

    let mut assignment = vec![usize::MAX; n];
    let mut col_used = vec![false; n];
    let mut fixed = 0.0;
    for row in 0..n {
        let mut chosen = None;
        for col in 0..n {
            if col_used[col] {
                continue;
            }
            let completion = best_completion(cost, row, col, &col_used);
            if fixed + cost.get(row, col) + completion <= optimal + eps {
                chosen = Some(col);
                break;
            }
        }
        let col = chosen.expect("verified optimal completion exists");
        assignment[row] = col;
        col_used[col] = true;
        fixed += cost.get(row, col);
    }
    let total = assignment_cost(cost, &assignment);
    (assignment, total)
}

fn assignment_cost(cost: &CostMatrix, assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(r, &c)| cost.get(r, c))
        .sum()
}

/// Cheapest way to finish rows `row+1..n` after forcing `row -> col`.
fn best_completion(cost: &CostMatrix, row: usize, col: usize, col_used: &[bool]) -> f64 {
    let n = cost.size();
    let rows: Vec<usize> = (row + 1..n).collect();
    let cols: Vec<usize> = (0..n).filter(|&c| !col_used[c] && c != col).collect();
    if rows.is_empty() {
        return 0.0;
    }
    let sub = solve_square(rows.len(), &|i, j| cost.get(rows[i], cols[j]));
    sub.iter()
        .enumerate()
        .map(|(i, &j)| cost.get(rows[i], cols[j]))
        .sum()
}

/// Shortest-augmenting-path assignment solver with row/column potentials,
/// O(n^3). Column `n` acts as the sentinel start of each augmenting search.
fn solve_square(n: usize, cost: &dyn Fn(usize, usize) -> f64) -> Vec<usize> {
    let mut owner: Vec<Option<usize>> = vec![None; n + 1];
    let mut row_pot = vec![0.0; n];
    let mut col_pot = vec![0.0; n + 1];

    for row in 0..n {
        owner[n] = Some(row);
        let mut j0 = n;
        let mut min_reduced = vec![f64::INFINITY; n];
        let mut came_from = vec![n; n];
        let mut visited = vec![false; n + 1];

        loop {
            visited[j0] = true;
            let i0 = owner[j0].expect("visited columns own a row");
            let mut delta = f64::INFINITY;
            let mut j1 = n;
            for j in 0..n {
                if visited[j] {
                    continue;
                }
                let reduced = cost(i0, j) - row_pot[i0] - col_pot[j];
                if reduced < min_reduced[j] {
                    min_reduced[j] = reduced;
                    came_from[j] = j0;
                }
                if min_reduced[j] < delta {
                    delta = min_reduced[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if visited[j] {
                    row_pot[owner[j].expect("visited columns own a row")] += delta;
                    col_pot[j] -= delta;
                } else if j < n {
                    min_reduced[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0].is_none() {
                break;
            }
        }
        // Augment backwards along the alternating path.
        loop {
            let j1 = came_from[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == n {
                break;
            }
        }
    }

    let mut assignment = vec![0; n];
    for (j, slot) in owner.iter().enumerate().take(n) {
        if let Some(i) = slot {
            assignment[*i] = j;
        }
    }
    assignment
}

/// Hard assignment of a client's hidden neurons onto global head neurons.
///
/// Acts as the row-stochastic matching matrix with exactly one unit entry per
/// row; rows cover the client's real neurons only, so the matrix has shape
/// `local_width x global_width` and is injective.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchingPattern {
    client_id: usize,
    assignment: Vec<usize>,
    global_width: usize,
}

impl MatchingPattern {
    pub fn new(client_id: usize, assignment: Vec<usize>, global_width: usize) -> Result<Self> {
        let mut seen = vec![false; global_width];
        for &g in &assignment {
            if g >= global_width {
                return Err(Error::invalid(format!(
                    "assignment target {g} out of range for global width {global_width}"
                )));
            }
            if seen[g] {
                return Err(Error::invalid(format!(
                    "assignment maps two local neurons onto global neuron {g}"
                )));
            }
            seen[g] = true;
        }
        Ok(MatchingPattern {
            client_id,
            assignment,
            global_width,
        })
    }

    /// The pattern mapping local neuron `i` to global neuron `i`.
    pub fn identity(client_id: usize, local_width: usize, global_width: usize) -> Result<Self> {
        if local_width > global_width {
            return Err(Error::Capacity(format!(
                "local width {local_width} exceeds global width {global_width}"
            )));
        }
        Self::new(client_id, (0..local_width).collect(), global_width)
    }

    pub fn client_id(&self) -> usize {
        self.client_id
    }

    /// Local neuron index -> global neuron index.
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn local_width(&self) -> usize {
        self.assignment.len()
    }

    pub fn global_width(&self) -> usize {
        self.global_width
    }

    /// Dense `local_width x global_width` matrix form; rows sum to one.
    pub fn to_matrix(&self) -> Vec<Vec<f64>> {
        self.assignment
            .iter()
            .map(|&g| {
                let mut row = vec![0.0; self.global_width];
                row[g] = 1.0;
                row
            })
            .collect()
    }
}

/// The server-side inference head over all `D` embeddings, together with how
/// many local neurons were averaged into each global neuron at the last
/// update.
#[derive(Debug, Clone)]
pub struct GlobalHead {
    mlp: Mlp,
    match_counts: Vec<usize>,
}

impl GlobalHead {
    /// All-zero head of the given hidden width; the starting point before any
    /// matching round has run.
    pub fn zeros(schema: &FeatureSchema, hidden_width: usize) -> Result<Self> {
        let mlp = Mlp::new(vec![
            DenseLayer::zeros(schema.global_head_input(), hidden_width, Activation::Relu),
            DenseLayer::zeros(hidden_width, schema.num_classes(), Activation::Softmax),
        ])?;
        Ok(GlobalHead {
            match_counts: vec![0; hidden_width],
            mlp,
        })
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        check_head_shape(&mlp)?;
        let hidden = mlp.layers()[0].out_dim();
        Ok(GlobalHead {
            match_counts: vec![0; hidden],
            mlp,
        })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn hidden_width(&self) -> usize {
        self.mlp.layers()[0].out_dim()
    }

    /// Real local neurons averaged into each global neuron at the last
    /// [`update_global_head`] call.
    pub fn match_counts(&self) -> &[usize] {
        &self.match_counts
    }
}

fn check_head_shape(head: &Mlp) -> Result<()> {
    if head.layers().len() != 2 {
        return Err(Error::shape(format!(
            "inference head must have exactly one hidden layer, got {} layers",
            head.layers().len()
        )));
    }
    Ok(())
}

/// Lift a local head onto the global `D * E` input layout: hidden-layer
/// columns of owned blocks land at their global positions, unowned block
/// columns are zero, and every later layer is untouched.
pub fn embed_local_head(head: &Mlp, feature_set: &[usize], schema: &FeatureSchema) -> Result<Mlp> {
    let e = schema.embed_width();
    if head.in_dim() != feature_set.len() * e {
        return Err(Error::shape(format!(
            "head input width {} does not match {} owned blocks of embedding width {e}",
            head.in_dim(),
            feature_set.len()
        )));
    }
    if feature_set.iter().any(|&d| d >= schema.num_blocks()) {
        return Err(Error::shape("feature set names a block outside the schema"));
    }
    let first = &head.layers()[0];
    let global_in = schema.global_head_input();
    let mut embedded = DenseLayer::zeros(global_in, first.out_dim(), first.activation());
    for r in 0..first.out_dim() {
        let src = first.weight_row(r).to_vec();
        let dst = embedded.weight_row_mut(r);
        for (pos, &d) in feature_set.iter().enumerate() {
            dst[d * e..(d + 1) * e].copy_from_slice(&src[pos * e..(pos + 1) * e]);
        }
    }
    embedded.bias_mut().copy_from_slice(first.bias());
    let mut layers = vec![embedded];
    layers.extend(head.layers()[1..].iter().cloned());
    Mlp::new(layers)
}

/// Inverse of [`embed_local_head`]: keep only the columns of the owned blocks.
pub fn project_local_head(
    embedded: &Mlp,
    feature_set: &[usize],
    schema: &FeatureSchema,
) -> Result<Mlp> {
    let e = schema.embed_width();
    if embedded.in_dim() != schema.global_head_input() {
        return Err(Error::shape(format!(
            "embedded head input width {} does not span all {} blocks",
            embedded.in_dim(),
            schema.num_blocks()
        )));
    }
    let first = &embedded.layers()[0];
    let local_in = feature_set.len() * e;
    let mut projected = DenseLayer::zeros(local_in, first.out_dim(), first.activation());
    for r in 0..first.out_dim() {
        let src = first.weight_row(r).to_vec();
        let dst = projected.weight_row_mut(r);
        for (pos, &d) in feature_set.iter().enumerate() {
            dst[pos * e..(pos + 1) * e].copy_from_slice(&src[d * e..(d + 1) * e]);
        }
    }
    projected.bias_mut().copy_from_slice(first.bias());
    let mut layers = vec![projected];
    layers.extend(embedded.layers()[1..].iter().cloned());
    Mlp::new(layers)
}

/// A hidden neuron's identity for matching: fan-in weights, bias, and fan-out
/// weights concatenated.
fn neuron_vector(head: &Mlp, neuron: usize) -> Vec<f64> {
    let first = &head.layers()[0];
    let second = &head.layers()[1];
    let mut v = Vec::with_capacity(first.in_dim() + 1 + second.out_dim());
    v.extend_from_slice(first.weight_row(neuron));
    v.push(first.bias()[neuron]);
    for r in 0..second.out_dim() {
        v.push(second.weights()[r * second.in_dim() + neuron]);
    }
    v
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Match one client's (embedded) head neurons onto the global head.
///
/// The cost of pairing local neuron `i` with global neuron `j` is the squared
/// Euclidean distance between their parameter vectors. When the local head is
/// narrower than the global one, the matrix is padded with dummy rows of
/// uniform zero cost; their assignments are dropped from the returned pattern.
pub fn match_client(
    global: &GlobalHead,
    embedded_head: &Mlp,
    client_id: usize,
) -> Result<MatchingPattern> {
    check_head_shape(embedded_head)?;
    let h_local = embedded_head.layers()[0].out_dim();
    let h_global = global.hidden_width();
    if h_local > h_global {
        return Err(Error::Capacity(format!(
            "client {client_id} head has {h_local} hidden neurons, global head only {h_global}"
        )));
    }
    if embedded_head.in_dim() != global.mlp.in_dim()
        || embedded_head.out_dim() != global.mlp.out_dim()
    {
        return Err(Error::shape(
            "embedded head and global head disagree on input or class width",
        ));
    }

    let global_vecs: Vec<Vec<f64>> = (0..h_global)
        .map(|j| neuron_vector(&global.mlp, j))
        .collect();
    let mut rows = Vec::with_capacity(h_global);
    for i in 0..h_local {
        let local_vec = neuron_vector(embedded_head, i);
        rows.push(
            global_vecs
                .iter()
                .map(|g| squared_distance(&local_vec, g))
                .collect(),
        );
    }
    for _ in h_local..h_global {
        rows.push(vec![0.0; h_global]);
    }
    let cost = CostMatrix::new(rows)?;
    let (assignment, _) = hungarian(&cost);
    MatchingPattern::new(client_id, assignment[..h_local].to_vec(), h_global)
}

/// Distance between the pattern-selected global neurons and one client's
/// embedded head, including the shared output bias. This is the per-client
/// term of the matching objective.
pub fn consensus_distance(
    global: &GlobalHead,
    pattern: &MatchingPattern,
    embedded_head: &Mlp,
) -> f64 {
    if pattern.local_width() == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for (i, &j) in pattern.assignment().iter().enumerate() {
        total += squared_distance(
            &neuron_vector(embedded_head, i),
            &neuron_vector(&global.mlp, j),
        );
    }
    total += squared_distance(
        embedded_head.layers()[1].bias(),
        global.mlp.layers()[1].bias(),
    );
    total
}

/// Sum of [`consensus_distance`] over all clients.
pub fn matching_objective(
    global: &GlobalHead,
    patterns: &[MatchingPattern],
    embedded_heads: &[Mlp],
) -> f64 {
    patterns
        .iter()
        .zip(embedded_heads)
        .map(|(p, h)| consensus_distance(global, p, h))
        .sum()
}

/// Rebuild the global head given fixed matching patterns: each global neuron
/// becomes the arithmetic mean of the real local neurons assigned to it, the
/// output bias becomes the mean of the participating clients' output biases,
/// and global neurons nothing was assigned to keep their previous parameters.
///
/// This is the exact minimizer of the squared-distance matching objective
/// over the global-head parameters.
pub fn update_global_head(
    patterns: &[MatchingPattern],
    embedded_heads: &[Mlp],
    prev: &GlobalHead,
) -> Result<GlobalHead> {
    if patterns.len() != embedded_heads.len() {
        return Err(Error::invalid(format!(
            "{} patterns for {} heads",
            patterns.len(),
            embedded_heads.len()
        )));
    }
    let h_global = prev.hidden_width();
    let in_dim = prev.mlp.in_dim();
    let classes = prev.mlp.out_dim();

    let mut neuron_sums = vec![vec![0.0; in_dim + 1 + classes]; h_global];
    let mut counts = vec![0usize; h_global];
    let mut bias_sum = vec![0.0; classes];
    let mut contributing = 0usize;

    for (pattern, head) in patterns.iter().zip(embedded_heads) {
        check_head_shape(head)?;
        if pattern.global_width() != h_global {
            return Err(Error::shape("pattern global width disagrees with head"));
        }
        if head.in_dim() != in_dim || head.out_dim() != classes {
            return Err(Error::shape("embedded head shape disagrees with global head"));
        }
        if pattern.local_width() != head.layers()[0].out_dim() {
            return Err(Error::shape("pattern rows disagree with head hidden width"));
        }
        if pattern.local_width() == 0 {
            continue;
        }
        for (i, &j) in pattern.assignment().iter().enumerate() {
            for (acc, v) in neuron_sums[j].iter_mut().zip(neuron_vector(head, i)) {
                *acc += v;
            }
            counts[j] += 1;
        }
        for (acc, v) in bias_sum.iter_mut().zip(head.layers()[1].bias()) {
            *acc += v;
        }
        contributing += 1;
    }

    let mut first = prev.mlp.layers()[0].clone();
    let mut second = prev.mlp.layers()[1].clone();
    for j in 0..h_global {
        if counts[j] == 0 {
            continue;
        }
        let inv = 1.0 / counts[j] as f64;
        let neuron = neuron_sums[j].clone();
        for (dst, v) in first.weight_row_mut(j).iter_mut().zip(&neuron[..in_dim]) {
            *dst = v * inv;
        }
        first.bias_mut()[j] = neuron[in_dim] * inv;
        for r in 0..classes {
            let idx = r * h_global + j;
            second.weights_mut()[idx] = neuron[in_dim + 1 + r] * inv;
        }
    }
    if contributing > 0 {
        let inv = 1.0 / contributing as f64;
        for (dst, v) in second.bias_mut().iter_mut().zip(&bias_sum) {
            *dst = v * inv;
        }
    }

    Ok(GlobalHead {
        mlp: Mlp::new(vec![first, second])?,
        match_counts: counts,
    })
}
