//! Dimension- and locality-adaptive sparse-grid interpolation on nested
//! Chebyshev-Gauss-Lobatto points, with the quadrature rule it induces.
//!
//! Level `0` is the single point `0.5`; level `i ≥ 1` has `2^i + 1` points
//! `x_j = ½(1 − cos(πj/2^i))`, so every level contains the previous one.

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Highest level per dimension the grid will refine to.
pub const MAX_LEVEL: u8 = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparseGridError {
    #[error("tolerance must be positive and finite, got {0}")]
    BadTolerance(f64),
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("weight functions supplied for {got} dimensions, grid has {expected}")]
    WeightDimension { expected: usize, got: usize },
    #[error("point has {got} coordinates, grid has {expected}")]
    PointDimension { expected: usize, got: usize },
}

/// Number of points at a level.
pub fn level_size(level: u8) -> usize {
    if level == 0 {
        1
    } else {
        (1usize << level) + 1
    }
}

/// All points of a level, ascending.
pub fn cgl_nodes(level: u8) -> Vec<f64> {
    level_nodes(level).to_vec()
}

fn level_nodes(level: u8) -> &'static [f64] {
    static TABLE: [OnceLock<Vec<f64>>; MAX_LEVEL as usize + 2] = [const { OnceLock::new() }; MAX_LEVEL as usize + 2];
    TABLE[level as usize].get_or_init(|| {
        if level == 0 {
            return vec![0.5];
        }
        let m = 1usize << level;
        (0..=m).map(|j| node(level, j, m)).collect()
    })
}

fn node(level: u8, j: usize, m: usize) -> f64 {
    debug_assert!(level > 0);
    // exact midpoint and ends avoid rounding drift across levels
    if 2 * j == m {
        0.5
    } else if j == 0 {
        0.0
    } else if j == m {
        1.0
    } else {
        0.5 * (1.0 - (PI * j as f64 / m as f64).cos())
    }
}

/// Point indices (within the level) that are new at this level.
pub fn new_indices(level: u8) -> Vec<usize> {
    match level {
        0 => vec![0],
        1 => vec![0, 2],
        _ => (1..level_size(level)).step_by(2).collect(),
    }
}

/// Lagrange cardinal polynomial `j` on the points of `level`, barycentric form.
pub fn basis_eval(level: u8, j: usize, x: f64) -> f64 {
    if level == 0 {
        return 1.0;
    }
    let m = 1usize << level;
    let weight = |k: usize| {
        let s = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
        if k == 0 || k == m {
            0.5 * s
        } else {
            s
        }
    };
    let nodes = level_nodes(level);
    let mut denom = 0.0;
    let mut numer = 0.0;
    for (k, &xk) in nodes.iter().enumerate() {
        let diff = x - xk;
        if diff == 0.0 {
            return if k == j { 1.0 } else { 0.0 };
        }
        let t = weight(k) / diff;
        denom += t;
        if k == j {
            numer = t;
        }
    }
    numer / denom
}

/// All cardinal polynomials of `level` at `x`.
fn basis_all(level: u8, x: f64) -> Vec<f64> {
    let m = level_size(level);
    if level == 0 {
        return vec![1.0];
    }
    let nodes = level_nodes(level);
    if let Some(k) = nodes.iter().position(|&v| v == x) {
        let mut out = vec![0.0; m];
        out[k] = 1.0;
        return out;
    }
    let mut terms: Vec<f64> = (0..m)
        .map(|k| {
            let s = if k % 2 == 0 { 1.0 } else { -1.0 };
            let w = if k == 0 || k == m - 1 { 0.5 * s } else { s };
            w / (x - nodes[k])
        })
        .collect();
    let denom: f64 = terms.iter().sum();
    for t in terms.iter_mut() {
        *t /= denom;
    }
    terms
}

/// Neighbor rule for a refinement `j_child` in subgrid `parent_index + e_k`
/// relative to the point `j_parent` of subgrid `parent_index`.
pub fn is_point_neighbor(parent_index: &[u8], j_parent: &[usize], j_child: &[usize], k: usize) -> bool {
    for kk in 0..parent_index.len() {
        if kk != k && j_parent[kk] != j_child[kk] {
            return false;
        }
    }
    let level = parent_index[k];
    if level <= 1 {
        return true;
    }
    let m = 1usize << level;
    let jp = j_parent[k];
    let x_child = node(level + 1, j_child[k], 2 * m);
    let left = jp > 0 && node(level, jp - 1, m) < x_child && x_child < node(level, jp, m);
    let right = jp < m && node(level, jp, m) < x_child && x_child < node(level, jp + 1, m);
    left || right
}

/// New points of level `level + 1` that neighbor point `j` of `level` in one dimension.
fn neighbor_children(level: u8, j: usize) -> Vec<usize> {
    if level <= 1 {
        return new_indices(level + 1);
    }
    let top = 1usize << (level + 1);
    [2 * j as isize - 1, 2 * j as isize + 1]
        .into_iter()
        .filter(|&c| c >= 1 && (c as usize) < top)
        .map(|c| c as usize)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    /// Point index within each dimension's level.
    pub node: Vec<usize>,
    pub x: Vec<f64>,
    pub value: f64,
    pub surplus: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subgrid {
    pub index: Vec<u8>,
    /// Only the refinements that were active and therefore evaluated.
    pub points: Vec<GridPoint>,
}

impl Subgrid {
    fn level_sum(&self) -> usize {
        self.index.iter().map(|&i| i as usize).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseGridConfig {
    pub tol: f64,
    /// Error cutoff that marks a point's neighbors for refinement; defaults to `tol`.
    pub tau: Option<f64>,
    pub max_nodes: usize,
}

impl SparseGridConfig {
    pub fn new(tol: f64) -> Self {
        Self {
            tol,
            tau: None,
            max_nodes: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrid {
    dim: usize,
    tol: f64,
    tau: f64,
    subgrids: Vec<Subgrid>,
    evaluations: usize,
    budget_exceeded: bool,
    lookup: HashMap<Vec<u8>, usize>,
}

/// Flat record of the serialized layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    pub index: Vec<u8>,
    pub x: Vec<f64>,
    pub surplus: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDump {
    pub dim: usize,
    pub tol: f64,
    pub tau: f64,
    pub evaluations: usize,
    pub budget_exceeded: bool,
    pub records: Vec<GridRecord>,
}

impl SparseGrid {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn subgrids(&self) -> &[Subgrid] {
        &self.subgrids
    }

    /// Number of function evaluations, including fringe points never accepted.
    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    /// Number of points in accepted subgrids.
    pub fn node_count(&self) -> usize {
        self.subgrids.iter().map(|s| s.points.len()).sum()
    }

    pub fn budget_exceeded(&self) -> bool {
        self.budget_exceeded
    }

    pub fn contains(&self, index: &[u8]) -> bool {
        self.lookup.contains_key(index)
    }

    pub fn points(&self) -> impl Iterator<Item = (&[u8], &GridPoint)> {
        self.subgrids
            .iter()
            .flat_map(|s| s.points.iter().map(move |p| (s.index.as_slice(), p)))
    }

    /// Whether every accepted index has all its backward neighbors accepted.
    pub fn is_admissible(&self) -> bool {
        self.subgrids.iter().all(|s| {
            (0..self.dim).all(|k| {
                if s.index[k] == 0 {
                    return true;
                }
                let mut back = s.index.clone();
                back[k] -= 1;
                self.lookup.contains_key(&back)
            })
        })
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64, SparseGridError> {
        if x.len() != self.dim {
            return Err(SparseGridError::PointDimension {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(self.evaluate_unchecked(x))
    }

    fn evaluate_unchecked(&self, x: &[f64]) -> f64 {
        let mut cache: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; MAX_LEVEL as usize + 1]; self.dim];
        let mut res = 0.0;
        for sg in &self.subgrids {
            for k in 0..self.dim {
                let level = sg.index[k];
                if cache[k][level as usize].is_none() {
                    cache[k][level as usize] = Some(basis_all(level, x[k]));
                }
            }
            let basis: Vec<&[f64]> = (0..self.dim)
                .map(|k| cache[k][sg.index[k] as usize].as_deref().expect("filled above"))
                .collect();
            for p in &sg.points {
                let mut psi = 1.0;
                for k in 0..self.dim {
                    psi *= basis[k][p.node[k]];
                    if psi == 0.0 {
                        break;
                    }
                }
                res += p.surplus * psi;
            }
        }
        res
    }

    /// Refinements of `index` with at least one parent point whose error exceeds the cutoff.
    fn active_set(&self, index: &[u8]) -> HashSet<Vec<usize>> {
        let mut active = HashSet::new();
        for k in 0..self.dim {
            if index[k] == 0 {
                continue;
            }
            let mut back = index.to_vec();
            back[k] -= 1;
            let Some(&pos) = self.lookup.get(&back) else {
                continue;
            };
            for p in &self.subgrids[pos].points {
                if p.error <= self.tau {
                    continue;
                }
                for jc in neighbor_children(back[k], p.node[k]) {
                    let mut j = p.node.clone();
                    j[k] = jc;
                    active.insert(j);
                }
            }
        }
        active
    }

    fn expand<F, E>(&mut self, f: &mut F, ferr: &mut E, index: Vec<u8>) -> Subgrid
    where
        F: FnMut(&[f64]) -> f64,
        E: FnMut(f64, f64, &[f64]) -> f64,
    {
        let root = index.iter().all(|&i| i == 0);
        let per_dim: Vec<Vec<usize>> = index.iter().map(|&i| new_indices(i)).collect();
        let active = if root { HashSet::new() } else { self.active_set(&index) };
        let mut points = Vec::new();
        let mut j = vec![0usize; self.dim];
        let mut counters = vec![0usize; self.dim];
        'outer: loop {
            for k in 0..self.dim {
                j[k] = per_dim[k][counters[k]];
            }
            if root || active.contains(&j) {
                let x: Vec<f64> = (0..self.dim)
                    .map(|k| node_at(index[k], j[k]))
                    .collect();
                let y = f(&x);
                let approx = self.evaluate_unchecked(&x);
                self.evaluations += 1;
                points.push(GridPoint {
                    node: j.clone(),
                    error: ferr(y, approx, &x),
                    surplus: y - approx,
                    value: y,
                    x,
                });
            }
            for k in 0..self.dim {
                counters[k] += 1;
                if counters[k] < per_dim[k].len() {
                    continue 'outer;
                }
                counters[k] = 0;
            }
            break;
        }
        Subgrid { index, points }
    }
}

fn node_at(level: u8, j: usize) -> f64 {
    level_nodes(level)[j]
}

/// Greedy adaptive construction. `f` is the function to interpolate and
/// `ferr(y, y_approx, x)` scores a refinement; refinement stops once every
/// fringe score is below `tol`.
pub fn approximate<F, E>(
    dim: usize,
    mut f: F,
    mut ferr: E,
    config: &SparseGridConfig,
) -> Result<SparseGrid, SparseGridError>
where
    F: FnMut(&[f64]) -> f64,
    E: FnMut(f64, f64, &[f64]) -> f64,
{
    if dim == 0 {
        return Err(SparseGridError::ZeroDimension);
    }
    if !(config.tol > 0.0 && config.tol.is_finite()) {
        return Err(SparseGridError::BadTolerance(config.tol));
    }
    let mut grid = SparseGrid {
        dim,
        tol: config.tol,
        tau: config.tau.unwrap_or(config.tol),
        subgrids: Vec::new(),
        evaluations: 0,
        budget_exceeded: false,
        lookup: HashMap::new(),
    };
    let mut fringe = vec![grid.expand(&mut f, &mut ferr, vec![0; dim])];
    loop {
        // largest fringe error, ties broken by (level sum, index, node)
        let mut best: Option<(usize, usize)> = None;
        for (si, sg) in fringe.iter().enumerate() {
            for (pi, p) in sg.points.iter().enumerate() {
                let better = match best {
                    None => true,
                    Some((bs, bp)) => {
                        let b = &fringe[bs];
                        let bpt = &b.points[bp];
                        match p.error.total_cmp(&bpt.error) {
                            std::cmp::Ordering::Greater => true,
                            std::cmp::Ordering::Less => false,
                            std::cmp::Ordering::Equal => {
                                (sg.level_sum(), &sg.index, &p.node)
                                    < (b.level_sum(), &b.index, &bpt.node)
                            }
                        }
                    }
                };
                if better {
                    best = Some((si, pi));
                }
            }
        }
        let Some((si, pi)) = best else {
            break;
        };
        if fringe[si].points[pi].error < config.tol {
            break;
        }
        if grid.evaluations >= config.max_nodes {
            log::warn!(
                "sparse grid stopped at the node budget of {} with fringe error {}",
                config.max_nodes,
                fringe[si].points[pi].error
            );
            grid.budget_exceeded = true;
            break;
        }
        let accepted = fringe.swap_remove(si);
        let index = accepted.index.clone();
        grid.lookup.insert(index.clone(), grid.subgrids.len());
        grid.subgrids.push(accepted);
        for k in 0..dim {
            if index[k] >= MAX_LEVEL {
                continue;
            }
            let mut fwd = index.clone();
            fwd[k] += 1;
            let ready = (0..dim).all(|kk| {
                if fwd[kk] == 0 {
                    return true;
                }
                let mut back = fwd.clone();
                back[kk] -= 1;
                grid.lookup.contains_key(&back)
            });
            if ready {
                let sg = grid.expand(&mut f, &mut ferr, fwd);
                fringe.push(sg);
            }
        }
    }
    Ok(grid)
}

/// A weight function on `[0, 1]` that is polynomial between `breaks`.
pub struct PiecewiseWeight<'a> {
    pub eval: &'a dyn Fn(f64) -> f64,
    /// Ascending, from 0 to 1 inclusive.
    pub breaks: Vec<f64>,
    pub degree: usize,
}

impl<'a> PiecewiseWeight<'a> {
    pub fn polynomial(eval: &'a dyn Fn(f64) -> f64, degree: usize) -> Self {
        Self {
            eval,
            breaks: vec![0.0, 1.0],
            degree,
        }
    }
}

/// Quadrature rule carried by a sparse grid: `Σ weight·value` is the integral
/// of the interpolant against the tensor weight `Π ω_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridQuadrature {
    pub x: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GridQuadrature {
    pub fn integral(&self) -> f64 {
        self.values.iter().zip(&self.weights).map(|(v, w)| v * w).sum()
    }
}

/// `ω` on `[a, b]` as monomial coefficients in `t = 2x − 1`.
fn monomial_coeffs(om: &PiecewiseWeight<'_>, a: f64, b: f64) -> Vec<f64> {
    let d = om.degree;
    let ts: Vec<f64> = (0..=d)
        .map(|i| 2.0 * (a + (b - a) * (i as f64 + 0.5) / (d + 1) as f64) - 1.0)
        .collect();
    let vander = DMatrix::from_fn(d + 1, d + 1, |i, r| ts[i].powi(r as i32));
    let rhs = DVector::from_iterator(d + 1, ts.iter().map(|&t| (om.eval)(0.5 * (t + 1.0))));
    vander
        .lu()
        .solve(&rhs)
        .map(|c| c.iter().copied().collect())
        .unwrap_or_else(|| vec![0.0; d + 1])
}

/// Antiderivative of `T_q` at `cos θ`.
fn cheb_antiderivative(q: usize, theta: f64) -> f64 {
    let t = theta.cos();
    match q {
        0 => t,
        1 => 0.5 * t * t,
        _ => {
            ((q + 1) as f64 * theta).cos() / (2 * (q + 1)) as f64
                - ((q - 1) as f64 * theta).cos() / (2 * (q - 1)) as f64
        }
    }
}

/// `μ_k = ∫₀¹ T_k(2x − 1) ω(x) dx` for `k = 0..=m`, exact for piecewise
/// polynomial `ω`.
fn chebyshev_moments(om: &PiecewiseWeight<'_>, m: usize) -> Vec<f64> {
    let mut mu = vec![0.0; m + 1];
    for w in om.breaks.windows(2) {
        let (ta, tb) = (2.0 * w[0] - 1.0, 2.0 * w[1] - 1.0);
        let (theta_a, theta_b) = (ta.clamp(-1.0, 1.0).acos(), tb.clamp(-1.0, 1.0).acos());
        let coef = monomial_coeffs(om, w[0], w[1]);
        for (k, mk) in mu.iter_mut().enumerate() {
            // tʳ T_k as a Chebyshev series via t T_q = (T_{q+1} + T_{|q−1|}) / 2
            let mut series = vec![(k, 1.0)];
            let mut total = 0.0;
            for (r, &c) in coef.iter().enumerate() {
                if r > 0 {
                    series = series
                        .iter()
                        .flat_map(|&(q, v)| [(q + 1, 0.5 * v), (q.abs_diff(1), 0.5 * v)])
                        .collect();
                }
                if c != 0.0 {
                    let part: f64 = series
                        .iter()
                        .map(|&(q, v)| v * (cheb_antiderivative(q, theta_b) - cheb_antiderivative(q, theta_a)))
                        .sum();
                    total += c * part;
                }
            }
            // dx = dt / 2
            *mk += 0.5 * total;
        }
    }
    mu
}

/// `∫₀¹ ψ_j ω` from the Chebyshev moments of `ω`, using the discrete
/// cosine form of the cardinal polynomials on Chebyshev-Lobatto points.
fn cardinal_moment(level: u8, j: usize, mu: &[f64]) -> f64 {
    if level == 0 {
        return mu[0];
    }
    let m = 1usize << level;
    // node j sits at t = cos(π (m − j) / m)
    let jj = m - j;
    let mut sum = 0.0;
    for (k, &mk) in mu.iter().enumerate().take(m + 1) {
        let half = if k == 0 || k == m { 0.5 } else { 1.0 };
        let phase = (k * jj) % (2 * m);
        sum += half * (PI * phase as f64 / m as f64).cos() * mk;
    }
    let hj = if j == 0 || j == m { 0.5 } else { 1.0 };
    2.0 * hj * sum / m as f64
}

/// Per-point quadrature weights for the tensor weight `Π ω_k`.
///
/// Hierarchical weights `Π_k ∫ ψ ω_k` are computed exactly per polynomial
/// piece, then converted to weights on function values.
pub fn dim_weights(
    grid: &SparseGrid,
    omegas: &[PiecewiseWeight<'_>],
) -> Result<GridQuadrature, SparseGridError> {
    if omegas.len() != grid.dim {
        return Err(SparseGridError::WeightDimension {
            expected: grid.dim,
            got: omegas.len(),
        });
    }
    let max_level: Vec<u8> = (0..grid.dim)
        .map(|k| grid.subgrids.iter().map(|sg| sg.index[k]).max().unwrap_or(0))
        .collect();
    let mu: Vec<Vec<f64>> = omegas
        .iter()
        .zip(&max_level)
        .map(|(om, &l)| chebyshev_moments(om, level_size(l) - 1))
        .collect();
    let mut moment: HashMap<(usize, u8, usize), f64> = HashMap::new();
    let mut one_d = |k: usize, level: u8, j: usize| -> f64 {
        *moment
            .entry((k, level, j))
            .or_insert_with(|| cardinal_moment(level, j, &mu[k]))
    };

    let pts: Vec<(&[u8], &GridPoint)> = grid.points().collect();
    let hier: Vec<f64> = pts
        .iter()
        .map(|(idx, p)| (0..grid.dim).map(|k| one_d(k, idx[k], p.node[k])).product())
        .collect();

    // Solve (I + Ψᵀ) c = W where Ψ[q][p] = ψ_p(x_q) for subgrid(p) < subgrid(q).
    // Points in higher subgrids are finalized first.
    let mut order: Vec<usize> = (0..pts.len()).collect();
    let lsum = |i: usize| pts[i].0.iter().map(|&v| v as usize).sum::<usize>();
    order.sort_by_key(|&i| std::cmp::Reverse(lsum(i)));
    // barycentric denominators per (level, evaluation node)
    let mut denoms: HashMap<(u8, u8, usize), f64> = HashMap::new();
    let mut psi1 = |level: u8, j: usize, level_at: u8, j_at: usize| -> f64 {
        if level == 0 {
            return 1.0;
        }
        if level_at >= level {
            let shift = level_at - level;
            if level_at == 0 || j_at.is_multiple_of(1usize << shift) {
                let j_here = if level_at == 0 { 1usize << (level - 1) } else { j_at >> shift };
                return if j_here == j { 1.0 } else { 0.0 };
            }
        } else {
            return basis_eval(level, j, node_at(level_at, j_at));
        }
        let x = node_at(level_at, j_at);
        let m = 1usize << level;
        let nodes = level_nodes(level);
        let bary = |k: usize| {
            let s = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
            if k == 0 || k == m {
                0.5 * s
            } else {
                s
            }
        };
        let denom = *denoms
            .entry((level, level_at, j_at))
            .or_insert_with(|| nodes.iter().enumerate().map(|(k, &xk)| bary(k) / (x - xk)).sum());
        bary(j) / (x - nodes[j]) / denom
    };
    let mut c = vec![0.0; pts.len()];
    for (pos, &p) in order.iter().enumerate() {
        let (ip, pp) = pts[p];
        let mut acc = hier[p];
        for &q in &order[..pos] {
            let (iq, pq) = pts[q];
            if iq == ip || !(0..grid.dim).all(|k| ip[k] <= iq[k]) {
                continue;
            }
            let mut psi = 1.0;
            for k in 0..grid.dim {
                psi *= psi1(ip[k], pp.node[k], iq[k], pq.node[k]);
                if psi == 0.0 {
                    break;
                }
            }
            acc -= psi * c[q];
        }
        c[p] = acc;
    }
    Ok(GridQuadrature {
        x: pts.iter().map(|(_, p)| p.x.clone()).collect(),
        values: pts.iter().map(|(_, p)| p.value).collect(),
        weights: c,
    })
}

impl SparseGrid {
    /// Flat record layout used for `--grid-out`.
    pub fn dump(&self) -> GridDump {
        GridDump {
            dim: self.dim,
            tol: self.tol,
            tau: self.tau,
            evaluations: self.evaluations,
            budget_exceeded: self.budget_exceeded,
            records: self
                .points()
                .map(|(idx, p)| GridRecord {
                    index: idx.to_vec(),
                    x: p.x.clone(),
                    surplus: p.surplus,
                    error: p.error,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn abs_err(y: f64, approx: f64, _: &[f64]) -> f64 {
        (y - approx).abs()
    }

/// Index of point `j` of `level` among the points of `level + 1`.
    fn refine_index(level: u8, j: usize) -> usize {
        if level == 0 {
            1
        } else {
            2 * j
        }
    }

    #[test]
    fn node_levels() {
        assert_eq!(cgl_nodes(0), vec![0.5]);
        assert_eq!(cgl_nodes(1), vec![0.0, 0.5, 1.0]);
        let l2 = cgl_nodes(2);
        let c = (PI / 4.0).cos();
        let expected = [0.0, 0.5 * (1.0 - c), 0.5, 0.5 * (1.0 + c), 1.0];
        for (a, b) in l2.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        for level in 0..8u8 {
            let coarse = cgl_nodes(level);
            let fine = cgl_nodes(level + 1);
            for (j, &x) in coarse.iter().enumerate() {
                assert!((fine[refine_index(level, j)] - x).abs() < 1e-15);
            }
            let fresh = new_indices(level + 1);
            assert_eq!(fresh.len(), fine.len() - coarse.len());
        }
    }

    #[test]
    fn cardinal_basis() {
        assert_eq!(basis_eval(0, 0, 0.3), 1.0);
        let nodes = cgl_nodes(2);
        for (k, &x) in nodes.iter().enumerate() {
            let v = basis_eval(2, 2, x);
            assert!((v - if k == 2 { 1.0 } else { 0.0 }).abs() < 1e-12);
        }
        for level in 1..6u8 {
            for &x in &[0.013, 0.37, 0.77, 0.999] {
                let total: f64 = (0..level_size(level)).map(|j| basis_eval(level, j, x)).sum();
                assert!((total - 1.0).abs() < 1e-12);
                let all = basis_all(level, x);
                for (j, v) in all.iter().enumerate() {
                    assert!((v - basis_eval(level, j, x)).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn neighbor_rule() {
        // low parent levels always neighbor
        assert!(is_point_neighbor(&[1, 0], &[0, 0], &[1, 0], 0));
        // differing in another coordinate
        assert!(!is_point_neighbor(&[1, 2], &[0, 1], &[1, 3], 0));
        // level 2 parent at index 1 (x ≈ 0.146); level 3 children 1 and 3 flank it
        assert!(is_point_neighbor(&[2], &[1], &[1], 0));
        assert!(is_point_neighbor(&[2], &[1], &[3], 0));
        assert!(!is_point_neighbor(&[2], &[1], &[5], 0));
        assert!(!is_point_neighbor(&[2], &[1], &[7], 0));
    }

    #[test]
    fn neighbor_children_match_rule() {
        for level in 0..6u8 {
            let parents: Vec<usize> = (0..level_size(level)).collect();
            for &jp in &parents {
                let mut expect: Vec<usize> = new_indices(level + 1)
                    .into_iter()
                    .filter(|&jc| is_point_neighbor(&[level], &[jp], &[jc], 0))
                    .collect();
                expect.sort();
                let mut got = neighbor_children(level, jp);
                got.sort();
                assert_eq!(got, expect, "level {level} parent {jp}");
            }
        }
    }

    #[test]
    fn constant_function_is_one_node() {
        let grid = approximate(2, |_| 3.5, abs_err, &SparseGridConfig::new(1e-8)).unwrap();
        assert_eq!(grid.node_count(), 1);
        assert_eq!(grid.evaluate(&[0.1, 0.9]).unwrap(), 3.5);
    }

    #[test]
    fn reproduces_separable_quadratic() {
        let f = |x: &[f64]| x[0] * x[0];
        let grid = approximate(2, f, abs_err, &SparseGridConfig::new(1e-12)).unwrap();
        // three points per axis already carry degree 2
        assert!(grid.contains(&[1, 0]));
        assert!(grid.is_admissible());
        let mut seed = 12345u64;
        for _ in 0..100 {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let a = (seed >> 11) as f64 / (1u64 << 53) as f64;
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let b = (seed >> 11) as f64 / (1u64 << 53) as f64;
            assert!((grid.evaluate(&[a, b]).unwrap() - a * a).abs() < 1e-12);
        }
        let one = |_: f64| 1.0;
        let quad =
            dim_weights(&grid, &[PiecewiseWeight::polynomial(&one, 0), PiecewiseWeight::polynomial(&one, 0)])
                .unwrap();
        assert!((quad.integral() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn smooth_function_accuracy() {
        let f = |x: &[f64]| (-(x[0] - 0.4).powi(2) * 8.0 - (x[1] - 0.6).powi(2) * 3.0).exp();
        let tol = 1e-4;
        let grid = approximate(2, f, abs_err, &SparseGridConfig::new(tol)).unwrap();
        assert!(!grid.budget_exceeded());
        for (_, p) in grid.points() {
            assert!((grid.evaluate(&p.x).unwrap() - p.value).abs() < 1e-10);
        }
        let mut worst: f64 = 0.0;
        for a in 0..32 {
            for b in 0..32 {
                let x = [(a as f64 + 0.5) / 32.0, (b as f64 + 0.5) / 32.0];
                worst = worst.max((grid.evaluate(&x).unwrap() - f(&x)).abs());
            }
        }
        assert!(worst <= 10.0 * tol, "max error {worst}");
    }

    #[test]
    fn tighter_tolerance_uses_more_nodes() {
        let f = |x: &[f64]| 1.0 / (1.0 + 4.0 * x[0] * x[0] + x[1]);
        let mut last = 0;
        for tol in [1e-2, 1e-3, 1e-4, 1e-5, 1e-6] {
            let g = approximate(2, f, abs_err, &SparseGridConfig::new(tol)).unwrap();
            assert!(g.node_count() >= last);
            last = g.node_count();
        }
    }

    #[test]
    fn node_budget_flags_partial_grid() {
        let f = |x: &[f64]| (30.0 * x[0]).sin() * (20.0 * x[1]).cos();
        let cfg = SparseGridConfig {
            max_nodes: 50,
            ..SparseGridConfig::new(1e-12)
        };
        let g = approximate(2, f, abs_err, &cfg).unwrap();
        assert!(g.budget_exceeded());
    }

    #[test]
    fn weights_against_warp_derivative() {
        let f = |x: &[f64]| (x[0] + 2.0 * x[1]).cos();
        let grid = approximate(2, f, abs_err, &SparseGridConfig::new(1e-6)).unwrap();
        let two = |_: f64| 2.0;
        let one = |_: f64| 1.0;
        let quad = dim_weights(
            &grid,
            &[PiecewiseWeight::polynomial(&two, 0), PiecewiseWeight::polynomial(&one, 0)],
        )
        .unwrap();
        assert!((quad.weights.iter().sum::<f64>() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn serialized_dump_round_trips() {
        let grid = approximate(2, |x| x[0] * x[1], abs_err, &SparseGridConfig::new(1e-8)).unwrap();
        let dump = grid.dump();
        assert_eq!(dump.records.len(), grid.node_count());
        let text = serde_json::to_string(&dump).unwrap();
        let back: GridDump = serde_json::from_str(&text).unwrap();
        assert_eq!(back, dump);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// Monomials inside the grid's span are integrated exactly.
        #[test]
        fn quadrature_is_exact_on_spanned_monomials(
            c0 in 0.5f64..3.0, c1 in 0.5f64..3.0, shift in 0.0f64..1.0,
        ) {
            let f = |x: &[f64]| ((c0 * x[0] + shift).sin() + (c1 * x[1]).exp()) * (1.0 + x[0] * x[1]);
            // zero cutoff keeps every accepted subgrid complete
            let cfg = SparseGridConfig { tau: Some(0.0), ..SparseGridConfig::new(1e-6) };
            let grid = approximate(2, f, abs_err, &cfg).unwrap();
            prop_assert!(grid.is_admissible());
            for sg in grid.subgrids() {
                let full = new_indices(sg.index[0]).len() * new_indices(sg.index[1]).len();
                prop_assert_eq!(sg.points.len(), full);
            }
            let one = |_: f64| 1.0;
            let quad = dim_weights(
                &grid,
                &[PiecewiseWeight::polynomial(&one, 0), PiecewiseWeight::polynomial(&one, 0)],
            )
            .unwrap();
            // degrees reproduced by the accepted subgrids
            for (idx, _) in grid.points() {
                let d0 = level_size(idx[0]) - 1;
                let d1 = level_size(idx[1]) - 1;
                for (a, b) in [(d0, d1), (d0 / 2, d1), (0, d1), (d0, 0)] {
                    let num: f64 = quad
                        .x
                        .iter()
                        .zip(&quad.weights)
                        .map(|(x, w)| w * x[0].powi(a as i32) * x[1].powi(b as i32))
                        .sum();
                    let exact = 1.0 / ((a + 1) * (b + 1)) as f64;
                    prop_assert!((num - exact).abs() < 1e-12, "x^{a} y^{b}: {num} vs {exact}");
                }
            }
            let total: f64 = quad.weights.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
