//! Voxel labels from labeled surface points, refined with a Potts graph cut.
//!
//! Energy: `Σ_v D_v(l_v) + λ · #{6-adjacent occupied pairs with different labels}`,
//! where `D_v(k)` is the distance from the voxel center to the nearest point
//! labeled `k`. Minimized by α-expansion; each move is an exact s-t min cut.

use super::grid::{coords, linear_index, LabeledGrid, OccupancyGrid, PartSchema};
use super::maxflow::FlowGraph;
use super::sampler::voxel_center;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledPoint {
    pub pos: [f64; 3],
    pub label: u8,
}

/// Unary costs and neighbor structure of one labeling problem.
struct Problem {
    /// Occupied voxel linear indices.
    voxels: Vec<usize>,
    /// `unary[i][k-1]`, infinite for labels without points.
    unary: Vec<Vec<f64>>,
    /// Pairs of positions into `voxels`.
    edges: Vec<(usize, usize)>,
    labels: Vec<u8>,
    lambda: f64,
}

impl Problem {
    fn energy(&self, assign: &[u8]) -> f64 {
        let unary: f64 = assign
            .iter()
            .enumerate()
            .map(|(i, &l)| self.unary[i][l as usize - 1])
            .sum();
        let cut = self
            .edges
            .iter()
            .filter(|&&(a, b)| assign[a] != assign[b])
            .count();
        unary + self.lambda * cut as f64
    }

    fn nearest(&self) -> Vec<u8> {
        self.unary
            .iter()
            .map(|costs| {
                let mut best = self.labels[0];
                for &l in &self.labels {
                    if costs[l as usize - 1] < costs[best as usize - 1] {
                        best = l;
                    }
                }
                best
            })
            .collect()
    }

    fn expand(&self, assign: &[u8], alpha: u8) -> Vec<u8> {
        let n = assign.len();
        let (s, t) = (n, n + 1);
        let mut g = FlowGraph::new(n + 2);
        let mut linear = vec![0.0; n];
        for (i, &l) in assign.iter().enumerate() {
            linear[i] += self.unary[i][alpha as usize - 1] - self.unary[i][l as usize - 1];
        }
        let potts = |a: u8, b: u8| if a != b { self.lambda } else { 0.0 };
        for &(u, v) in &self.edges {
            let e00 = potts(assign[u], assign[v]);
            let e01 = potts(assign[u], alpha);
            let e10 = potts(alpha, assign[v]);
            linear[u] += e10 - e00;
            linear[v] -= e10;
            let w = e01 + e10 - e00;
            if w > 0.0 {
                g.add_edge(u, v, w, 0.0);
            }
        }
        for (i, &a) in linear.iter().enumerate() {
            if a > 0.0 {
                g.add_edge(s, i, a, 0.0);
            } else if a < 0.0 {
                g.add_edge(i, t, -a, 0.0);
            }
        }
        g.max_flow(s, t);
        let source = g.source_side(s);
        assign
            .iter()
            .enumerate()
            .map(|(i, &l)| if source[i] { l } else { alpha })
            .collect()
    }
}

fn build_problem(
    grid: &OccupancyGrid,
    points: &[LabeledPoint],
    k: usize,
    lambda: f64,
) -> Result<Problem> {
    if points.is_empty() {
        return Err(Error::invalid("label_from_points needs at least one point"));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("smoothness weight {lambda} must be >= 0")));
    }
    for p in points {
        if p.pos.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid(format!("non-finite point {:?}", p.pos)));
        }
        if p.label == 0 || p.label as usize > k {
            return Err(Error::invalid(format!("point label {} outside 1..={k}", p.label)));
        }
    }
    let mut labels: Vec<u8> = points.iter().map(|p| p.label).collect();
    labels.sort_unstable();
    labels.dedup();

    let r = grid.resolution();
    let voxels: Vec<usize> = (0..grid.data().len())
        .filter(|&i| grid.data()[i] != 0)
        .collect();
    let mut pos_of = vec![usize::MAX; grid.data().len()];
    for (i, &v) in voxels.iter().enumerate() {
        pos_of[v] = i;
    }
    let unary = voxels
        .iter()
        .map(|&v| {
            let (x, y, z) = coords(r, v);
            let c = [voxel_center(x, r), voxel_center(y, r), voxel_center(z, r)];
            let mut costs = vec![f64::INFINITY; k];
            for p in points {
                let d = ((c[0] - p.pos[0]).powi(2)
                    + (c[1] - p.pos[1]).powi(2)
                    + (c[2] - p.pos[2]).powi(2))
                .sqrt();
                let slot = &mut costs[p.label as usize - 1];
                *slot = slot.min(d);
            }
            costs
        })
        .collect();
    let mut edges = Vec::new();
    for (i, &v) in voxels.iter().enumerate() {
        let (x, y, z) = coords(r, v);
        let fwd = [
            (x + 1 < r).then(|| linear_index(r, x + 1, y, z)),
            (y + 1 < r).then(|| linear_index(r, x, y + 1, z)),
            (z + 1 < r).then(|| linear_index(r, x, y, z + 1)),
        ];
        for n in fwd.into_iter().flatten() {
            if pos_of[n] != usize::MAX {
                edges.push((i, pos_of[n]));
            }
        }
    }
    Ok(Problem {
        voxels,
        unary,
        edges,
        labels,
        lambda,
    })
}

/// Result of a labeling run, with the energy trace of accepted moves.
#[derive(Clone, Debug)]
pub struct LabelingResult {
    pub grid: LabeledGrid,
    /// Energy after initialization and after every accepted expansion.
    pub energies: Vec<f64>,
}

pub fn label_from_points(
    grid: &OccupancyGrid,
    points: &[LabeledPoint],
    schema: &PartSchema,
    lambda: f64,
) -> Result<LabeledGrid> {
    label_from_points_traced(grid, points, schema, lambda).map(|r| r.grid)
}

pub fn label_from_points_traced(
    grid: &OccupancyGrid,
    points: &[LabeledPoint],
    schema: &PartSchema,
    lambda: f64,
) -> Result<LabelingResult> {
    let problem = build_problem(grid, points, schema.len(), lambda)?;
    let mut assign = problem.nearest();
    let mut energy = problem.energy(&assign);
    let mut energies = vec![energy];
    if lambda > 0.0 && problem.labels.len() > 1 {
        loop {
            let mut improved = false;
            for &alpha in &problem.labels {
                let candidate = problem.expand(&assign, alpha);
                let e = problem.energy(&candidate);
                if e < energy - 1e-9 * energy.abs().max(1.0) {
                    assign = candidate;
                    energy = e;
                    energies.push(e);
                    improved = true;
                }
            }
            if !improved {
                break;
            }
        }
    }
    let mut out = LabeledGrid::empty(grid.resolution(), schema.clone());
    for (i, &v) in problem.voxels.iter().enumerate() {
        out.set_index(v, assign[i]);
    }
    Ok(LabelingResult { grid: out, energies })
}

/// Energy of an arbitrary labeling under the same model (for oracles and reports).
pub fn labeling_energy(lg: &LabeledGrid, points: &[LabeledPoint], lambda: f64) -> Result<f64> {
    let occ = lg.occupancy();
    let problem = build_problem(&occ, points, lg.schema().len(), lambda)?;
    let assign: Vec<u8> = problem.voxels.iter().map(|&v| lg.labels()[v]).collect();
    if assign.contains(&0) {
        return Err(Error::invalid("occupied voxel without label"));
    }
    Ok(problem.energy(&assign))
}
