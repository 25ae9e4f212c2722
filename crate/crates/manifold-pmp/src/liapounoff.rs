//! Grid-cell subset selection with prescribed measure and integral (Liapounoff-type convexity).
//!
//! Every selection works on per-cell vector samples and whole cells. Measures
//! are rounded to the nearest cell count. Two families are provided: total
//! residual selections (`select_subset`, `nested_family`, `partition_family`)
//! and time-uniform running selections (`select_running`, `partition_running`)
//! whose residual is controlled at every grid node.

use serde::Serialize;
use thiserror::Error;

/// Instances up to this many candidate cells are solved exactly.
pub const EXACT_MAX: usize = 20;
const MAX_PASSES: usize = 400;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LiapounoffError {
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("dimension mismatch: {0}")]
    Mismatch(String),
}

/// Per-cell vectors stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CellVectors {
    cells: usize,
    dim: usize,
    data: Vec<f64>,
}

impl CellVectors {
    pub fn new(cells: usize, dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), cells * dim, "cell data has the wrong length");
        Self { cells, dim, data }
    }

    pub fn zeros(cells: usize, dim: usize) -> Self {
        Self::new(cells, dim, vec![0.0; cells * dim])
    }

    pub fn from_fn(cells: usize, dim: usize, mut f: impl FnMut(usize, &mut [f64])) -> Self {
        let mut data = vec![0.0; cells * dim];
        for (i, row) in data.chunks_mut(dim.max(1)).enumerate().take(cells) {
            f(i, &mut row[..dim]);
        }
        Self { cells, dim, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        Self::new(rows.len(), dim, rows.iter().flatten().copied().collect())
    }

    pub fn from_scalars(v: &[f64]) -> Self {
        Self::new(v.len(), 1, v.to_vec())
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Concatenates components cell by cell.
    pub fn stack(parts: &[&CellVectors]) -> Result<Self, LiapounoffError> {
        let cells = parts.first().map_or(0, |p| p.cells);
        if parts.iter().any(|p| p.cells != cells) {
            return Err(LiapounoffError::Mismatch("stacked integrands differ in cell count".into()));
        }
        let dim = parts.iter().map(|p| p.dim).sum();
        let mut data = Vec::with_capacity(cells * dim);
        for i in 0..cells {
            for p in parts {
                data.extend_from_slice(p.cell(i));
            }
        }
        Ok(Self { cells, dim, data })
    }

    /// Zero outside `mask`.
    pub fn masked(&self, mask: &[bool]) -> Self {
        let mut out = self.clone();
        for (i, keep) in mask.iter().enumerate() {
            if !keep {
                out.data[i * self.dim..(i + 1) * self.dim].fill(0.0);
            }
        }
        out
    }

    /// Replicates every cell `factor` times (same value on each sub-cell).
    pub fn refined(&self, factor: usize) -> Self {
        let mut data = Vec::with_capacity(self.data.len() * factor);
        for i in 0..self.cells {
            for _ in 0..factor {
                data.extend_from_slice(self.cell(i));
            }
        }
        Self::new(self.cells * factor, self.dim, data)
    }

    /// Sums over pairs of adjacent cells (the odd last cell is dropped).
    pub fn pair_sums(&self) -> Self {
        Self::from_fn(self.cells / 2, self.dim, |i, row| {
            for (d, r) in row.iter_mut().enumerate() {
                *r = self.cell(2 * i)[d] + self.cell(2 * i + 1)[d];
            }
        })
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::new(self.cells, self.dim, self.data.iter().map(|x| x * c).collect())
    }

    fn sum_over(&self, idx: impl IntoIterator<Item = usize>) -> Vec<f64> {
        let mut s = vec![0.0; self.dim];
        for i in idx {
            add(&mut s, self.cell(i), 1.0);
        }
        s
    }

    fn max_norm(&self) -> f64 {
        (0..self.cells).map(|i| norm2(self.cell(i)).sqrt()).fold(0.0, f64::max)
    }
}

fn add(a: &mut [f64], b: &[f64], c: f64) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += c * y;
    }
}

fn norm2(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

fn diff2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Boolean mask over grid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSubset {
    pub mask: Vec<bool>,
    cell_width: f64,
}

impl GridSubset {
    pub fn new(mask: Vec<bool>, cell_width: f64) -> Self {
        Self { mask, cell_width }
    }

    pub fn empty(cells: usize, cell_width: f64) -> Self {
        Self::new(vec![false; cells], cell_width)
    }

    pub fn full(cells: usize, cell_width: f64) -> Self {
        Self::new(vec![true; cells], cell_width)
    }

    pub fn from_indices(cells: usize, idx: &[usize], cell_width: f64) -> Self {
        let mut mask = vec![false; cells];
        for i in idx {
            mask[*i] = true;
        }
        Self::new(mask, cell_width)
    }

    pub fn cell_width(&self) -> f64 {
        self.cell_width
    }

    pub fn cells(&self) -> usize {
        self.mask.len()
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|b| **b).count()
    }

    pub fn measure(&self) -> f64 {
        self.count() as f64 * self.cell_width()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.mask[i]
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|i| self.mask[*i]).collect()
    }

    pub fn complement(&self) -> Self {
        Self::new(self.mask.iter().map(|b| !b).collect(), self.cell_width())
    }

    pub fn is_subset_of(&self, other: &GridSubset) -> bool {
        self.mask.iter().zip(&other.mask).all(|(a, b)| !a || *b)
    }

    pub fn is_disjoint(&self, other: &GridSubset) -> bool {
        self.mask.iter().zip(&other.mask).all(|(a, b)| !(a & b))
    }

    pub fn union(&self, other: &GridSubset) -> Self {
        Self::new(self.mask.iter().zip(&other.mask).map(|(a, b)| a | b).collect(), self.cell_width())
    }

    pub fn intersection(&self, other: &GridSubset) -> Self {
        Self::new(self.mask.iter().zip(&other.mask).map(|(a, b)| a & b).collect(), self.cell_width())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub subset: GridSubset,
    /// |ρ∫h − ∫_E h|.
    pub residual: f64,
    /// ρ × cell count before rounding.
    pub requested_cells: f64,
    pub rounded: bool,
}

fn rounded_count(rho: f64, cells: usize) -> (usize, f64, bool) {
    let want = rho * cells as f64;
    let k = (want.round().max(0.0) as usize).min(cells);
    (k, want, (want - k as f64).abs() > 1e-9)
}

/// Chooses `count` of the candidate cells minimising |target − Σ h|.
/// Returns sorted cell indices.
fn choose(h: &CellVectors, cand: &[usize], count: usize, target: &[f64]) -> Vec<usize> {
    if count == 0 {
        return Vec::new();
    }
    if count >= cand.len() {
        return cand.to_vec();
    }
    if cand.len() <= EXACT_MAX {
        return exact(h, cand, count, target);
    }
    let mut seeds = Vec::new();
    // Coarse-to-fine seed: pair adjacent candidates, solve, lift.
    let pairs = cand.len() / 2;
    let coarse = CellVectors::from_fn(pairs, h.dim, |i, row| {
        row.copy_from_slice(h.cell(cand[2 * i]));
        add(row, h.cell(cand[2 * i + 1]), 1.0);
    });
    let coarse_idx: Vec<usize> = (0..pairs).collect();
    let csel = choose(&coarse, &coarse_idx, (count / 2).min(pairs), target);
    let mut lifted: Vec<usize> = csel.iter().flat_map(|&p| [cand[2 * p], cand[2 * p + 1]]).collect();
    while lifted.len() < count {
        let s = h.sum_over(lifted.iter().copied());
        let best = cand
            .iter()
            .filter(|c| !lifted.contains(c))
            .min_by(|a, b| {
                let mut sa = s.clone();
                add(&mut sa, h.cell(**a), 1.0);
                let mut sb = s.clone();
                add(&mut sb, h.cell(**b), 1.0);
                diff2(target, &sa).total_cmp(&diff2(target, &sb))
            })
            .copied()
            .unwrap();
        lifted.push(best);
    }
    seeds.push(lifted);
    seeds.push(greedy(h, cand, count, target));
    let mut best: Option<(f64, Vec<usize>)> = None;
    for seed in seeds {
        let sel = exchange(h, cand, seed, target);
        let r = diff2(target, &h.sum_over(sel.iter().copied()));
        if best.as_ref().map_or(true, |(b, _)| r < *b) {
            best = Some((r, sel));
        }
    }
    let mut out = best.unwrap().1;
    out.sort_unstable();
    out
}

/// Proportional greedy: the s-th pick tracks s/count of the target.
fn greedy(h: &CellVectors, cand: &[usize], count: usize, target: &[f64]) -> Vec<usize> {
    let mut used = vec![false; cand.len()];
    let mut s = vec![0.0; h.dim];
    let mut out = Vec::with_capacity(count);
    for step in 1..=count {
        let frac = step as f64 / count as f64;
        let goal: Vec<f64> = target.iter().map(|t| t * frac).collect();
        let mut best = (f64::INFINITY, 0);
        for (pos, &c) in cand.iter().enumerate() {
            if used[pos] {
                continue;
            }
            let mut trial = s.clone();
            add(&mut trial, h.cell(c), 1.0);
            let r = diff2(&goal, &trial);
            if r < best.0 {
                best = (r, pos);
            }
        }
        used[best.1] = true;
        add(&mut s, h.cell(cand[best.1]), 1.0);
        out.push(cand[best.1]);
    }
    out
}

/// Best-improvement single swaps until none helps.
fn exchange(h: &CellVectors, cand: &[usize], sel: Vec<usize>, target: &[f64]) -> Vec<usize> {
    let mut inside: Vec<usize> = sel;
    let mut outside: Vec<usize> = cand.iter().filter(|c| !inside.contains(c)).copied().collect();
    let mut r: Vec<f64> = target.to_vec();
    add(&mut r, &h.sum_over(inside.iter().copied()), -1.0);
    let mut delta = vec![0.0; h.dim];
    for _ in 0..MAX_PASSES {
        let base = norm2(&r);
        let mut best = (base, usize::MAX, usize::MAX);
        for (a, &i) in inside.iter().enumerate() {
            for (b, &j) in outside.iter().enumerate() {
                // r' = r + h_i − h_j
                let mut v = 0.0;
                for d in 0..h.dim {
                    let x = r[d] + h.cell(i)[d] - h.cell(j)[d];
                    v += x * x;
                }
                if v < best.0 * (1.0 - 1e-14) - 1e-300 {
                    best = (v, a, b);
                }
            }
        }
        if best.1 == usize::MAX {
            break;
        }
        let (a, b) = (best.1, best.2);
        let (i, j) = (inside[a], outside[b]);
        delta.copy_from_slice(h.cell(i));
        add(&mut delta, h.cell(j), -1.0);
        add(&mut r, &delta, 1.0);
        inside[a] = j;
        outside[b] = i;
    }
    inside
}

/// Depth-first enumeration in lexicographic order; keeps the first optimum.
fn exact(h: &CellVectors, cand: &[usize], count: usize, target: &[f64]) -> Vec<usize> {
    struct Search<'a> {
        h: &'a CellVectors,
        cand: &'a [usize],
        target: &'a [f64],
        best: f64,
        best_set: Vec<usize>,
        cur: Vec<usize>,
    }
    fn dfs(s: &mut Search, pos: usize, need: usize, sum: &mut Vec<f64>) {
        if need == 0 {
            let r = diff2(s.target, sum);
            if r < s.best {
                s.best = r;
                s.best_set = s.cur.clone();
            }
            return;
        }
        if s.cand.len() - pos < need {
            return;
        }
        let c = s.cand[pos];
        add(sum, s.h.cell(c), 1.0);
        s.cur.push(c);
        dfs(s, pos + 1, need - 1, sum);
        s.cur.pop();
        add(sum, s.h.cell(c), -1.0);
        dfs(s, pos + 1, need, sum);
    }
    let mut s = Search {
        h,
        cand,
        target,
        best: f64::INFINITY,
        best_set: Vec::new(),
        cur: Vec::with_capacity(count),
    };
    let mut sum = vec![0.0; h.dim];
    dfs(&mut s, 0, count, &mut sum);
    s.best_set
}

fn selection_from(h: &CellVectors, idx: &[usize], target: &[f64], width: f64, want: f64, rounded: bool) -> Selection {
    let resid = diff2(target, &h.sum_over(idx.iter().copied())).sqrt() * width;
    Selection {
        subset: GridSubset::from_indices(h.cells(), idx, width),
        residual: resid,
        requested_cells: want,
        rounded,
    }
}

/// E ⊂ grid with |E| = round(ρN) cells and ∫_E h ≈ ρ∫h. ρ is clamped to [0, 1].
pub fn select_subset(h: &CellVectors, rho: f64, cell_width: f64) -> Selection {
    let rho = rho.clamp(0.0, 1.0);
    let n = h.cells();
    let (k, want, rounded) = rounded_count(rho, n);
    let mut target = h.sum_over(0..n);
    target.iter_mut().for_each(|t| *t *= rho);
    let all: Vec<usize> = (0..n).collect();
    let idx = choose(h, &all, k, &target);
    selection_from(h, &idx, &target, cell_width, want, rounded)
}

/// Nested selections for ascending ρ's: each level extends the previous one.
pub fn nested_family(h: &CellVectors, rhos: &[f64], cell_width: f64) -> Result<Vec<Selection>, LiapounoffError> {
    if rhos.iter().any(|r| !(0.0..=1.0).contains(r)) || rhos.windows(2).any(|w| w[0] > w[1]) {
        return Err(LiapounoffError::InvalidWeights("levels must be ascending in [0, 1]".into()));
    }
    let n = h.cells();
    let total = h.sum_over(0..n);
    let mut prev: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(rhos.len());
    for &rho in rhos {
        let (k, want, rounded) = rounded_count(rho, n);
        let target: Vec<f64> = total.iter().map(|t| t * rho).collect();
        let mut rest = target.clone();
        add(&mut rest, &h.sum_over(prev.iter().copied()), -1.0);
        let cand: Vec<usize> = (0..n).filter(|i| prev.binary_search(i).is_err()).collect();
        let extra = choose(h, &cand, k - prev.len(), &rest);
        prev.extend(extra);
        prev.sort_unstable();
        out.push(selection_from(h, &prev, &target, cell_width, want, rounded));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionVariant {
    /// Residual controlled by the stacked selection only.
    Stacked,
    /// Additionally drives the final-time residual to zero when a cell exchange permits it.
    ExactAtT,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub subsets: Vec<GridSubset>,
    /// |Σρ_i∫h_i − Σ∫_{E_i}h_i| at the final time.
    pub residual: f64,
    /// Largest running residual over grid nodes (time-uniform constructions only).
    pub sup_residual: Option<f64>,
    pub exact: bool,
}

fn check_simplex(rho: &[f64]) -> Result<(), LiapounoffError> {
    if rho.is_empty() {
        return Err(LiapounoffError::InvalidWeights("no weights".into()));
    }
    if rho.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
        return Err(LiapounoffError::InvalidWeights(format!("negative weight in {rho:?}")));
    }
    let s: f64 = rho.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(LiapounoffError::InvalidWeights(format!("weights sum to {s}")));
    }
    Ok(())
}

/// Nearest-cell counts that add up to `cells` (largest remainder, ties by index).
pub fn simplex_counts(rho: &[f64], cells: usize) -> Vec<usize> {
    let want: Vec<f64> = rho.iter().map(|r| r * cells as f64).collect();
    let mut counts: Vec<usize> = want.iter().map(|w| w.floor() as usize).collect();
    let mut left = cells.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..rho.len()).collect();
    order.sort_by(|a, b| (want[*b] - want[*b].floor()).total_cmp(&(want[*a] - want[*a].floor())).then(a.cmp(b)));
    for i in order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

fn partition_residual(hs: &[&CellVectors], rho: &[f64], sets: &[Vec<usize>]) -> Vec<f64> {
    let n = hs[0].cells();
    let mut r = vec![0.0; hs[0].dim()];
    for (i, h) in hs.iter().enumerate() {
        add(&mut r, &h.sum_over(0..n), rho[i]);
        add(&mut r, &h.sum_over(sets[i].iter().copied()), -1.0);
    }
    r
}

fn check_family(hs: &[&CellVectors], rho: &[f64]) -> Result<(), LiapounoffError> {
    check_simplex(rho)?;
    if hs.len() != rho.len() {
        return Err(LiapounoffError::Mismatch(format!("{} integrands for {} weights", hs.len(), rho.len())));
    }
    let (c, d) = (hs[0].cells(), hs[0].dim());
    if hs.iter().any(|h| h.cells() != c || h.dim() != d) {
        return Err(LiapounoffError::Mismatch("integrands differ in shape".into()));
    }
    Ok(())
}

/// Disjoint cover E_1..E_l with |E_i| ≈ ρ_iT and Σ∫_{E_i}h_i ≈ Σρ_i∫h_i.
pub fn partition_family(
    hs: &[&CellVectors],
    rho: &[f64],
    cell_width: f64,
    variant: PartitionVariant,
) -> Result<Partition, LiapounoffError> {
    check_family(hs, rho)?;
    let n = hs[0].cells();
    let l = hs.len();
    let counts = simplex_counts(rho, n);
    let stacked = CellVectors::stack(hs)?;
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut sets: Vec<Vec<usize>> = Vec::with_capacity(l);
    for i in 0..l - 1 {
        let rest: f64 = rho[i..].iter().sum();
        let frac = if rest > 0.0 { rho[i] / rest } else { 0.0 };
        let mut target = stacked.sum_over(remaining.iter().copied());
        target.iter_mut().for_each(|t| *t *= frac);
        let sel = choose(&stacked, &remaining, counts[i], &target);
        remaining.retain(|c| sel.binary_search(c).is_err());
        sets.push(sel);
    }
    sets.push(remaining);
    let mut r = partition_residual(hs, rho, &sets);
    if variant == PartitionVariant::ExactAtT {
        cross_exchange(hs, &mut sets, &mut r, 1e-12 / cell_width);
    }
    let residual = norm2(&r).sqrt() * cell_width;
    Ok(Partition {
        subsets: sets.iter().map(|s| GridSubset::from_indices(n, s, cell_width)).collect(),
        residual,
        sup_residual: None,
        exact: residual <= 1e-12,
    })
}

/// Swaps one cell of E_a with one of E_b while that lowers the final residual.
fn cross_exchange(hs: &[&CellVectors], sets: &mut [Vec<usize>], r: &mut Vec<f64>, stop: f64) {
    let l = sets.len();
    let dim = r.len();
    for _ in 0..MAX_PASSES {
        let base = norm2(r);
        if base.sqrt() <= stop {
            return;
        }
        let mut best = (base, 0, 0, 0, 0);
        for a in 0..l {
            for b in a + 1..l {
                for (ia, &i) in sets[a].iter().enumerate() {
                    for (jb, &j) in sets[b].iter().enumerate() {
                        // i moves to b, j moves to a.
                        let mut v = 0.0;
                        for d in 0..dim {
                            let x = r[d] + hs[a].cell(i)[d] - hs[a].cell(j)[d] + hs[b].cell(j)[d] - hs[b].cell(i)[d];
                            v += x * x;
                        }
                        if v < best.0 * (1.0 - 1e-14) - 1e-300 {
                            best = (v, a, b, ia, jb);
                        }
                    }
                }
            }
        }
        if best.0 >= base {
            return;
        }
        let (_, a, b, ia, jb) = best;
        let (i, j) = (sets[a][ia], sets[b][jb]);
        for d in 0..dim {
            r[d] += hs[a].cell(i)[d] - hs[a].cell(j)[d] + hs[b].cell(j)[d] - hs[b].cell(i)[d];
        }
        sets[a][ia] = j;
        sets[b][jb] = i;
    }
    for s in sets.iter_mut() {
        s.sort_unstable();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningSelection {
    pub subset: GridSubset,
    /// max over grid nodes t of |ρ∫_0^t h − ∫_{E∩[0,t]} h|.
    pub sup_residual: f64,
    pub final_residual: f64,
}

/// Time-ordered selection of exactly `count` cells tracking ρ∫_0^t h at every node.
/// The measure error is tracked alongside h so cell usage stays proportional.
pub fn select_running(h: &CellVectors, rho: f64, count: usize, cell_width: f64) -> RunningSelection {
    let n = h.cells();
    let count = count.min(n);
    let scale = h.max_norm().max(1e-300);
    let mut e = vec![0.0; h.dim()];
    let mut m = 0.0;
    let mut chosen = 0;
    let mut mask = vec![false; n];
    let mut sup: f64 = 0.0;
    for c in 0..n {
        let hc = h.cell(c);
        add(&mut e, hc, rho);
        m += rho;
        let need = count - chosen;
        let take = if need == 0 {
            false
        } else if need == n - c {
            true
        } else {
            let keep = norm2(&e) + (scale * m).powi(2);
            let mut e2 = e.clone();
            add(&mut e2, hc, -1.0);
            let with = norm2(&e2) + (scale * (m - 1.0)).powi(2);
            with < keep
        };
        if take {
            mask[c] = true;
            add(&mut e, hc, -1.0);
            m -= 1.0;
            chosen += 1;
        }
        sup = sup.max(norm2(&e).sqrt());
    }
    RunningSelection {
        subset: GridSubset::new(mask, cell_width),
        sup_residual: sup * cell_width,
        final_residual: norm2(&e).sqrt() * cell_width,
    }
}

/// Time-ordered disjoint cover with nearest-cell measures and a running residual bound.
pub fn partition_running(hs: &[&CellVectors], rho: &[f64], cell_width: f64) -> Result<Partition, LiapounoffError> {
    check_family(hs, rho)?;
    let n = hs[0].cells();
    let l = hs.len();
    let counts = simplex_counts(rho, n);
    let scale = hs.iter().map(|h| h.max_norm()).fold(0.0, f64::max).max(1e-300);
    let mut used = vec![0usize; l];
    let mut e = vec![0.0; hs[0].dim()];
    let mut m = vec![0.0; l];
    let mut sets: Vec<Vec<usize>> = vec![Vec::new(); l];
    let mut sup: f64 = 0.0;
    let mut trial = e.clone();
    for c in 0..n {
        for (i, h) in hs.iter().enumerate() {
            add(&mut e, h.cell(c), rho[i]);
            m[i] += rho[i];
        }
        let mut best = (f64::INFINITY, usize::MAX);
        for g in 0..l {
            if used[g] >= counts[g] {
                continue;
            }
            trial.copy_from_slice(&e);
            add(&mut trial, hs[g].cell(c), -1.0);
            let meas: f64 = (0..l).map(|i| m[i] - if i == g { 1.0 } else { 0.0 }).map(|x| x * x).sum();
            let v = norm2(&trial) + scale * scale * meas;
            if v < best.0 {
                best = (v, g);
            }
        }
        let g = best.1;
        add(&mut e, hs[g].cell(c), -1.0);
        m[g] -= 1.0;
        used[g] += 1;
        sets[g].push(c);
        sup = sup.max(norm2(&e).sqrt());
    }
    let residual = norm2(&e).sqrt() * cell_width;
    Ok(Partition {
        subsets: sets.iter().map(|s| GridSubset::from_indices(n, s, cell_width)).collect(),
        residual,
        sup_residual: Some(sup * cell_width),
        exact: residual <= 1e-12,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sines(n: usize, k: usize) -> CellVectors {
        CellVectors::from_fn(n, k, |i, row| {
            let t = (i as f64 + 0.5) / n as f64;
            for (d, r) in row.iter_mut().enumerate() {
                *r = (2.0 * std::f64::consts::PI * (d + 1) as f64 * t).sin() + 0.3 * d as f64;
            }
        })
    }

    #[test]
    fn trivial_levels() {
        let h = sines(32, 2);
        let full = select_subset(&h, 1.0, 1.0 / 32.0);
        assert_eq!(full.subset.count(), 32);
        assert!(full.residual < 1e-14);
        let none = select_subset(&h, 0.0, 1.0 / 32.0);
        assert_eq!(none.subset.count(), 0);
        assert_eq!(none.residual, 0.0);
    }

    #[test]
    fn constant_half_is_lexicographic() {
        let h = CellVectors::from_scalars(&[2.0; 10]);
        let s = select_subset(&h, 0.5, 0.1);
        assert_eq!(s.subset.indices(), vec![0, 1, 2, 3, 4]);
        assert_eq!(s.residual, 0.0);
        assert!((s.subset.measure() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rounding_is_reported() {
        let h = sines(10, 1);
        let s = select_subset(&h, 0.33, 0.1);
        assert_eq!(s.subset.count(), 3);
        assert!(s.rounded);
        assert!((s.requested_cells - 3.3).abs() < 1e-12);
    }

    #[test]
    fn nesting() {
        let h = sines(64, 2);
        let fam = nested_family(&h, &[0.0, 0.25, 0.5, 1.0], 1.0 / 64.0).unwrap();
        assert_eq!(fam[0].subset.count(), 0);
        assert_eq!(fam[3].subset.count(), 64);
        for w in fam.windows(2) {
            assert!(w[0].subset.is_subset_of(&w[1].subset));
        }
        assert_eq!(fam[1].subset.count(), 16);
        assert!(nested_family(&h, &[0.5, 0.25], 1.0).is_err());
    }

    #[test]
    fn partitions() {
        let h1 = CellVectors::from_scalars(&[1.0; 8]);
        let h2 = CellVectors::from_scalars(&[3.0; 8]);
        let p = partition_family(&[&h1, &h2], &[0.5, 0.5], 0.125, PartitionVariant::Stacked).unwrap();
        assert!(p.residual < 1e-14);
        assert!(p.subsets[0].is_disjoint(&p.subsets[1]));
        assert_eq!(p.subsets[0].union(&p.subsets[1]).count(), 8);
        let one = partition_family(&[&h1], &[1.0], 0.125, PartitionVariant::Stacked).unwrap();
        assert_eq!(one.subsets[0].count(), 8);
        assert!(partition_family(&[&h1, &h2], &[0.7, 0.7], 0.125, PartitionVariant::Stacked).is_err());
        assert!(partition_family(&[&h1, &h2], &[1.5, -0.5], 0.125, PartitionVariant::Stacked).is_err());
    }

    #[test]
    fn exact_at_t_ramp() {
        let n = 64;
        let ramp: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let h1 = CellVectors::from_scalars(&ramp);
        let h2 = CellVectors::from_scalars(&ramp.iter().map(|x| -x).collect::<Vec<_>>());
        let p = partition_family(&[&h1, &h2], &[0.5, 0.5], 1.0 / n as f64, PartitionVariant::ExactAtT).unwrap();
        assert!(p.exact, "{}", p.residual);
        assert_eq!(p.subsets[0].count(), 32);
    }

    #[test]
    fn counts_sum() {
        assert_eq!(simplex_counts(&[1.0 / 3.0; 3], 10), vec![4, 3, 3]);
        assert_eq!(simplex_counts(&[0.25, 0.75], 7), vec![2, 5]);
    }

    #[test]
    fn running_selection_tracks_prefix() {
        let n = 4096;
        let h = CellVectors::from_fn(n, 2, |i, r| {
            r[0] = 0.0;
            r[1] = if i < n / 2 { -1.0 } else { 1.0 };
        });
        let w = 1.0 / n as f64;
        let s = select_running(&h, 0.1, (0.1 * n as f64).round() as usize, w);
        assert_eq!(s.subset.count(), 410);
        assert!(s.sup_residual <= 2.0 * w, "{}", s.sup_residual);
    }

    #[test]
    fn running_partition_cover() {
        let n = 1000;
        let h1 = sines(n, 2);
        let h2 = CellVectors::zeros(n, 2);
        let p = partition_running(&[&h1, &h2], &[0.3, 0.7], 1e-3).unwrap();
        assert_eq!(p.subsets[0].count(), 300);
        assert_eq!(p.subsets[1].count(), 700);
        assert!(p.subsets[0].is_disjoint(&p.subsets[1]));
        assert!(p.sup_residual.unwrap() < 5e-3);
    }

    #[test]
    fn refinement_lift() {
        let fine = sines(128, 2);
        let coarse = fine.pair_sums().scaled(0.5);
        let a = select_subset(&coarse, 0.5, 2.0 / 128.0);
        let b = select_subset(&fine, 0.5, 1.0 / 128.0);
        assert!(b.residual <= a.residual + 1e-12, "{} {}", b.residual, a.residual);
    }
}
