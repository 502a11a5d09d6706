//! Chart-domain grids on the closed unit ball and grid-sampled fields.
//!
//! For `dim = 1` the nodes are uniform on `[-1, 1]`. For `dim = 2` the nodes are
//! the Cartesian lattice of spacing `h = 2/(N-1)` intersected with the closed
//! unit disk; the points where lattice lines cross the circle are kept as a
//! separate boundary list for unequal-arm (Shortley-Weller) stencils.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};

/// Minimum number of points per axis.
pub const MIN_RESOLUTION: usize = 17;

/// Squared-radius band treated as lying on the unit circle.
const ON_CIRCLE_BAND: f64 = 1e-10;

static NEXT_GRID_ID: AtomicU64 = AtomicU64::new(1);

/// Radii `R1 < R2 < 1` of the nested support sets `U1 ⊂ U2 ⊂ B1(0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SupportRadii {
    pub inner: f64,
    pub outer: f64,
}

impl SupportRadii {
    pub fn new(inner: f64, outer: f64) -> Self {
        Self { inner, outer }
    }
}

impl Default for SupportRadii {
    fn default() -> Self {
        Self { inner: 0.5, outer: 0.9 }
    }
}

/// One arm of the five-point stencil at an interior node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Arm {
    /// Regular lattice neighbour at distance `h`.
    Node(usize),
    /// Boundary crossing at distance `theta * h`, `0 < theta <= 1`.
    Boundary(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryNode {
    pub point: [f64; 2],
    /// Set when the boundary point coincides with a lattice node.
    pub lattice_node: Option<usize>,
}

/// Sparse row-compressed stencil operator.
#[derive(Debug, Clone, Default)]
pub(crate) struct Csr {
    ptr: Vec<usize>,
    idx: Vec<u32>,
    w: Vec<f64>,
}

impl Csr {
    fn push_row(&mut self, row: &[(usize, f64)]) {
        if self.ptr.is_empty() {
            self.ptr.push(0);
        }
        for &(j, w) in row {
            self.idx.push(j as u32);
            self.w.push(w);
        }
        self.ptr.push(self.idx.len());
    }

    pub(crate) fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.ptr.len() - 1)
            .map(|r| {
                let (a, b) = (self.ptr[r], self.ptr[r + 1]);
                self.idx[a..b]
                    .iter()
                    .zip(&self.w[a..b])
                    .map(|(&j, &w)| w * x[j as usize])
                    .sum()
            })
            .collect()
    }
}

#[derive(Debug)]
struct Stencils {
    first: Vec<Csr>,
    second: Vec<Csr>,
}

/// Discretization of the closed unit ball in dimension 1 or 2.
pub struct Grid {
    id: u64,
    dim: usize,
    resolution: usize,
    spacing: f64,
    radii: SupportRadii,
    coords: Vec<[f64; 2]>,
    lattice: Vec<[usize; 2]>,
    lookup: Vec<usize>,
    interior: Vec<bool>,
    boundary: Vec<BoundaryNode>,
    arms: Vec<[Arm; 4]>,
    stencils: OnceLock<Stencils>,
    pub(crate) dirichlet: OnceLock<Result<Arc<crate::poisson::Factorization>>>,
    pair_cache: Mutex<HashMap<u64, Arc<Vec<(u32, u32)>>>>,
}

impl std::fmt::Debug for Grid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Grid")
            .field("dim", &self.dim)
            .field("resolution", &self.resolution)
            .field("spacing", &self.spacing)
            .field("nodes", &self.coords.len())
            .field("radii", &self.radii)
            .finish()
    }
}

/// Builds a grid on the closed unit ball.
pub fn make_grid(dim: usize, resolution: usize, radii: SupportRadii) -> Result<Arc<Grid>> {
    Grid::new(dim, resolution, radii)
}

impl Grid {
    pub fn new(dim: usize, resolution: usize, radii: SupportRadii) -> Result<Arc<Grid>> {
        if dim != 1 && dim != 2 {
            return Err(Error::config("dim", format!("must be 1 or 2, got {dim}")));
        }
        if resolution < MIN_RESOLUTION {
            return Err(Error::config(
                "resolution",
                format!("must be at least {MIN_RESOLUTION}, got {resolution}"),
            ));
        }
        let SupportRadii { inner, outer } = radii;
        if !(inner > 0.0 && inner < outer && outer < 1.0) {
            return Err(Error::config(
                "support_radii",
                format!("need 0 < R1 < R2 < 1, got ({inner}, {outer})"),
            ));
        }
        let n = resolution;
        let h = 2.0 / (n - 1) as f64;
        let axis = |i: usize| -1.0 + i as f64 * h;

        let mut coords = Vec::new();
        let mut lattice = Vec::new();
        let mut interior = Vec::new();
        let mut lookup = vec![usize::MAX; if dim == 1 { n } else { n * n }];

        if dim == 1 {
            for i in 0..n {
                let x = if i == n - 1 { 1.0 } else { axis(i) };
                lookup[i] = coords.len();
                coords.push([x, 0.0]);
                lattice.push([i, 0]);
                interior.push(i != 0 && i != n - 1);
            }
        } else {
            for j in 0..n {
                for i in 0..n {
                    let (x, y) = (axis(i), axis(j));
                    let r2 = x * x + y * y;
                    if r2 <= 1.0 + 1e-12 {
                        lookup[j * n + i] = coords.len();
                        coords.push([x, y]);
                        lattice.push([i, j]);
                        interior.push(r2 < 1.0 - ON_CIRCLE_BAND);
                    }
                }
            }
        }

        let mut grid = Grid {
            id: NEXT_GRID_ID.fetch_add(1, Ordering::Relaxed),
            dim,
            resolution: n,
            spacing: h,
            radii,
            coords,
            lattice,
            lookup,
            interior,
            boundary: Vec::new(),
            arms: Vec::new(),
            stencils: OnceLock::new(),
            dirichlet: OnceLock::new(),
            pair_cache: Mutex::new(HashMap::new()),
        };
        grid.build_boundary();
        Ok(Arc::new(grid))
    }

    fn build_boundary(&mut self) {
        let n_nodes = self.coords.len();
        let mut arms = vec![[Arm::Boundary(1.0); 4]; n_nodes];
        let mut boundary = Vec::new();
        let mut seen: HashMap<(i64, i64), usize> = HashMap::new();
        let mut add = |point: [f64; 2], lattice_node: Option<usize>, boundary: &mut Vec<BoundaryNode>| {
            let key = ((point[0] * 1e9).round() as i64, (point[1] * 1e9).round() as i64);
            seen.entry(key).or_insert_with(|| {
                boundary.push(BoundaryNode { point, lattice_node });
                boundary.len() - 1
            });
        };
        for p in 0..n_nodes {
            if !self.interior[p] {
                add(self.coords[p], Some(p), &mut boundary);
            }
        }
        let h = self.spacing;
        for p in 0..n_nodes {
            if !self.interior[p] {
                continue;
            }
            let [x, y] = self.coords[p];
            let axes = if self.dim == 1 { 1 } else { 2 };
            for axis in 0..axes {
                for (slot, sign) in [(2 * axis, 1i64), (2 * axis + 1, -1i64)] {
                    match self.neighbor(p, axis, sign) {
                        Some(q) if self.interior[q] => arms[p][slot] = Arm::Node(q),
                        Some(_) => arms[p][slot] = Arm::Boundary(1.0),
                        None => {
                            // Crossing of the lattice line with the unit circle.
                            let s = sign as f64;
                            let point = if axis == 0 {
                                [s * (1.0 - y * y).max(0.0).sqrt(), y]
                            } else {
                                [x, s * (1.0 - x * x).max(0.0).sqrt()]
                            };
                            let dist = if axis == 0 { (point[0] - x).abs() } else { (point[1] - y).abs() };
                            let theta = (dist / h).clamp(f64::MIN_POSITIVE, 1.0);
                            arms[p][slot] = Arm::Boundary(theta);
                            add(point, None, &mut boundary);
                        }
                    }
                }
            }
        }
        self.arms = arms;
        self.boundary = boundary;
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn radii(&self) -> SupportRadii {
        self.radii
    }

    /// Number of lattice nodes in the closed ball (the field carrier).
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, node: usize) -> &[f64] {
        &self.coords[node][..self.dim]
    }

    pub fn radius(&self, node: usize) -> f64 {
        let [x, y] = self.coords[node];
        (x * x + y * y).sqrt()
    }

    pub fn lattice_index(&self, node: usize) -> [usize; 2] {
        self.lattice[node]
    }

    /// Node at lattice position `(i, j)` if it lies in the closed ball.
    pub fn node_at(&self, i: usize, j: usize) -> Option<usize> {
        let n = self.resolution;
        if i >= n || (self.dim == 2 && j >= n) || (self.dim == 1 && j != 0) {
            return None;
        }
        let k = if self.dim == 1 { i } else { j * n + i };
        let id = self.lookup[k];
        (id != usize::MAX).then_some(id)
    }

    pub fn is_interior(&self, node: usize) -> bool {
        self.interior[node]
    }

    pub fn interior_mask(&self) -> &[bool] {
        &self.interior
    }

    pub fn boundary_nodes(&self) -> &[BoundaryNode] {
        &self.boundary
    }

    /// Stencil arms at an interior node in the order `+x, -x, +y, -y`.
    pub fn arms(&self, node: usize) -> &[Arm] {
        &self.arms[node][..2 * self.dim]
    }

    /// Identity used to check that fields live on the same grid.
    pub fn id(&self) -> u64 {
        self.id
    }

    fn neighbor(&self, p: usize, axis: usize, offset: i64) -> Option<usize> {
        let [i, j] = self.lattice[p];
        let (mut i, mut j) = (i as i64, j as i64);
        if axis == 0 {
            i += offset;
        } else {
            j += offset;
        }
        if i < 0 || j < 0 {
            return None;
        }
        self.node_at(i as usize, j as usize)
    }

    fn run_length(&self, p: usize, axis: usize, sign: i64, max: i64) -> i64 {
        let mut k = 0;
        while k < max && self.neighbor(p, axis, sign * (k + 1)).is_some() {
            k += 1;
        }
        k
    }

    fn stencils(&self) -> &Stencils {
        self.stencils.get_or_init(|| self.build_stencils())
    }

    fn build_stencils(&self) -> Stencils {
        let h = self.spacing;
        let mut first = Vec::new();
        let mut second = Vec::new();
        for axis in 0..self.dim {
            let mut d1 = Csr::default();
            let mut d2 = Csr::default();
            for p in 0..self.len() {
                let fwd = self.run_length(p, axis, 1, 3);
                let bwd = self.run_length(p, axis, -1, 3);
                let at = |k: i64| self.neighbor(p, axis, k).unwrap_or(p);
                let row1: Vec<(usize, f64)> = if fwd >= 1 && bwd >= 1 {
                    vec![(at(1), 0.5 / h), (at(-1), -0.5 / h)]
                } else if fwd >= 2 {
                    vec![(p, -1.5 / h), (at(1), 2.0 / h), (at(2), -0.5 / h)]
                } else if bwd >= 2 {
                    vec![(p, 1.5 / h), (at(-1), -2.0 / h), (at(-2), 0.5 / h)]
                } else {
                    self.fitted_row(p, axis, 1)
                };
                let h2 = h * h;
                let row2: Vec<(usize, f64)> = if fwd >= 1 && bwd >= 1 {
                    vec![(at(1), 1.0 / h2), (p, -2.0 / h2), (at(-1), 1.0 / h2)]
                } else if fwd >= 3 {
                    vec![(p, 2.0 / h2), (at(1), -5.0 / h2), (at(2), 4.0 / h2), (at(3), -1.0 / h2)]
                } else if bwd >= 3 {
                    vec![(p, 2.0 / h2), (at(-1), -5.0 / h2), (at(-2), 4.0 / h2), (at(-3), -1.0 / h2)]
                } else {
                    self.fitted_row(p, axis, 2)
                };
                d1.push_row(&row1);
                d2.push_row(&row2);
            }
            first.push(d1);
            second.push(d2);
        }
        Stencils { first, second }
    }

    /// Least-squares cubic fit over nearby nodes, for the few nodes whose lattice
    /// line is too short for a one-sided stencil.
    fn fitted_row(&self, p: usize, axis: usize, order: usize) -> Vec<(usize, f64)> {
        const NEIGHBORS: usize = 20;
        let h = self.spacing;
        let [x0, y0] = self.coords[p];
        let mut near: Vec<(f64, usize)> = (0..self.len())
            .map(|q| {
                let [x, y] = self.coords[q];
                ((x - x0).powi(2) + (y - y0).powi(2), q)
            })
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0));
        near.truncate(NEIGHBORS);
        let monomials: [(i32, i32); 10] =
            [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2), (3, 0), (2, 1), (1, 2), (0, 3)];
        let vander = DMatrix::from_fn(near.len(), monomials.len(), |r, c| {
            let [x, y] = self.coords[near[r].1];
            let (ex, ey) = monomials[c];
            ((x - x0) / h).powi(ex) * ((y - y0) / h).powi(ey)
        });
        let pinv = vander
            .pseudo_inverse(1e-12)
            .expect("pseudo-inverse of a local Vandermonde matrix");
        let (target, scale) = match (axis, order) {
            (0, 1) => (1, 1.0 / h),
            (1, 1) => (2, 1.0 / h),
            (0, _) => (3, 2.0 / (h * h)),
            _ => (5, 2.0 / (h * h)),
        };
        near.iter()
            .enumerate()
            .map(|(r, &(_, q))| (q, scale * pinv[(target, r)]))
            .collect()
    }

    pub(crate) fn first_derivative(&self, axis: usize, values: &[f64]) -> Vec<f64> {
        self.stencils().first[axis].apply(values)
    }

    pub(crate) fn second_derivative(&self, axis: usize, values: &[f64]) -> Vec<f64> {
        self.stencils().second[axis].apply(values)
    }

    /// Applies `∂^s` by composing second-order first and second difference stencils.
    pub(crate) fn apply_multi_index(&self, s: MultiIndex, values: &[f64]) -> Vec<f64> {
        let mut out = values.to_vec();
        for axis in 0..self.dim {
            let k = s.get(axis);
            for _ in 0..k / 2 {
                out = self.second_derivative(axis, &out);
            }
            if k % 2 == 1 {
                out = self.first_derivative(axis, &out);
            }
        }
        out
    }

    /// Deterministic sample of node pairs used by Hölder quotients on large grids.
    pub(crate) fn sampled_pairs(&self, seed: u64, count: usize) -> Arc<Vec<(u32, u32)>> {
        use rand::{Rng, SeedableRng};
        let mut cache = self.pair_cache.lock().expect("pair cache poisoned");
        cache
            .entry(seed ^ (count as u64).rotate_left(32))
            .or_insert_with(|| {
                let m = self.len();
                let mut pairs = Vec::with_capacity(count + 2 * m);
                for p in 0..m {
                    for axis in 0..self.dim {
                        if let Some(q) = self.neighbor(p, axis, 1) {
                            pairs.push((p as u32, q as u32));
                        }
                    }
                }
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                while pairs.len() < count + 2 * m {
                    let p = rng.random_range(0..m);
                    let q = rng.random_range(0..m);
                    if p != q {
                        pairs.push((p as u32, q as u32));
                    }
                }
                Arc::new(pairs)
            })
            .clone()
    }
}

/// Multi-index `s` of a partial derivative `∂^s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize)]
pub struct MultiIndex([u8; 2]);

impl MultiIndex {
    pub fn new(s: &[usize]) -> Self {
        let mut out = [0u8; 2];
        for (slot, &k) in out.iter_mut().zip(s) {
            *slot = k as u8;
        }
        MultiIndex(out)
    }

    /// `k`-fold derivative along one axis.
    pub fn axis(axis: usize, k: usize) -> Self {
        let mut out = [0u8; 2];
        out[axis] = k as u8;
        MultiIndex(out)
    }

    pub fn zero() -> Self {
        MultiIndex([0, 0])
    }

    pub fn get(&self, axis: usize) -> usize {
        self.0[axis] as usize
    }

    pub fn order(&self) -> usize {
        self.0.iter().map(|&k| k as usize).sum()
    }

    /// All multi-indices of exact order `m` in dimension `dim`.
    pub fn all_of_order(dim: usize, m: usize) -> Vec<MultiIndex> {
        if dim == 1 {
            vec![MultiIndex([m as u8, 0])]
        } else {
            (0..=m).rev().map(|k| MultiIndex([k as u8, (m - k) as u8])).collect()
        }
    }

    /// Componentwise `self <= other`.
    pub fn le(&self, other: &MultiIndex) -> bool {
        self.0[0] <= other.0[0] && self.0[1] <= other.0[1]
    }

    pub fn sub(&self, other: &MultiIndex) -> MultiIndex {
        MultiIndex([self.0[0] - other.0[0], self.0[1] - other.0[1]])
    }
}

fn check_multi_index(grid: &Grid, s: MultiIndex) -> Result<()> {
    if s.order() > 4 {
        return Err(Error::UnsupportedOrder { order: s.order() });
    }
    if grid.dim() == 1 && s.get(1) != 0 {
        return Err(Error::Dimension("multi-index has a second axis on a 1-D grid".into()));
    }
    Ok(())
}

pub(crate) fn ensure_same(a: &Grid, b: &Grid) -> Result<()> {
    if a.id() == b.id() {
        Ok(())
    } else {
        Err(Error::GridMismatch)
    }
}

/// Real function sampled at every grid node.
#[derive(Debug, Clone)]
pub struct ScalarField {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "scalar field has {} values for {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("scalar field has non-finite values".into()));
        }
        Ok(Self { grid, values })
    }

    pub(crate) fn from_vec(grid: Arc<Grid>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.len()).map(|p| f(grid.point(p))).collect();
        Self { grid: grid.clone(), values }
    }

    pub fn zeros(grid: &Arc<Grid>) -> Self {
        Self { grid: grid.clone(), values: vec![0.0; grid.len()] }
    }

    pub fn constant(grid: &Arc<Grid>, c: f64) -> Self {
        Self { grid: grid.clone(), values: vec![c; grid.len()] }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn max_abs(&self) -> f64 {
        max_abs(&self.values)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_vec(self.grid.clone(), self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_with(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        ensure_same(&self.grid, &other.grid)?;
        Ok(Self::from_vec(
            self.grid.clone(),
            self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    pub fn mul(&self, other: &ScalarField) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn add(&self, other: &ScalarField) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ScalarField) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }
}

/// Vector-valued field with a fixed number of components per node.
#[derive(Debug, Clone)]
pub struct VecField {
    grid: Arc<Grid>,
    comps: Vec<Vec<f64>>,
}

impl VecField {
    pub fn new(grid: Arc<Grid>, comps: Vec<Vec<f64>>) -> Result<Self> {
        if comps.is_empty() {
            return Err(Error::Dimension("vector field needs at least one component".into()));
        }
        for c in &comps {
            if c.len() != grid.len() {
                return Err(Error::Dimension(format!(
                    "component has {} values for {} nodes",
                    c.len(),
                    grid.len()
                )));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::Precondition("vector field has non-finite values".into()));
            }
        }
        Ok(Self { grid, comps })
    }

    pub(crate) fn from_comps(grid: Arc<Grid>, comps: Vec<Vec<f64>>) -> Self {
        Self { grid, comps }
    }

    pub fn from_fn(grid: &Arc<Grid>, ncomp: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        let mut comps = vec![Vec::with_capacity(grid.len()); ncomp];
        for p in 0..grid.len() {
            let v = f(grid.point(p));
            assert_eq!(v.len(), ncomp, "closure returned wrong component count");
            for (c, x) in comps.iter_mut().zip(v) {
                c.push(x);
            }
        }
        Self { grid: grid.clone(), comps }
    }

    pub fn zeros(grid: &Arc<Grid>, ncomp: usize) -> Self {
        Self { grid: grid.clone(), comps: vec![vec![0.0; grid.len()]; ncomp] }
    }

    pub fn from_scalars(fields: &[ScalarField]) -> Result<Self> {
        let grid = fields
            .first()
            .ok_or_else(|| Error::Dimension("no components".into()))?
            .grid
            .clone();
        for f in fields {
            ensure_same(&grid, &f.grid)?;
        }
        Ok(Self { grid, comps: fields.iter().map(|f| f.values.clone()).collect() })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn ncomp(&self) -> usize {
        self.comps.len()
    }

    pub fn component(&self, k: usize) -> &[f64] {
        &self.comps[k]
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.comps
    }

    pub fn scalar(&self, k: usize) -> ScalarField {
        ScalarField::from_vec(self.grid.clone(), self.comps[k].clone())
    }

    pub fn at(&self, node: usize) -> Vec<f64> {
        self.comps.iter().map(|c| c[node]).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.comps.iter().map(|c| max_abs(c)).fold(0.0, f64::max)
    }

    pub fn map_components(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        Self { grid: self.grid.clone(), comps: self.comps.iter().map(|c| f(c)).collect() }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map_components(|v| v.iter().map(|x| c * x).collect())
    }

    pub fn zip_with(&self, other: &VecField, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        ensure_same(&self.grid, &other.grid)?;
        if self.ncomp() != other.ncomp() {
            return Err(Error::Dimension(format!(
                "component counts differ: {} vs {}",
                self.ncomp(),
                other.ncomp()
            )));
        }
        let comps = self
            .comps
            .iter()
            .zip(&other.comps)
            .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
            .collect();
        Ok(Self { grid: self.grid.clone(), comps })
    }

    pub fn add(&self, other: &VecField) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &VecField) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Pointwise Euclidean inner product.
    pub fn dot(&self, other: &VecField) -> Result<ScalarField> {
        ensure_same(&self.grid, &other.grid)?;
        if self.ncomp() != other.ncomp() {
            return Err(Error::Dimension("dot product of fields with different widths".into()));
        }
        let mut out = vec![0.0; self.grid.len()];
        for (a, b) in self.comps.iter().zip(&other.comps) {
            for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
                *o += x * y;
            }
        }
        Ok(ScalarField::from_vec(self.grid.clone(), out))
    }

    /// Multiplies every component by a scalar field.
    pub fn scale_by(&self, a: &ScalarField) -> Result<Self> {
        ensure_same(&self.grid, &a.grid)?;
        Ok(self.map_components(|c| c.iter().zip(&a.values).map(|(x, s)| x * s).collect()))
    }
}

/// Number of independent components of a symmetric `n × n` tensor.
pub fn sym_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Lexicographic position of `(i, j)` (either order) among pairs `i <= j`.
pub fn sym_index(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * n - i * (i + 1) / 2 + j
}

/// Inverse of [`sym_index`].
pub fn sym_pair(n: usize, k: usize) -> (usize, usize) {
    let mut k = k;
    for i in 0..n {
        let row = n - i;
        if k < row {
            return (i, i + k);
        }
        k -= row;
    }
    panic!("symmetric index out of range");
}

/// Symmetric 2-tensor field stored as its `n(n+1)/2` lexicographic components.
#[derive(Debug, Clone)]
pub struct SymTensorField {
    grid: Arc<Grid>,
    comps: Vec<Vec<f64>>,
}

impl SymTensorField {
    pub fn new(grid: Arc<Grid>, comps: Vec<Vec<f64>>) -> Result<Self> {
        let want = sym_len(grid.dim());
        if comps.len() != want {
            return Err(Error::Dimension(format!(
                "symmetric tensor needs {want} components, got {}",
                comps.len()
            )));
        }
        let checked = VecField::new(grid, comps)?;
        Ok(Self { grid: checked.grid, comps: checked.comps })
    }

    pub(crate) fn from_comps(grid: Arc<Grid>, comps: Vec<Vec<f64>>) -> Self {
        debug_assert_eq!(comps.len(), sym_len(grid.dim()));
        Self { grid, comps }
    }

    pub fn zeros(grid: &Arc<Grid>) -> Self {
        Self { grid: grid.clone(), comps: vec![vec![0.0; grid.len()]; sym_len(grid.dim())] }
    }

    /// Builds a tensor field from a closure returning components in lexicographic order.
    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        let v = VecField::from_fn(grid, sym_len(grid.dim()), f);
        Self { grid: v.grid, comps: v.comps }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn get(&self, i: usize, j: usize) -> &[f64] {
        &self.comps[sym_index(self.grid.dim(), i, j)]
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.comps
    }

    pub fn max_abs(&self) -> f64 {
        self.comps.iter().map(|c| max_abs(c)).fold(0.0, f64::max)
    }

    pub fn as_vec_field(&self) -> VecField {
        VecField::from_comps(self.grid.clone(), self.comps.clone())
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            comps: self.comps.iter().map(|v| v.iter().map(|x| c * x).collect()).collect(),
        }
    }

    pub fn sub(&self, other: &SymTensorField) -> Result<Self> {
        let d = self.as_vec_field().sub(&other.as_vec_field())?;
        Ok(Self { grid: d.grid, comps: d.comps })
    }

    pub fn add(&self, other: &SymTensorField) -> Result<Self> {
        let d = self.as_vec_field().add(&other.as_vec_field())?;
        Ok(Self { grid: d.grid, comps: d.comps })
    }

    pub fn scale_by(&self, a: &ScalarField) -> Result<Self> {
        let d = self.as_vec_field().scale_by(a)?;
        Ok(Self { grid: d.grid, comps: d.comps })
    }
}

/// Finite-difference partial derivative `∂^s`.
pub trait Differentiate: Sized {
    fn derivative(&self, s: MultiIndex) -> Result<Self>;
}

impl Differentiate for ScalarField {
    fn derivative(&self, s: MultiIndex) -> Result<Self> {
        check_multi_index(&self.grid, s)?;
        Ok(Self::from_vec(self.grid.clone(), self.grid.apply_multi_index(s, &self.values)))
    }
}

impl Differentiate for VecField {
    fn derivative(&self, s: MultiIndex) -> Result<Self> {
        check_multi_index(&self.grid, s)?;
        Ok(self.map_components(|c| self.grid.apply_multi_index(s, c)))
    }
}

impl Differentiate for SymTensorField {
    fn derivative(&self, s: MultiIndex) -> Result<Self> {
        check_multi_index(&self.grid, s)?;
        Ok(Self {
            grid: self.grid.clone(),
            comps: self.comps.iter().map(|c| self.grid.apply_multi_index(s, c)).collect(),
        })
    }
}

/// Free-function form of [`Differentiate::derivative`].
pub fn derivative<F: Differentiate>(field: &F, s: MultiIndex) -> Result<F> {
    field.derivative(s)
}

pub(crate) fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn radii() -> SupportRadii {
        SupportRadii::new(0.5, 0.75)
    }

    #[test]
    fn uniform_line_grid() {
        let g = make_grid(1, 201, radii()).unwrap();
        assert_eq!(g.len(), 201);
        assert!((g.spacing() - 0.01).abs() < 1e-15);
        assert_eq!(g.point(0), &[-1.0]);
        assert_eq!(g.point(200), &[1.0]);
        assert_eq!(g.interior_mask().iter().filter(|&&b| b).count(), 199);
        assert_eq!(g.boundary_nodes().len(), 2);
    }

    #[test]
    fn disk_grid_counts_lattice_points() {
        let g = make_grid(2, 65, radii()).unwrap();
        // brute-force lattice scan
        let h = 2.0 / 64.0;
        let mut count = 0;
        for j in 0..65 {
            for i in 0..65 {
                let (x, y) = (-1.0 + i as f64 * h, -1.0 + j as f64 * h);
                if x * x + y * y <= 1.0 + 1e-12 {
                    count += 1;
                }
            }
        }
        assert_eq!(g.len(), count);
        for p in 0..g.len() {
            assert!(g.radius(p) <= 1.0 + 1e-12);
        }
        for b in g.boundary_nodes() {
            let r = (b.point[0].powi(2) + b.point[1].powi(2)).sqrt();
            assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_configuration_names_field() {
        let err = make_grid(3, 65, radii()).unwrap_err();
        assert!(matches!(err, Error::Config { field: "dim", .. }));
        let err = make_grid(1, 9, radii()).unwrap_err();
        assert!(matches!(err, Error::Config { field: "resolution", .. }));
        let err = make_grid(1, 65, SupportRadii::new(0.8, 0.7)).unwrap_err();
        assert!(matches!(err, Error::Config { field: "support_radii", .. }));
    }

    #[test]
    fn symmetric_index_is_bijective() {
        for n in 1..=3 {
            let mut seen = vec![false; sym_len(n)];
            for i in 0..n {
                for j in i..n {
                    let k = sym_index(n, i, j);
                    assert!(!seen[k]);
                    seen[k] = true;
                    assert_eq!(sym_pair(n, k), (i, j));
                    assert_eq!(sym_index(n, j, i), k);
                }
            }
            assert!(seen.iter().all(|&b| b));
        }
    }

    #[test]
    fn first_derivative_exact_on_quadratics() {
        let g = make_grid(1, 101, radii()).unwrap();
        let u = ScalarField::from_fn(&g, |x| x[0] * x[0]);
        let du = u.derivative(MultiIndex::axis(0, 1)).unwrap();
        for p in 0..g.len() {
            assert!((du.values()[p] - 2.0 * g.point(p)[0]).abs() < 1e-10);
        }
        let id = u.derivative(MultiIndex::zero()).unwrap();
        assert_eq!(id.values(), u.values());
    }

    #[test]
    fn second_derivative_converges_at_second_order() {
        let err = |n| {
            let g = make_grid(1, n, radii()).unwrap();
            let u = ScalarField::from_fn(&g, |x| (PI * x[0]).sin());
            let d2 = u.derivative(MultiIndex::axis(0, 2)).unwrap();
            (0..g.len())
                .filter(|&p| g.is_interior(p))
                .map(|p| (d2.values()[p] + PI * PI * (PI * g.point(p)[0]).sin()).abs())
                .fold(0.0, f64::max)
        };
        let ratio = err(201) / err(401);
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn order_above_four_is_rejected() {
        let g = make_grid(1, 33, radii()).unwrap();
        let u = ScalarField::zeros(&g);
        assert!(matches!(
            u.derivative(MultiIndex::axis(0, 5)),
            Err(Error::UnsupportedOrder { order: 5 })
        ));
    }

    #[test]
    fn disk_derivatives_exact_on_quadratics() {
        let g = make_grid(2, 33, radii()).unwrap();
        let u = ScalarField::from_fn(&g, |x| x[0] * x[0] + 3.0 * x[0] * x[1] - x[1] * x[1]);
        let ux = u.derivative(MultiIndex::new(&[1, 0])).unwrap();
        let uy = u.derivative(MultiIndex::new(&[0, 1])).unwrap();
        let uxy = u.derivative(MultiIndex::new(&[1, 1])).unwrap();
        let uyy = u.derivative(MultiIndex::new(&[0, 2])).unwrap();
        for p in 0..g.len() {
            let [x, y] = [g.point(p)[0], g.point(p)[1]];
            assert!((ux.values()[p] - (2.0 * x + 3.0 * y)).abs() < 1e-9, "node {p}");
            assert!((uy.values()[p] - (3.0 * x - 2.0 * y)).abs() < 1e-9, "node {p}");
            assert!((uxy.values()[p] - 3.0).abs() < 1e-7, "node {p}");
            assert!((uyy.values()[p] + 2.0).abs() < 1e-7, "node {p}");
        }
    }

    #[test]
    fn every_interior_disk_node_has_arms() {
        let g = make_grid(2, 33, radii()).unwrap();
        for p in 0..g.len() {
            if g.is_interior(p) {
                for arm in g.arms(p) {
                    if let Arm::Boundary(theta) = arm {
                        assert!(*theta > 0.0 && *theta <= 1.0);
                    }
                }
            }
        }
    }
}
