//! Simplicial subdivision of the parameter box.
//!
//! Every simplex stores its vertices as an ordered tuple `(v_0, …, v_n)`:
//! the affine image of the reference Kuhn simplex
//! `{x : 1 ≥ x_1 ≥ … ≥ x_n ≥ 0}` (vertices `w_j = (1^j, 0^{n-j})`) under
//! `x ↦ v_0 + Σ_j x_j (v_j - v_{j-1})`. Halving the reference cube cuts the
//! reference simplex into `2ⁿ` Kuhn simplices of half the size, so
//! refinement is a fixed combinatorial rule on vertex indices and preserves
//! the aspect ratio of the reference simplex.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `ξ(β) = slopeᵀβ + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub slope: Vec<f64>,
    pub offset: f64,
}

impl Affine {
    pub fn zero(n: usize) -> Self {
        Self {
            slope: vec![0.0; n],
            offset: 0.0,
        }
    }

    pub fn eval(&self, beta: &[f64]) -> f64 {
        self.offset + self.slope.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Active,
    Refined,
    Dismissed,
    Incumbent,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Active => "active",
            Status::Refined => "refined",
            Status::Dismissed => "dismissed",
            Status::Incumbent => "incumbent",
        }
    }

    /// Active or incumbent: still part of the search.
    pub fn is_live(&self) -> bool {
        matches!(self, Status::Active | Status::Incumbent)
    }
}

/// Half-space form `{β : Kβ ≤ b}`. Row `i` is the unit outward normal of
/// the facet opposite vertex `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfSpaces {
    pub k: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl HalfSpaces {
    /// `Kβ - b`.
    pub fn residual(&self, beta: &[f64]) -> DVector<f64> {
        &self.k * DVector::from_column_slice(beta) - &self.b
    }

    pub fn contains(&self, beta: &[f64], tol: f64) -> bool {
        self.residual(beta).iter().all(|r| *r <= tol)
    }
}

#[derive(Debug, Clone)]
pub struct Simplex {
    pub id: usize,
    pub depth: u32,
    pub parent: Option<usize>,
    pub vertices: Vec<Vec<f64>>,
    pub halfspaces: HalfSpaces,
    /// Affine interpolant of the value function, once vertex values are known.
    pub xi: Option<Affine>,
    /// Penalty parameter handed down by the parent (starting point of the
    /// γ search).
    pub gamma_inherited: f64,
    pub lower_bound: f64,
    pub status: Status,
}

impl Simplex {
    pub fn new(id: usize, depth: u32, vertices: Vec<Vec<f64>>) -> Result<Self> {
        let n = vertices.len().saturating_sub(1);
        if n == 0 || vertices.iter().any(|v| v.len() != n) {
            return Err(Error::Usage(format!(
                "a simplex in R^{n} needs {} vertices of length {n}",
                n + 1
            )));
        }
        let halfspaces = halfspaces(&vertices)?;
        Ok(Self {
            id,
            depth,
            parent: None,
            vertices,
            halfspaces,
            xi: None,
            gamma_inherited: 0.0,
            lower_bound: f64::NEG_INFINITY,
            status: Status::Active,
        })
    }

    pub fn dim(&self) -> usize {
        self.vertices.len() - 1
    }

    pub fn volume(&self) -> f64 {
        volume(&self.vertices)
    }

    pub fn diameter(&self) -> f64 {
        diameter(&self.vertices)
    }

    pub fn centroid(&self) -> Vec<f64> {
        let n = self.dim();
        let mut c = vec![0.0; n];
        for v in &self.vertices {
            for i in 0..n {
                c[i] += v[i];
            }
        }
        c.iter().map(|x| x / (n + 1) as f64).collect()
    }

    pub fn contains(&self, beta: &[f64], tol: f64) -> bool {
        self.halfspaces.contains(beta, tol)
    }

    pub fn aspect_ratio(&self) -> f64 {
        aspect_ratio(&self.vertices)
    }

    /// Maps reference coordinates `x` (with `1 ≥ x_1 ≥ … ≥ x_n ≥ 0`) into the
    /// simplex.
    pub fn chart(&self, x: &[f64]) -> Vec<f64> {
        let mut p = self.vertices[0].clone();
        for (j, xj) in x.iter().enumerate() {
            for i in 0..p.len() {
                p[i] += xj * (self.vertices[j + 1][i] - self.vertices[j][i]);
            }
        }
        p
    }
}

/// `|det(v_1 - v_0, …, v_n - v_0)| / n!`
pub fn volume(vertices: &[Vec<f64>]) -> f64 {
    let n = vertices.len() - 1;
    let m = edge_matrix(vertices);
    let fact: f64 = (1..=n).map(|k| k as f64).product();
    m.determinant().abs() / fact
}

pub fn diameter(vertices: &[Vec<f64>]) -> f64 {
    let mut d: f64 = 0.0;
    for i in 0..vertices.len() {
        for j in (i + 1)..vertices.len() {
            let s: f64 = vertices[i]
                .iter()
                .zip(&vertices[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d = d.max(s.sqrt());
        }
    }
    d
}

fn edge_matrix(vertices: &[Vec<f64>]) -> DMatrix<f64> {
    let n = vertices.len() - 1;
    DMatrix::from_fn(n, n, |i, j| vertices[j + 1][i] - vertices[0][i])
}

/// Half-space representation with unit facet normals.
pub fn halfspaces(vertices: &[Vec<f64>]) -> Result<HalfSpaces> {
    let n = vertices.len() - 1;
    let e = edge_matrix(vertices);
    let scale: f64 = e.column_iter().map(|c| c.norm()).product();
    let det = e.determinant();
    if !(det.abs() > 1e-13 * scale) {
        return Err(Error::Degenerate(format!("edge determinant {det:e}")));
    }
    let inv = e
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("edge matrix not invertible".into()))?;
    let v0 = DVector::from_column_slice(&vertices[0]);
    // barycentric λ_j = (E⁻¹(β - v_0))_j for j ≥ 1, λ_0 = 1 - Σ λ_j
    let mut k = DMatrix::zeros(n + 1, n);
    let mut b = DVector::zeros(n + 1);
    let sum_rows = inv.row_sum();
    for c in 0..n {
        k[(0, c)] = sum_rows[c];
    }
    b[0] = 1.0 + (sum_rows * &v0)[0];
    for j in 1..=n {
        let row = -inv.row(j - 1);
        for c in 0..n {
            k[(j, c)] = row[c];
        }
        b[j] = (row * &v0)[0];
    }
    for r in 0..=n {
        let norm = k.row(r).norm();
        for c in 0..n {
            k[(r, c)] /= norm;
        }
        b[r] /= norm;
    }
    Ok(HalfSpaces { k, b })
}

/// Affine interpolant through `(v_k, values[k])`.
pub fn build_xi(vertices: &[Vec<f64>], values: &[f64]) -> Result<Affine> {
    let n = vertices.len() - 1;
    if values.len() != n + 1 {
        return Err(Error::Usage(format!("need {} vertex values", n + 1)));
    }
    let m = DMatrix::from_fn(
        n + 1,
        n + 1,
        |r, c| if c < n { vertices[r][c] } else { 1.0 },
    );
    let rhs = DVector::from_column_slice(values);
    let sol = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Degenerate("singular vertex system".into()))?;
    Ok(Affine {
        slope: sol.rows(0, n).iter().copied().collect(),
        offset: sol[n],
    })
}

/// `ρ(T) = 2r / diam(T)` with inradius `r = 1 / Σ_i 1/height_i`.
/// Returns 0 for degenerate input.
pub fn aspect_ratio(vertices: &[Vec<f64>]) -> f64 {
    let Ok(hs) = halfspaces(vertices) else {
        return 0.0;
    };
    let mut inv_heights = 0.0;
    for (i, v) in vertices.iter().enumerate() {
        // slack of vertex i in its own row is its distance to the opposite facet
        let row = hs.k.row(i);
        let kv: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
        let height = hs.b[i] - kv;
        if !(height > 0.0) {
            return 0.0;
        }
        inv_heights += 1.0 / height;
    }
    let d = diameter(vertices);
    if d == 0.0 {
        return 0.0;
    }
    (2.0 / inv_heights / d).min(1.0)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// The `n!` Kuhn simplices of the box; ids are `0..n!`.
pub fn initial_triangulation(lower: &[f64], upper: &[f64]) -> Result<Vec<Simplex>> {
    let n = lower.len();
    if n == 0 || upper.len() != n || lower.iter().zip(upper).any(|(a, b)| !(a < b)) {
        return Err(Error::Usage("invalid box".into()));
    }
    permutations(n)
        .into_iter()
        .enumerate()
        .map(|(id, perm)| {
            let mut vertices = Vec::with_capacity(n + 1);
            let mut v = lower.to_vec();
            vertices.push(v.clone());
            for &axis in &perm {
                v[axis] = upper[axis];
                vertices.push(v.clone());
            }
            Simplex::new(id, 0, vertices)
        })
        .collect()
}

/// Vertex index pairs `(a, c)` of the children: child vertex `j` is the
/// midpoint of parent vertices `a` and `c` (the vertex itself when equal).
///
/// Children are ordered by split index `k`, then by interleaving bitmask.
pub fn child_vertex_indices(n: usize) -> Vec<Vec<(usize, usize)>> {
    let mut children = Vec::with_capacity(1 << n);
    for k in 0..=n {
        for mask in 0u32..(1u32 << n) {
            if mask.count_ones() as usize != k {
                continue;
            }
            // bit p set: position p of the merged order draws from the first chain
            let mut a = 0;
            let mut b = 0;
            let mut tuple = Vec::with_capacity(n + 1);
            tuple.push((0, k));
            for p in 0..n {
                if mask & (1 << p) != 0 {
                    a += 1;
                } else {
                    b += 1;
                }
                tuple.push((a, k + b));
            }
            children.push(tuple);
        }
    }
    children
}

fn midpoint(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect()
}

/// Splits `parent` into `2ⁿ` children with ids `first_id..first_id + 2ⁿ`.
/// Children inherit the parent's lower bound and penalty parameter.
pub fn refine(parent: &Simplex, first_id: usize, gamma: f64) -> Result<Vec<Simplex>> {
    let n = parent.dim();
    if parent.volume() <= 0.0 {
        return Err(Error::Degenerate(format!(
            "simplex {} has zero volume",
            parent.id
        )));
    }
    child_vertex_indices(n)
        .into_iter()
        .enumerate()
        .map(|(c, tuple)| {
            let vertices = tuple
                .into_iter()
                .map(|(a, b)| {
                    if a == b {
                        parent.vertices[a].clone()
                    } else {
                        midpoint(&parent.vertices[a], &parent.vertices[b])
                    }
                })
                .collect();
            let mut child = Simplex::new(first_id + c, parent.depth + 1, vertices)?;
            child.parent = Some(parent.id);
            child.gamma_inherited = gamma;
            child.lower_bound = parent.lower_bound;
            Ok(child)
        })
        .collect()
}

/// Reference Kuhn simplex `{1 ≥ x_1 ≥ … ≥ x_n ≥ 0}`.
pub fn reference_simplex(n: usize) -> Simplex {
    let vertices = (0..=n)
        .map(|j| (0..n).map(|i| if i < j { 1.0 } else { 0.0 }).collect())
        .collect();
    Simplex::new(0, 0, vertices).expect("reference simplex is non-degenerate")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_dimensional_box() {
        let t = initial_triangulation(&[0.0], &[1.0]).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].vertices, vec![vec![0.0], vec![1.0]]);
        let kids = refine(&t[0], 1, 0.0).unwrap();
        assert_eq!(kids.len(), 2);
        assert_eq!(kids[0].vertices, vec![vec![0.0], vec![0.5]]);
        assert_eq!(kids[1].vertices, vec![vec![0.5], vec![1.0]]);
    }

    #[test]
    fn two_triangles_on_paper_box() {
        let t = initial_triangulation(&[0.1, 0.1], &[1.0, 1.0]).unwrap();
        assert_eq!(t.len(), 2);
        for s in &t {
            assert!((s.volume() - 0.405).abs() < 1e-12);
        }
    }

    #[test]
    fn triangle_children_are_midpoint_triangles() {
        let t = reference_simplex(2);
        let kids = refine(&t, 1, 0.0).unwrap();
        assert_eq!(kids.len(), 4);
        let mids: Vec<Vec<f64>> = vec![
            midpoint(&t.vertices[0], &t.vertices[1]),
            midpoint(&t.vertices[1], &t.vertices[2]),
            midpoint(&t.vertices[0], &t.vertices[2]),
        ];
        for k in &kids {
            assert!((k.volume() - t.volume() / 4.0).abs() < 1e-15);
            // every child vertex is a parent vertex or an edge midpoint
            for v in &k.vertices {
                assert!(t.vertices.contains(v) || mids.contains(v));
            }
        }
        // every parent vertex appears in exactly one child (corner triangles)
        for v in &t.vertices {
            assert_eq!(kids.iter().filter(|k| k.vertices.contains(v)).count(), 1);
        }
    }

    #[test]
    fn child_count_matches_binomial_sum() {
        for n in 1..=5 {
            assert_eq!(child_vertex_indices(n).len(), 1 << n);
        }
    }

    #[test]
    fn halfspaces_of_unit_triangle() {
        let t = Simplex::new(0, 0, vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let c = t.centroid();
        assert!(t.halfspaces.residual(&c).iter().all(|r| *r < 0.0));
        for (i, v) in t.vertices.iter().enumerate() {
            let r = t.halfspaces.residual(v);
            let tight = r.iter().filter(|x| x.abs() < 1e-12).count();
            assert_eq!(tight, 2);
            assert!(r.iter().all(|x| *x <= 1e-12));
            assert!(r[i] < 0.0);
        }
        for r in 0..3 {
            assert!((t.halfspaces.k.row(r).norm() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn halfspaces_agree_with_barycentric_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in 1..=3 {
            for _ in 0..20 {
                let verts: Vec<Vec<f64>> = (0..=n)
                    .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect();
                let Ok(t) = Simplex::new(0, 0, verts.clone()) else {
                    continue;
                };
                // oracle: solve [v; 1] λ = [β; 1]
                let m =
                    DMatrix::from_fn(n + 1, n + 1, |r, c| if r < n { verts[c][r] } else { 1.0 });
                let lu = m.lu();
                for _ in 0..50 {
                    let beta: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
                    let mut rhs = DVector::from_column_slice(&beta).push(1.0);
                    rhs = lu.solve(&rhs).unwrap();
                    let inside_bary = rhs.iter().all(|l| *l >= 0.0);
                    let margin = rhs.iter().map(|l| l.abs()).fold(f64::INFINITY, f64::min);
                    if margin < 1e-9 {
                        continue;
                    }
                    assert_eq!(inside_bary, t.contains(&beta, 0.0));
                }
            }
        }
    }

    #[test]
    fn degenerate_simplex_is_rejected() {
        let r = Simplex::new(0, 0, vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]]);
        assert!(matches!(r, Err(Error::Degenerate(_))));
        assert_eq!(
            aspect_ratio(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]]),
            0.0
        );
    }

    #[test]
    fn xi_reproduces_affine_functions() {
        let t = Simplex::new(0, 0, vec![vec![0.1, 0.1], vec![1.0, 0.1], vec![1.0, 1.0]]).unwrap();
        let phi = |b: &[f64]| 2.0 * b[0] - b[1] + 3.0;
        let values: Vec<f64> = t.vertices.iter().map(|v| phi(v)).collect();
        let xi = build_xi(&t.vertices, &values).unwrap();
        assert!((xi.slope[0] - 2.0).abs() < 1e-12);
        assert!((xi.slope[1] + 1.0).abs() < 1e-12);
        assert!((xi.offset - 3.0).abs() < 1e-12);
        for v in &t.vertices {
            assert!((xi.eval(v) - phi(v)).abs() < 1e-13);
        }
    }

    #[test]
    fn equilateral_aspect_ratio() {
        let s3 = 3f64.sqrt();
        let rho = aspect_ratio(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.5, s3 / 2.0]]);
        assert!((rho - 1.0 / s3).abs() < 1e-14);
    }

    #[test]
    fn aspect_ratio_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in 1..=3 {
            for _ in 0..100 {
                let verts: Vec<Vec<f64>> = (0..=n)
                    .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect();
                let rho = aspect_ratio(&verts);
                assert!((0.0..=1.0).contains(&rho), "{n} {rho} {verts:?}");
            }
        }
    }

    #[test]
    fn chart_maps_reference_vertices() {
        let t = initial_triangulation(&[0.1, 0.2], &[1.0, 2.0]).unwrap();
        for s in &t {
            for j in 0..=2 {
                let x: Vec<f64> = (0..2).map(|i| if i < j { 1.0 } else { 0.0 }).collect();
                assert_eq!(s.chart(&x), s.vertices[j]);
            }
        }
    }
}
