//! Flat-shell finite element core.
//!
//! Each four-node rectangular element superposes
//! - a bilinear plane-stress membrane on `u, v`, stabilised by a drilling
//!   penalty tying `θz` to the in-plane rotation `½(∂v/∂x − ∂u/∂y)`,
//! - the 12-dof non-conforming cubic Kirchhoff plate on `w, θx, θy`
//!   (`θx = ∂w/∂y`, `θy = −∂w/∂x`).
//!
//! The membrane block (`u, v, θz`) is linear in the thickness and the bending
//! block (`w, θx, θy`) is cubic, so both are precomputed once per mesh at unit
//! thickness and scaled. The stress stiffness uses the bending shape
//! functions with element-constant membrane resultants and carries the sign
//! for which `(K − λ K_ss) u = 0` has positive `λ` under compression.

use nalgebra::{Matrix3, SMatrix, SVector};

use crate::error::{Error, Result};
use crate::linalg::{norm, CsrMatrix, SkylineCholesky};
use crate::model::{dof, DesignVector, Edge, LoadCase, OutOfPlane, PanelModel, DOFS_PER_NODE};

pub type Mat24 = SMatrix<f64, 24, 24>;
pub type Mat12 = SMatrix<f64, 12, 12>;

/// Penalty weight of the drilling constraint relative to the largest
/// membrane diagonal entry.
pub const DRILLING_PENALTY: f64 = 1e-6;

const MEMBRANE_DOFS: [usize; 3] = [dof::U, dof::V, dof::RZ];
const BENDING_DOFS: [usize; 3] = [dof::W, dof::RX, dof::RY];

const GAUSS2: [(f64, f64); 2] = [
    (-0.577_350_269_189_625_8, 1.0),
    (0.577_350_269_189_625_8, 1.0),
];
const GAUSS3: [(f64, f64); 3] = [
    (-0.774_596_669_241_483_4, 5.0 / 9.0),
    (0.0, 8.0 / 9.0),
    (0.774_596_669_241_483_4, 5.0 / 9.0),
];

const NODE_XI: [f64; 4] = [-1.0, 1.0, 1.0, -1.0];
const NODE_ETA: [f64; 4] = [-1.0, -1.0, 1.0, 1.0];

/// Membrane resultants (force per length) at an element centroid.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Resultants {
    pub nx: f64,
    pub ny: f64,
    pub nxy: f64,
}

impl Resultants {
    pub fn new(nx: f64, ny: f64, nxy: f64) -> Self {
        Self { nx, ny, nxy }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::new(self.nx * c, self.ny * c, self.nxy * c)
    }

    pub fn is_finite(&self) -> bool {
        self.nx.is_finite() && self.ny.is_finite() && self.nxy.is_finite()
    }
}

#[derive(Debug, Clone)]
pub struct ElementStiffness {
    pub element_id: usize,
    pub matrix: Mat24,
}

/// Unit-thickness element matrices for one rectangle size and material.
#[derive(Debug, Clone)]
pub struct ElementKernel {
    a: f64,
    b: f64,
    membrane: Mat12,
    bending: Mat12,
    geo_xx: Mat12,
    geo_yy: Mat12,
    geo_xy: Mat12,
    /// Plane-stress modulus per unit thickness.
    plane_stress: Matrix3<f64>,
    /// Centroidal membrane strain operator on `(u1, v1, …, u4, v4)`.
    centroid_strain: SMatrix<f64, 3, 8>,
}

fn plane_stress_matrix(e: f64, nu: f64) -> Matrix3<f64> {
    let c = e / (1.0 - nu * nu);
    Matrix3::new(
        c,
        c * nu,
        0.0,
        c * nu,
        c,
        0.0,
        0.0,
        0.0,
        c * (1.0 - nu) / 2.0,
    )
}

/// Bilinear shape function derivatives `(∂N/∂x, ∂N/∂y)` at `(ξ, η)`.
fn bilinear_gradients(a: f64, b: f64, xi: f64, eta: f64) -> ([f64; 4], [f64; 4]) {
    let mut dx = [0.0; 4];
    let mut dy = [0.0; 4];
    for k in 0..4 {
        dx[k] = NODE_XI[k] * (1.0 + NODE_ETA[k] * eta) / 4.0 * (2.0 / a);
        dy[k] = NODE_ETA[k] * (1.0 + NODE_XI[k] * xi) / 4.0 * (2.0 / b);
    }
    (dx, dy)
}

fn bilinear_values(xi: f64, eta: f64) -> [f64; 4] {
    std::array::from_fn(|k| (1.0 + NODE_XI[k] * xi) * (1.0 + NODE_ETA[k] * eta) / 4.0)
}

fn membrane_strain_operator(a: f64, b: f64, xi: f64, eta: f64) -> SMatrix<f64, 3, 8> {
    let (dx, dy) = bilinear_gradients(a, b, xi, eta);
    let mut bm = SMatrix::<f64, 3, 8>::zeros();
    for k in 0..4 {
        bm[(0, 2 * k)] = dx[k];
        bm[(1, 2 * k + 1)] = dy[k];
        bm[(2, 2 * k)] = dy[k];
        bm[(2, 2 * k + 1)] = dx[k];
    }
    bm
}

/// Cubic plate polynomial basis and its derivatives in natural coordinates.
struct PlateBasis;

impl PlateBasis {
    fn p(x: f64, y: f64) -> SVector<f64, 12> {
        SVector::from([
            1.0,
            x,
            y,
            x * x,
            x * y,
            y * y,
            x * x * x,
            x * x * y,
            x * y * y,
            y * y * y,
            x * x * x * y,
            x * y * y * y,
        ])
    }

    fn dx(x: f64, y: f64) -> SVector<f64, 12> {
        SVector::from([
            0.0,
            1.0,
            0.0,
            2.0 * x,
            y,
            0.0,
            3.0 * x * x,
            2.0 * x * y,
            y * y,
            0.0,
            3.0 * x * x * y,
            y * y * y,
        ])
    }

    fn dy(x: f64, y: f64) -> SVector<f64, 12> {
        SVector::from([
            0.0,
            0.0,
            1.0,
            0.0,
            x,
            2.0 * y,
            0.0,
            x * x,
            2.0 * x * y,
            3.0 * y * y,
            x * x * x,
            3.0 * x * y * y,
        ])
    }

    fn dxx(x: f64, y: f64) -> SVector<f64, 12> {
        SVector::from([
            0.0,
            0.0,
            0.0,
            2.0,
            0.0,
            0.0,
            6.0 * x,
            2.0 * y,
            0.0,
            0.0,
            6.0 * x * y,
            0.0,
        ])
    }

    fn dyy(x: f64, y: f64) -> SVector<f64, 12> {
        SVector::from([
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            2.0,
            0.0,
            0.0,
            2.0 * x,
            6.0 * y,
            0.0,
            6.0 * x * y,
        ])
    }

    fn dxy(x: f64, y: f64) -> SVector<f64, 12> {
        SVector::from([
            0.0,
            0.0,
            0.0,
            0.0,
            1.0,
            0.0,
            0.0,
            2.0 * x,
            2.0 * y,
            0.0,
            3.0 * x * x,
            3.0 * y * y,
        ])
    }
}

impl ElementKernel {
    pub fn new(a: f64, b: f64, material: &crate::model::Material) -> Self {
        assert!(a > 0.0 && b > 0.0, "element sides must be positive");
        let e = material.youngs_modulus;
        let nu = material.poisson_ratio;
        let plane_stress = plane_stress_matrix(e, nu);
        let jac = a * b / 4.0;

        // membrane (u, v per node) at unit thickness
        let mut km8 = SMatrix::<f64, 8, 8>::zeros();
        for &(xi, wx) in &GAUSS2 {
            for &(eta, wy) in &GAUSS2 {
                let bm = membrane_strain_operator(a, b, xi, eta);
                km8 += bm.transpose() * plane_stress * bm * (wx * wy * jac);
            }
        }
        let mut membrane = Mat12::zeros();
        for i in 0..4 {
            for j in 0..4 {
                for (p, q) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    membrane[(3 * i + p, 3 * j + q)] = km8[(2 * i + p, 2 * j + q)];
                }
            }
        }
        let kmax = (0..8).map(|i| km8[(i, i)]).fold(0.0, f64::max);
        // θz diagonal ends up at DRILLING_PENALTY * kmax: ∫N_i² dA = ab/9
        let gamma = DRILLING_PENALTY * kmax * 9.0 / (a * b);
        for &(xi, wx) in &GAUSS2 {
            for &(eta, wy) in &GAUSS2 {
                let n = bilinear_values(xi, eta);
                let (dx, dy) = bilinear_gradients(a, b, xi, eta);
                let mut row = SVector::<f64, 12>::zeros();
                for k in 0..4 {
                    row[3 * k] = 0.5 * dy[k];
                    row[3 * k + 1] = -0.5 * dx[k];
                    row[3 * k + 2] = n[k];
                }
                membrane += row * row.transpose() * (gamma * wx * wy * jac);
            }
        }

        // plate shape functions: w = p(ξ, η)ᵀ C⁻¹ d
        let mut c = Mat12::zeros();
        for k in 0..4 {
            let (x, y) = (NODE_XI[k], NODE_ETA[k]);
            c.set_row(3 * k, &PlateBasis::p(x, y).transpose());
            c.set_row(3 * k + 1, &(PlateBasis::dy(x, y) * (2.0 / b)).transpose());
            c.set_row(3 * k + 2, &(PlateBasis::dx(x, y) * (-2.0 / a)).transpose());
        }
        let cinv = c
            .try_inverse()
            .expect("plate interpolation matrix is invertible");
        let cinv_t = cinv.transpose();

        let db = plane_stress / 12.0;
        let mut bending = Mat12::zeros();
        let mut geo_xx = Mat12::zeros();
        let mut geo_yy = Mat12::zeros();
        let mut geo_xy = Mat12::zeros();
        for &(xi, wx) in &GAUSS3 {
            for &(eta, wy) in &GAUSS3 {
                let w = wx * wy * jac;
                let wxx = cinv_t * PlateBasis::dxx(xi, eta) * (4.0 / (a * a));
                let wyy = cinv_t * PlateBasis::dyy(xi, eta) * (4.0 / (b * b));
                let wxy = cinv_t * PlateBasis::dxy(xi, eta) * (4.0 / (a * b));
                let mut bb = SMatrix::<f64, 3, 12>::zeros();
                bb.set_row(0, &(-wxx).transpose());
                bb.set_row(1, &(-wyy).transpose());
                bb.set_row(2, &(-2.0 * wxy).transpose());
                bending += bb.transpose() * db * bb * w;

                let gx = cinv_t * PlateBasis::dx(xi, eta) * (2.0 / a);
                let gy = cinv_t * PlateBasis::dy(xi, eta) * (2.0 / b);
                geo_xx += gx * gx.transpose() * w;
                geo_yy += gy * gy.transpose() * w;
                geo_xy += (gx * gy.transpose() + gy * gx.transpose()) * w;
            }
        }

        let sym = |m: Mat12| (m + m.transpose()) * 0.5;
        Self {
            a,
            b,
            membrane: sym(membrane),
            bending: sym(bending),
            geo_xx: sym(geo_xx),
            geo_yy: sym(geo_yy),
            geo_xy: sym(geo_xy),
            plane_stress,
            centroid_strain: membrane_strain_operator(a, b, 0.0, 0.0),
        }
    }

    pub fn for_model(model: &PanelModel) -> Self {
        let (a, b) = model.element_size();
        Self::new(a, b, model.material())
    }

    pub fn size(&self) -> (f64, f64) {
        (self.a, self.b)
    }

    fn embed(block: &Mat12, dofs: &[usize; 3], scale: f64) -> Mat24 {
        let mut out = Mat24::zeros();
        for i in 0..4 {
            for j in 0..4 {
                for p in 0..3 {
                    for q in 0..3 {
                        out[(DOFS_PER_NODE * i + dofs[p], DOFS_PER_NODE * j + dofs[q])] =
                            block[(3 * i + p, 3 * j + q)] * scale;
                    }
                }
            }
        }
        out
    }

    /// In-plane block (`u, v, θz`) at thickness `t`.
    pub fn membrane_part(&self, t: f64) -> Mat24 {
        Self::embed(&self.membrane, &MEMBRANE_DOFS, t)
    }

    /// Out-of-plane block (`w, θx, θy`) at thickness `t`.
    pub fn bending_part(&self, t: f64) -> Mat24 {
        Self::embed(&self.bending, &BENDING_DOFS, t.powi(3))
    }

    pub fn stiffness(&self, t: f64) -> Mat24 {
        self.stiffness_change(0.0, t)
    }

    /// `k(t_new) − k(t_old)`, formed from the thickness polynomials rather
    /// than by subtracting two matrices.
    pub fn stiffness_change(&self, t_old: f64, t_new: f64) -> Mat24 {
        let mut out = Self::embed(&self.membrane, &MEMBRANE_DOFS, t_new - t_old);
        let bend = t_new.powi(3) - t_old.powi(3);
        for i in 0..4 {
            for j in 0..4 {
                for p in 0..3 {
                    for q in 0..3 {
                        out[(
                            DOFS_PER_NODE * i + BENDING_DOFS[p],
                            DOFS_PER_NODE * j + BENDING_DOFS[q],
                        )] = self.bending[(3 * i + p, 3 * j + q)] * bend;
                    }
                }
            }
        }
        out
    }

    /// Stress stiffness for element-constant resultants, `−∫ ∇wᵀ N ∇w dA`.
    pub fn stress_stiffness(&self, n: &Resultants) -> Mat24 {
        let g = self.geo_xx * n.nx + self.geo_yy * n.ny + self.geo_xy * n.nxy;
        Self::embed(&g, &BENDING_DOFS, -1.0)
    }

    /// Centroidal resultants from element nodal displacements (24-vector).
    pub fn resultants(&self, t: f64, local: &[f64; 24]) -> Resultants {
        let mut uv = SVector::<f64, 8>::zeros();
        for k in 0..4 {
            uv[2 * k] = local[DOFS_PER_NODE * k + dof::U];
            uv[2 * k + 1] = local[DOFS_PER_NODE * k + dof::V];
        }
        let n = self.plane_stress * (self.centroid_strain * uv) * t;
        Resultants::new(n[0], n[1], n[2])
    }
}

/// Element stiffness of an `a × b` rectangle at thickness `t`.
pub fn element_stiffness(a: f64, b: f64, t: f64, material: &crate::model::Material) -> Mat24 {
    ElementKernel::new(a, b, material).stiffness(t)
}

/// Element stress stiffness of an `a × b` rectangle.
pub fn element_geometric_stiffness(
    a: f64,
    b: f64,
    material: &crate::model::Material,
    resultants: &Resultants,
) -> Mat24 {
    ElementKernel::new(a, b, material).stress_stiffness(resultants)
}

/// Map from node dofs to reduced equation numbers. Constrained dofs map to
/// `None`; tied dofs share one equation, numbered last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DofMap {
    map: Vec<Option<usize>>,
    n_free: usize,
}

impl DofMap {
    pub fn new(model: &PanelModel) -> Self {
        let n_nodes = model.node_count();
        let mut fixed = vec![false; n_nodes * DOFS_PER_NODE];
        let bcs = model.bcs();
        for edge in Edge::ALL {
            let s = bcs.edge(edge);
            for node in model.edge_nodes(edge) {
                let base = node * DOFS_PER_NODE;
                if s.normal {
                    fixed[base + edge.normal_dof()] = true;
                }
                if s.tangential {
                    fixed[base + edge.tangential_dof()] = true;
                }
                match s.out_of_plane {
                    OutOfPlane::Free => {}
                    OutOfPlane::SimplySupported => {
                        fixed[base + dof::W] = true;
                        fixed[base + edge.tangential_slope_dof()] = true;
                    }
                    OutOfPlane::Clamped => {
                        fixed[base + dof::W] = true;
                        fixed[base + dof::RX] = true;
                        fixed[base + dof::RY] = true;
                    }
                }
                if s.drilling {
                    fixed[base + dof::RZ] = true;
                }
            }
        }
        if let Some(corner) = bcs.pinned_corner {
            let base = model.corner_node(corner) * DOFS_PER_NODE;
            fixed[base + dof::U] = true;
            fixed[base + dof::V] = true;
        }

        let mut tied = vec![false; fixed.len()];
        if bcs.tie_loaded_edge {
            let edge = model.load().loaded_edge;
            let members: Vec<usize> = model
                .edge_nodes(edge)
                .into_iter()
                .map(|n| n * DOFS_PER_NODE + edge.normal_dof())
                .collect();
            let any_fixed = members.iter().any(|&d| fixed[d]);
            for d in members {
                if any_fixed {
                    fixed[d] = true;
                } else {
                    tied[d] = true;
                }
            }
        }

        let mut map = vec![None; fixed.len()];
        let mut next = 0;
        for d in 0..fixed.len() {
            if !fixed[d] && !tied[d] {
                map[d] = Some(next);
                next += 1;
            }
        }
        if tied.iter().any(|&t| t) {
            for d in 0..fixed.len() {
                if tied[d] {
                    map[d] = Some(next);
                }
            }
            next += 1;
        }
        Self { map, n_free: next }
    }

    pub fn free_count(&self) -> usize {
        self.n_free
    }

    pub fn get(&self, node: usize, local_dof: usize) -> Option<usize> {
        self.map[node * DOFS_PER_NODE + local_dof]
    }

    pub fn element_dofs(&self, model: &PanelModel, e: usize) -> [Option<usize>; 24] {
        let nodes = model.element_nodes(e);
        std::array::from_fn(|k| self.get(nodes[k / DOFS_PER_NODE], k % DOFS_PER_NODE))
    }

    pub fn gather(&self, dofs: &[Option<usize>; 24], x: &[f64]) -> [f64; 24] {
        std::array::from_fn(|k| dofs[k].map_or(0.0, |g| x[g]))
    }

    /// Full nodal vector (`n_nodes * 6`) with constrained dofs at zero.
    pub fn expand(&self, x: &[f64]) -> Vec<f64> {
        self.map.iter().map(|m| m.map_or(0.0, |g| x[g])).collect()
    }
}

/// Global stiffness and stress stiffness on the free dofs, with the
/// factorization of `K`.
#[derive(Debug, Clone)]
pub struct AssembledSystem {
    k: CsrMatrix,
    k_ss: CsrMatrix,
    dof_map: DofMap,
    factor: SkylineCholesky,
}

impl AssembledSystem {
    pub fn k(&self) -> &CsrMatrix {
        &self.k
    }

    pub fn k_ss(&self) -> &CsrMatrix {
        &self.k_ss
    }

    pub fn dof_map(&self) -> &DofMap {
        &self.dof_map
    }

    pub fn factor(&self) -> &SkylineCholesky {
        &self.factor
    }

    pub fn dim(&self) -> usize {
        self.k.dim()
    }

    /// Replaces the stress stiffness, e.g. with a scaled or externally built one.
    pub fn with_stress_stiffness(self, k_ss: CsrMatrix) -> Result<Self> {
        if k_ss.dim() != self.k.dim() {
            return Err(Error::EigenSolver(format!(
                "stress stiffness has dimension {}, expected {}",
                k_ss.dim(),
                self.k.dim()
            )));
        }
        Ok(Self { k_ss, ..self })
    }

    pub fn has_stress_stiffness(&self) -> bool {
        self.k_ss.max_abs() > 0.0
    }
}

fn assemble_elements<F>(model: &PanelModel, dof_map: &DofMap, mut element_matrix: F) -> CsrMatrix
where
    F: FnMut(usize) -> Mat24,
{
    let mut triplets = Vec::with_capacity(model.element_count() * 576);
    for e in 0..model.element_count() {
        let dofs = dof_map.element_dofs(model, e);
        let ke = element_matrix(e);
        for p in 0..24 {
            let Some(gp) = dofs[p] else { continue };
            for q in 0..24 {
                if let Some(gq) = dofs[q] {
                    triplets.push((gp, gq, ke[(p, q)]));
                }
            }
        }
    }
    let mut m = CsrMatrix::from_triplets(dof_map.free_count(), &triplets);
    m.symmetrize();
    m
}

/// Global stiffness for the design; fails if `K` is not positive definite.
pub fn assemble(model: &PanelModel, design: &DesignVector) -> Result<AssembledSystem> {
    assemble_thicknesses(model, design.as_slice())
}

/// As [`assemble`], for thicknesses that need not respect the section bounds.
pub fn assemble_thicknesses(model: &PanelModel, thicknesses: &[f64]) -> Result<AssembledSystem> {
    if let Some(i) = thicknesses
        .iter()
        .position(|t| !(*t > 0.0 && t.is_finite()))
    {
        return Err(Error::InvalidDesign(format!(
            "section {i} thickness {} is not positive",
            thicknesses[i]
        )));
    }
    let dof_map = DofMap::new(model);
    if dof_map.free_count() == 0 {
        return Err(Error::EmptySystem);
    }
    let kernel = ElementKernel::for_model(model);
    let t_el = model.element_thicknesses(thicknesses);
    let k = assemble_elements(model, &dof_map, |e| kernel.stiffness(t_el[e]));
    let factor = SkylineCholesky::factor(&k)?;
    Ok(AssembledSystem {
        k_ss: CsrMatrix::empty(dof_map.free_count()),
        k,
        dof_map,
        factor,
    })
}

/// Pre-buckling solution under the reference load.
#[derive(Debug, Clone)]
pub struct StaticSolution {
    pub displacements: Vec<f64>,
    pub membrane_resultants: Vec<Resultants>,
    /// `‖K x − f‖ / ‖f‖` (zero for a zero load).
    pub relative_residual: f64,
}

/// Consistent nodal forces of the reference line load.
pub fn load_vector(model: &PanelModel, dof_map: &DofMap, load: &LoadCase) -> Vec<f64> {
    let mut f = vec![0.0; dof_map.free_count()];
    let edge = load.loaded_edge;
    let nodes = model.edge_nodes(edge);
    let h = model.edge_length(edge) / (nodes.len() - 1) as f64;
    let q = load.reference_magnitude * edge.inward_sign();
    for pair in nodes.windows(2) {
        for &node in pair {
            if let Some(g) = dof_map.get(node, edge.normal_dof()) {
                f[g] += q * h / 2.0;
            }
        }
    }
    f
}

const REFINEMENT_STEPS: usize = 3;
const STATIC_RESIDUAL_TARGET: f64 = 1e-12;

pub fn static_solve(
    model: &PanelModel,
    design: &DesignVector,
    system: &AssembledSystem,
    load: &LoadCase,
) -> Result<StaticSolution> {
    let f = load_vector(model, system.dof_map(), load);
    static_solve_rhs(model, design.as_slice(), system, &f)
}

/// Static solve for an arbitrary right-hand side, with iterative refinement.
pub fn static_solve_rhs(
    model: &PanelModel,
    thicknesses: &[f64],
    system: &AssembledSystem,
    f: &[f64],
) -> Result<StaticSolution> {
    let mut x = system.factor.solve(f);
    let f_norm = norm(f);
    let residual = |x: &[f64]| -> Vec<f64> {
        system
            .k
            .mul_vec(x)
            .iter()
            .zip(f)
            .map(|(kx, fi)| fi - kx)
            .collect()
    };
    let mut r = residual(&x);
    let mut rel = if f_norm > 0.0 {
        norm(&r) / f_norm
    } else {
        norm(&r)
    };
    for _ in 0..REFINEMENT_STEPS {
        if rel <= STATIC_RESIDUAL_TARGET {
            break;
        }
        let dx = system.factor.solve(&r);
        x.iter_mut().zip(&dx).for_each(|(xi, d)| *xi += d);
        r = residual(&x);
        rel = if f_norm > 0.0 {
            norm(&r) / f_norm
        } else {
            norm(&r)
        };
    }
    if !rel.is_finite() {
        return Err(Error::SingularSystem { pivot: 0 });
    }

    let kernel = ElementKernel::for_model(model);
    let t_el = model.element_thicknesses(thicknesses);
    let membrane_resultants = (0..model.element_count())
        .map(|e| {
            let local = system
                .dof_map
                .gather(&system.dof_map.element_dofs(model, e), &x);
            kernel.resultants(t_el[e], &local)
        })
        .collect();
    Ok(StaticSolution {
        displacements: x,
        membrane_resultants,
        relative_residual: rel,
    })
}

/// Adds the stress stiffness built from the static resultants.
pub fn assemble_geometric(
    model: &PanelModel,
    system: AssembledSystem,
    solution: &StaticSolution,
) -> Result<AssembledSystem> {
    if let Some(e) = solution
        .membrane_resultants
        .iter()
        .position(|n| !n.is_finite())
    {
        return Err(Error::EigenSolver(format!(
            "non-finite resultants on element {e}"
        )));
    }
    let kernel = ElementKernel::for_model(model);
    let k_ss = assemble_elements(model, &system.dof_map, |e| {
        kernel.stress_stiffness(&solution.membrane_resultants[e])
    });
    Ok(AssembledSystem { k_ss, ..system })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BoundaryConditions, EdgeSupport, Material, PanelSpec, SectionSpec};
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn al() -> Material {
        Material::aluminum()
    }

    fn block_max(m: &Mat24, dofs: &[usize]) -> f64 {
        let mut out = 0.0f64;
        for i in 0..24 {
            for j in 0..24 {
                if dofs.contains(&(i % 6)) && dofs.contains(&(j % 6)) {
                    out = out.max(m[(i, j)].abs());
                }
            }
        }
        out
    }

    #[test]
    fn thickness_scaling_of_blocks() {
        let kern = ElementKernel::new(0.1, 0.07, &al());
        let k1 = kern.stiffness(0.01);
        let k2 = kern.stiffness(0.02);
        for i in 0..24 {
            for j in 0..24 {
                let (pi, pj) = (i % 6, j % 6);
                let factor = if MEMBRANE_DOFS.contains(&pi) && MEMBRANE_DOFS.contains(&pj) {
                    2.0
                } else if BENDING_DOFS.contains(&pi) && BENDING_DOFS.contains(&pj) {
                    8.0
                } else {
                    assert_eq!(k1[(i, j)], 0.0);
                    continue;
                };
                assert!((k2[(i, j)] - factor * k1[(i, j)]).abs() <= 1e-12 * k2.abs().max());
            }
        }
    }

    #[test]
    fn element_is_symmetric_with_six_rigid_modes() {
        let k = element_stiffness(0.125, 0.0625, 0.01, &al());
        assert_eq!((k - k.transpose()).abs().max(), 0.0);
        // scale rows/cols to unit diagonal so the tiny drilling block is visible
        let d: Vec<f64> = (0..24).map(|i| 1.0 / k[(i, i)].sqrt()).collect();
        let scaled = Mat24::from_fn(|i, j| k[(i, j)] * d[i] * d[j]);
        let eig = scaled.symmetric_eigen();
        let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let zero = ev.iter().filter(|v| v.abs() < 1e-9).count();
        assert_eq!(zero, 6, "eigenvalues {ev:?}");
        assert!(ev[6] > 1e-6, "{ev:?}");
    }

    #[test]
    fn rigid_translations_carry_no_energy() {
        let k = element_stiffness(0.1, 0.2, 0.004, &al());
        let norm = k.abs().max();
        for d in [dof::U, dof::V, dof::W] {
            let mut v = SVector::<f64, 24>::zeros();
            for n in 0..4 {
                v[6 * n + d] = 1.0;
            }
            assert!((v.transpose() * k * v)[0].abs() <= 1e-12 * norm);
        }
        // rigid in-plane rotation: u = −y, v = x, θz = 1, about the centroid
        let (a, b) = (0.1, 0.2);
        let mut v = SVector::<f64, 24>::zeros();
        for n in 0..4 {
            let x = NODE_XI[n] * a / 2.0;
            let y = NODE_ETA[n] * b / 2.0;
            v[6 * n] = -y;
            v[6 * n + 1] = x;
            v[6 * n + 5] = 1.0;
        }
        assert!((v.transpose() * k * v)[0].abs() <= 1e-12 * norm);
    }

    #[test]
    fn stress_stiffness_linear_and_out_of_plane_only() {
        let kern = ElementKernel::new(0.1, 0.1, &al());
        assert_eq!(
            kern.stress_stiffness(&Resultants::default()).abs().max(),
            0.0
        );
        let n = Resultants::new(-3.0, 1.5, 0.7);
        let g1 = kern.stress_stiffness(&n);
        let g2 = kern.stress_stiffness(&n.scaled(-2.5));
        assert!((g2 + g1 * 2.5).abs().max() <= 1e-12 * g1.abs().max());
        assert_eq!((g1 - g1.transpose()).abs().max(), 0.0);
        assert_eq!(block_max(&g1, &MEMBRANE_DOFS), 0.0);
        for i in 0..24 {
            for j in 0..24 {
                if MEMBRANE_DOFS.contains(&(i % 6)) || MEMBRANE_DOFS.contains(&(j % 6)) {
                    assert_eq!(g1[(i, j)], 0.0);
                }
            }
        }
        // superposition over components
        let parts = kern.stress_stiffness(&Resultants::new(-3.0, 0.0, 0.0))
            + kern.stress_stiffness(&Resultants::new(0.0, 1.5, 0.0))
            + kern.stress_stiffness(&Resultants::new(0.0, 0.0, 0.7));
        assert!((parts - g1).abs().max() <= 1e-12 * g1.abs().max());
    }

    #[test]
    fn stress_stiffness_is_positive_under_compression() {
        let kern = ElementKernel::new(0.1, 0.1, &al());
        let g = kern.stress_stiffness(&Resultants::new(0.0, -1.0, 0.0));
        // w = y gives ∂w/∂y = 1 everywhere: energy = area
        let mut v = SVector::<f64, 24>::zeros();
        for n in 0..4 {
            v[6 * n + dof::W] = NODE_ETA[n] * 0.05;
            v[6 * n + dof::RX] = 1.0;
        }
        let energy = (v.transpose() * g * v)[0];
        assert!((energy - 0.01).abs() < 1e-14, "{energy}");
    }

    /// Single strip of elements across the loaded direction, simply supported
    /// on all edges, with the exact rectangular-plate critical load as oracle.
    fn strip_buckling_load(nx: usize, ny: usize) -> f64 {
        let (w, h, t) = (1.0, 1.0, 0.01);
        let mat = al();
        let kern = ElementKernel::new(w / nx as f64, h / ny as f64, &mat);
        let spec = PanelSpec {
            width: w,
            height: h,
            nx,
            ny,
            sections: SectionSpec::equal_strips(1, ny, 0.001, 1.0).unwrap(),
            ..PanelSpec::default()
        };
        let model = PanelModel::new(spec).unwrap();
        let map = DofMap::new(&model);
        let kb = assemble_elements(&model, &map, |_| kern.bending_part(t)).to_dense();
        let kg = assemble_elements(&model, &map, |_| {
            kern.stress_stiffness(&Resultants::new(0.0, -1.0, 0.0))
        })
        .to_dense();
        // restrict to dofs touched by the geometric matrix
        let idx: Vec<usize> = (0..kb.nrows()).filter(|&i| kb[(i, i)] != 0.0).collect();
        let kb = DMatrix::from_fn(idx.len(), idx.len(), |i, j| kb[(idx[i], idx[j])]);
        let kg = DMatrix::from_fn(idx.len(), idx.len(), |i, j| kg[(idx[i], idx[j])]);
        let l = kb.clone().cholesky().unwrap();
        let linv = l.l().try_inverse().unwrap();
        let c = &linv * kg * linv.transpose();
        let c = (&c + c.transpose()) * 0.5;
        let mu = c.symmetric_eigen().eigenvalues.max();
        1.0 / mu
    }

    #[test]
    fn bending_and_geometric_pair_converges_to_plate_oracle() {
        let d = al().bending_rigidity(0.01);
        let exact = 4.0 * std::f64::consts::PI.powi(2) * d;
        let errors: Vec<f64> = [4, 8, 12]
            .iter()
            .map(|&n| (strip_buckling_load(n, n) - exact).abs() / exact)
            .collect();
        assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
        assert!(errors[2] < 0.01, "{errors:?}");
    }

    fn small_model(nx: usize, ny: usize, sections: usize) -> PanelModel {
        PanelModel::new(PanelSpec {
            nx,
            ny,
            sections: SectionSpec::balanced_strips(sections, ny, 0.001, 1.0).unwrap(),
            ..PanelSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn assembled_k_is_symmetric_and_factorizable() {
        let model = small_model(4, 5, 5);
        let design = DesignVector::new(&model, vec![0.004, 0.006, 0.005, 0.007, 0.003]).unwrap();
        let sys = assemble(&model, &design).unwrap();
        assert_eq!(sys.k().max_asymmetry(), 0.0);
        assert!(!sys.has_stress_stiffness());
    }

    #[test]
    fn fully_clamped_single_element_has_no_free_dofs() {
        let mut bcs = BoundaryConditions::for_load(Edge::Top);
        bcs.edges = [EdgeSupport::fixed(); 4];
        let model = PanelModel::new(PanelSpec {
            nx: 1,
            ny: 1,
            sections: SectionSpec::equal_strips(1, 1, 0.001, 1.0).unwrap(),
            bcs: Some(bcs),
            ..PanelSpec::default()
        })
        .unwrap();
        assert_eq!(DofMap::new(&model).free_count(), 0);
        assert!(matches!(
            assemble(&model, &model.uniform_design(0.01).unwrap()),
            Err(Error::EmptySystem)
        ));
    }

    #[test]
    fn missing_supports_make_k_singular() {
        let mut bcs = BoundaryConditions::for_load(Edge::Top);
        bcs.edges = [EdgeSupport::default(); 4];
        bcs.pinned_corner = None;
        let model = PanelModel::new(PanelSpec {
            nx: 3,
            ny: 3,
            sections: SectionSpec::equal_strips(1, 3, 0.001, 1.0).unwrap(),
            bcs: Some(bcs),
            ..PanelSpec::default()
        })
        .unwrap();
        assert!(matches!(
            assemble(&model, &model.uniform_design(0.01).unwrap()),
            Err(Error::SingularSystem { .. })
        ));
    }

    #[test]
    fn equal_sections_have_mirrored_diagonal_blocks() {
        // strips 0 and 2 of a 3-strip panel mirror each other about mid-height
        let model = small_model(4, 6, 3);
        let design = model.uniform_design(0.005).unwrap();
        let sys = assemble(&model, &design).unwrap();
        let map = sys.dof_map();
        let ny = model.ny();
        let mut compared = 0;
        for j in 1..ny / 2 {
            for i in 1..model.nx() {
                let lower = model.node_index(i, j);
                let upper = model.node_index(i, ny - j);
                // w and θy are even under the y-mirror; θx is odd but appears squared
                for d in [dof::W, dof::RX, dof::RY, dof::U] {
                    let (Some(gl), Some(gu)) = (map.get(lower, d), map.get(upper, d)) else {
                        continue;
                    };
                    let (kl, ku) = (sys.k().get(gl, gl), sys.k().get(gu, gu));
                    assert!((kl - ku).abs() <= 1e-12 * kl.abs());
                    compared += 1;
                }
            }
        }
        assert!(compared > 0);
    }

    #[test]
    fn uniform_compression_gives_uniform_resultants() {
        let model = PanelModel::new(PanelSpec::default()).unwrap();
        let design = model.uniform_design(0.005).unwrap();
        let sys = assemble(&model, &design).unwrap();
        let sol = static_solve(&model, &design, &sys, model.load()).unwrap();
        assert!(sol.relative_residual <= 1e-10);
        let p = model.load().reference_magnitude;
        for n in &sol.membrane_resultants {
            assert!((n.ny + p).abs() <= 1e-8 * p, "{n:?}");
            assert!(n.nx.abs() <= 1e-8 * p && n.nxy.abs() <= 1e-8 * p, "{n:?}");
        }
    }

    #[test]
    fn zero_load_gives_zero_state() {
        let model = small_model(4, 5, 5);
        let design = model.uniform_design(0.005).unwrap();
        let sys = assemble(&model, &design).unwrap();
        let sol = static_solve_rhs(&model, design.as_slice(), &sys, &vec![0.0; sys.dim()]).unwrap();
        assert!(sol.displacements.iter().all(|&x| x == 0.0));
        assert!(sol
            .membrane_resultants
            .iter()
            .all(|n| *n == Resultants::default()));
        let geo = assemble_geometric(&model, sys, &sol).unwrap();
        assert_eq!(geo.k_ss().max_abs(), 0.0);
    }

    #[test]
    fn static_response_is_linear_in_load() {
        let model = small_model(6, 5, 5);
        let design = DesignVector::new(&model, vec![0.004, 0.006, 0.005, 0.007, 0.003]).unwrap();
        let sys = assemble(&model, &design).unwrap();
        let s1 = static_solve(&model, &design, &sys, model.load()).unwrap();
        let s3 = static_solve(&model, &design, &sys, &model.load().scaled(3.0).unwrap()).unwrap();
        let scale = s1.displacements.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in s1.displacements.iter().zip(&s3.displacements) {
            assert!((3.0 * a - b).abs() <= 1e-10 * 3.0 * scale);
        }
        for (a, b) in s1.membrane_resultants.iter().zip(&s3.membrane_resultants) {
            assert!((3.0 * a.ny - b.ny).abs() <= 1e-10 * b.ny.abs().max(1.0));
            assert!((3.0 * a.nx - b.nx).abs() <= 1e-10 * b.ny.abs().max(1.0));
        }
        // superposition of two right-hand sides
        let f1 = load_vector(&model, sys.dof_map(), model.load());
        let f2: Vec<f64> = (0..sys.dim())
            .map(|i| ((i * 7919) % 13) as f64 - 6.0)
            .collect();
        let sum: Vec<f64> = f1.iter().zip(&f2).map(|(a, b)| a + b).collect();
        let x1 = static_solve_rhs(&model, design.as_slice(), &sys, &f1)
            .unwrap()
            .displacements;
        let x2 = static_solve_rhs(&model, design.as_slice(), &sys, &f2)
            .unwrap()
            .displacements;
        let x12 = static_solve_rhs(&model, design.as_slice(), &sys, &sum)
            .unwrap()
            .displacements;
        let scale = x12.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..sys.dim() {
            assert!((x1[i] + x2[i] - x12[i]).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn stress_stiffness_scales_with_load_and_shares_pattern() {
        let model = small_model(4, 5, 5);
        let design = DesignVector::new(&model, vec![0.004, 0.006, 0.005, 0.007, 0.003]).unwrap();
        let geo = |m: &PanelModel| {
            let sys = assemble(m, &design).unwrap();
            let sol = static_solve(m, &design, &sys, m.load()).unwrap();
            assemble_geometric(m, sys, &sol).unwrap()
        };
        let g1 = geo(&model);
        let doubled = model.with_load(model.load().scaled(2.0).unwrap());
        let g2 = geo(&doubled);
        assert_eq!(g1.k_ss().max_asymmetry(), 0.0);
        let scale = g1.k_ss().max_abs();
        for (i, j, v) in g1.k_ss().entries() {
            assert!((g2.k_ss().get(i, j) - 2.0 * v).abs() <= 1e-9 * scale);
            assert!(g1.k().has_entry(i, j));
        }
    }

    /// Membrane patch: prescribe a linear displacement field on the boundary
    /// of a 2×2 patch and recover it, and the constant stress, in the interior.
    fn membrane_patch(a: f64, b: f64, ex: f64, ey: f64, gxy: f64, rot: f64) {
        let mat = al();
        let kern = ElementKernel::new(a, b, &mat);
        let t = 0.01;
        let model = PanelModel::new(PanelSpec {
            width: 2.0 * a,
            height: 2.0 * b,
            nx: 2,
            ny: 2,
            sections: SectionSpec::equal_strips(1, 2, 0.001, 1.0).unwrap(),
            ..PanelSpec::default()
        })
        .unwrap();
        let n_dofs = model.node_count() * 6;
        let mut k = DMatrix::<f64>::zeros(n_dofs, n_dofs);
        for e in 0..4 {
            let nodes = model.element_nodes(e);
            let ke = kern.stiffness(t);
            for p in 0..24 {
                for q in 0..24 {
                    k[(nodes[p / 6] * 6 + p % 6, nodes[q / 6] * 6 + q % 6)] += ke[(p, q)];
                }
            }
        }
        let field = |x: f64, y: f64| {
            (
                ex * x + 0.5 * gxy * y - rot * y,
                ey * y + 0.5 * gxy * x + rot * x,
            )
        };
        let centre = model.node_index(1, 1);
        let mut known = vec![None; n_dofs];
        for node in 0..model.node_count() {
            let (x, y) = model.node_position(node);
            let (u, v) = field(x, y);
            if node != centre {
                known[node * 6] = Some(u);
                known[node * 6 + 1] = Some(v);
            }
            for d in [dof::W, dof::RX, dof::RY] {
                known[node * 6 + d] = Some(0.0);
            }
        }
        let free: Vec<usize> = (0..n_dofs).filter(|&i| known[i].is_none()).collect();
        let fixed: Vec<usize> = (0..n_dofs).filter(|&i| known[i].is_some()).collect();
        let kff = DMatrix::from_fn(free.len(), free.len(), |i, j| k[(free[i], free[j])]);
        let xp = DVector::from_iterator(fixed.len(), fixed.iter().map(|&i| known[i].unwrap()));
        let kfp = DMatrix::from_fn(free.len(), fixed.len(), |i, j| k[(free[i], fixed[j])]);
        let xf = kff.lu().solve(&(-kfp * xp)).unwrap();

        let (xc, yc) = model.node_position(centre);
        let (uc, vc) = field(xc, yc);
        let pos = |d: usize| free.iter().position(|&i| i == centre * 6 + d).unwrap();
        let scale = (uc.abs() + vc.abs()).max(1e-6);
        assert!((xf[pos(dof::U)] - uc).abs() <= 1e-9 * scale);
        assert!((xf[pos(dof::V)] - vc).abs() <= 1e-9 * scale);
        let omega = rot;
        for (i, &g) in free.iter().enumerate() {
            if g % 6 == dof::RZ {
                assert!((xf[i] - omega).abs() <= 1e-9 * (omega.abs() + scale));
            }
        }
        let c = plane_stress_matrix(mat.youngs_modulus, mat.poisson_ratio) * t;
        let expected = c * nalgebra::Vector3::new(ex, ey, gxy);
        for e in 0..4 {
            let nodes = model.element_nodes(e);
            let mut local = [0.0; 24];
            for p in 0..24 {
                let g = nodes[p / 6] * 6 + p % 6;
                local[p] = match known[g] {
                    Some(v) => v,
                    None => xf[free.iter().position(|&i| i == g).unwrap()],
                };
            }
            let n = kern.resultants(t, &local);
            let tol = 1e-8 * expected.abs().max();
            assert!((n.nx - expected[0]).abs() <= tol);
            assert!((n.ny - expected[1]).abs() <= tol);
            assert!((n.nxy - expected[2]).abs() <= tol);
        }
    }

    #[test]
    fn membrane_patch_test() {
        membrane_patch(0.5, 0.5, 1e-4, -2e-4, 3e-4, 0.0);
        membrane_patch(0.3, 0.7, -1e-3, 0.0, 0.0, 5e-4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn patch_test_on_any_rectangle(
            a in 0.05f64..2.0, b in 0.05f64..2.0,
            ex in -1e-3f64..1e-3, ey in -1e-3f64..1e-3, g in -1e-3f64..1e-3, r in -1e-3f64..1e-3,
        ) {
            membrane_patch(a, b, ex, ey, g, r);
        }

        #[test]
        fn strain_energy_scales_with_thickness(c in 0.2f64..5.0, seed in 0u64..1000) {
            let kern = ElementKernel::new(0.1, 0.15, &al());
            let v = SVector::<f64, 24>::from_fn(|i, _| (((i as u64 + 1) * (seed + 3)) % 17) as f64 - 8.0);
            let mut vm = v;
            let mut vb = v;
            for i in 0..24 {
                if MEMBRANE_DOFS.contains(&(i % 6)) { vb[i] = 0.0 } else { vm[i] = 0.0 }
            }
            let t = 0.004;
            let e = |k: &Mat24, x: &SVector<f64, 24>| (x.transpose() * k * x)[0];
            let (k1, kc) = (kern.stiffness(t), kern.stiffness(c * t));
            prop_assert!((e(&kc, &vm) - c * e(&k1, &vm)).abs() <= 1e-10 * e(&kc, &vm).abs());
            prop_assert!((e(&kc, &vb) - c.powi(3) * e(&k1, &vb)).abs() <= 1e-10 * e(&kc, &vb).abs());
        }
    }
}
