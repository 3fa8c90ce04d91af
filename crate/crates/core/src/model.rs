//! Panel description: structured rectangular mesh, thickness sections,
//! material, reference load and supports, plus the design vector of
//! per-section thicknesses.
//!
//! The mesh has `nx * ny` rectangular elements laid out row by row from the
//! bottom-left corner. Node `(i, j)` (column `i`, row `j`) has index
//! `j * (nx + 1) + i`; element `(col, row)` has index `row * nx + col` and
//! nodes ordered counter-clockwise from its bottom-left corner.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Degrees of freedom per node: `u, v, w, θx, θy, θz`.
pub const DOFS_PER_NODE: usize = 6;

pub mod dof {
    pub const U: usize = 0;
    pub const V: usize = 1;
    pub const W: usize = 2;
    pub const RX: usize = 3;
    pub const RY: usize = 4;
    pub const RZ: usize = 5;
}

/// Isotropic linear elastic material, SI units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Material {
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
    pub density: f64,
}

impl Material {
    pub fn new(youngs_modulus: f64, poisson_ratio: f64, density: f64) -> Result<Self> {
        if !(youngs_modulus > 0.0 && youngs_modulus.is_finite()) {
            return Err(Error::field(
                "material.E",
                "Young's modulus must be positive",
            ));
        }
        if !(density > 0.0 && density.is_finite()) {
            return Err(Error::field("material.rho", "density must be positive"));
        }
        if !(0.0..0.5).contains(&poisson_ratio) {
            return Err(Error::field(
                "material.nu",
                "Poisson ratio must lie in [0, 0.5)",
            ));
        }
        Ok(Self {
            youngs_modulus,
            poisson_ratio,
            density,
        })
    }

    /// Generic aluminium: E = 70 GPa, ν = 0.33, ρ = 2700 kg/m³.
    pub fn aluminum() -> Self {
        Self {
            youngs_modulus: 70e9,
            poisson_ratio: 0.33,
            density: 2700.0,
        }
    }

    /// Bending rigidity `D = E t³ / 12(1 − ν²)`.
    pub fn bending_rigidity(&self, t: f64) -> f64 {
        self.youngs_modulus * t.powi(3) / (12.0 * (1.0 - self.poisson_ratio.powi(2)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Edge {
    Bottom,
    Right,
    Top,
    Left,
}

impl Edge {
    pub const ALL: [Edge; 4] = [Edge::Bottom, Edge::Right, Edge::Top, Edge::Left];

    pub fn opposite(self) -> Edge {
        match self {
            Edge::Bottom => Edge::Top,
            Edge::Right => Edge::Left,
            Edge::Top => Edge::Bottom,
            Edge::Left => Edge::Right,
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    /// In-plane dof normal to the edge.
    pub fn normal_dof(self) -> usize {
        match self {
            Edge::Bottom | Edge::Top => dof::V,
            Edge::Left | Edge::Right => dof::U,
        }
    }

    pub fn tangential_dof(self) -> usize {
        match self {
            Edge::Bottom | Edge::Top => dof::U,
            Edge::Left | Edge::Right => dof::V,
        }
    }

    /// Rotation measuring the slope of `w` along the edge
    /// (`θx = ∂w/∂y`, `θy = −∂w/∂x`).
    pub fn tangential_slope_dof(self) -> usize {
        match self {
            Edge::Bottom | Edge::Top => dof::RY,
            Edge::Left | Edge::Right => dof::RX,
        }
    }

    pub fn normal_slope_dof(self) -> usize {
        match self {
            Edge::Bottom | Edge::Top => dof::RX,
            Edge::Left | Edge::Right => dof::RY,
        }
    }

    /// Sign of the inward normal along the edge's normal dof.
    pub fn inward_sign(self) -> f64 {
        match self {
            Edge::Bottom | Edge::Left => 1.0,
            Edge::Top | Edge::Right => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corner {
    BottomLeft,
    BottomRight,
    TopRight,
    TopLeft,
}

/// Reference line load `P_ref` (N/m) acting inward on one edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadCase {
    pub reference_magnitude: f64,
    pub loaded_edge: Edge,
}

impl LoadCase {
    pub fn new(reference_magnitude: f64, loaded_edge: Edge) -> Result<Self> {
        if !(reference_magnitude > 0.0 && reference_magnitude.is_finite()) {
            return Err(Error::field(
                "load.magnitude",
                "reference load must be positive",
            ));
        }
        Ok(Self {
            reference_magnitude,
            loaded_edge,
        })
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.reference_magnitude * c, self.loaded_edge)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutOfPlane {
    #[default]
    Free,
    /// `w = 0` and zero slope along the edge.
    SimplySupported,
    /// `w = 0` and both rotations fixed.
    Clamped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeSupport {
    pub normal: bool,
    pub tangential: bool,
    pub out_of_plane: OutOfPlane,
    pub drilling: bool,
}

impl EdgeSupport {
    pub fn simply_supported() -> Self {
        Self {
            out_of_plane: OutOfPlane::SimplySupported,
            ..Self::default()
        }
    }

    /// Every dof of every node on the edge fixed.
    pub fn fixed() -> Self {
        Self {
            normal: true,
            tangential: true,
            out_of_plane: OutOfPlane::Clamped,
            drilling: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryConditions {
    /// Indexed in `Edge::ALL` order.
    pub edges: [EdgeSupport; 4],
    /// Tie the normal displacement of the loaded edge to a single dof.
    pub tie_loaded_edge: bool,
    /// Corner node with both in-plane translations fixed.
    pub pinned_corner: Option<Corner>,
}

impl BoundaryConditions {
    /// Simply supported on all four edges, the edge opposite the load held
    /// in its normal direction, the loaded edge tied, and the first corner
    /// of the opposite edge pinned in-plane.
    pub fn for_load(loaded: Edge) -> Self {
        let mut edges = [EdgeSupport::simply_supported(); 4];
        edges[loaded.opposite().index()].normal = true;
        let corner = match loaded.opposite() {
            Edge::Bottom => Corner::BottomLeft,
            Edge::Right => Corner::BottomRight,
            Edge::Top => Corner::TopLeft,
            Edge::Left => Corner::BottomLeft,
        };
        Self {
            edges,
            tie_loaded_edge: true,
            pinned_corner: Some(corner),
        }
    }

    pub fn edge(&self, edge: Edge) -> &EdgeSupport {
        &self.edges[edge.index()]
    }

    pub fn edge_mut(&mut self, edge: Edge) -> &mut EdgeSupport {
        &mut self.edges[edge.index()]
    }
}

/// Which elements a section owns, as given in a description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SectionMembers {
    /// Whole element rows (horizontal strips spanning the width).
    Rows(Vec<usize>),
    Elements(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SectionSpec {
    pub members: SectionMembers,
    pub lower_bound: f64,
    pub upper_bound: f64,
}

impl SectionSpec {
    /// `count` strips of `ny / count` rows each; `count` must divide `ny`.
    pub fn equal_strips(count: usize, ny: usize, lower: f64, upper: f64) -> Result<Vec<Self>> {
        if count == 0 || !ny.is_multiple_of(count) {
            return Err(Error::Partition(format!(
                "{count} equal strips do not divide {ny} element rows"
            )));
        }
        let rows = ny / count;
        Ok((0..count)
            .map(|s| Self {
                members: SectionMembers::Rows((s * rows..(s + 1) * rows).collect()),
                lower_bound: lower,
                upper_bound: upper,
            })
            .collect())
    }

    /// `count` strips whose row counts differ by at most one, with the
    /// larger strips placed symmetrically about mid-height so that the
    /// layout is its own mirror image.
    pub fn balanced_strips(count: usize, ny: usize, lower: f64, upper: f64) -> Result<Vec<Self>> {
        if count == 0 || count > ny {
            return Err(Error::Partition(format!(
                "cannot split {ny} element rows into {count} strips"
            )));
        }
        let mut sizes = vec![ny / count; count];
        let mut extra = ny % count;
        let mid = count / 2;
        if count % 2 == 1 && extra % 2 == 1 {
            sizes[mid] += 1;
            extra -= 1;
        }
        // remaining rows go out in mirror pairs from the middle
        let mut k = 0;
        while extra >= 2 {
            let hi = if count % 2 == 1 { mid + 1 + k } else { mid + k };
            sizes[mid - 1 - k] += 1;
            sizes[hi] += 1;
            extra -= 2;
            k += 1;
        }
        if extra == 1 {
            // odd remainder over an even strip count: no mirror-symmetric split exists
            sizes[mid] += 1;
        }
        let mut start = 0;
        Ok(sizes
            .into_iter()
            .map(|n| {
                let rows = (start..start + n).collect();
                start += n;
                Self {
                    members: SectionMembers::Rows(rows),
                    lower_bound: lower,
                    upper_bound: upper,
                }
            })
            .collect())
    }
}

/// A group of elements sharing one thickness design variable.
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub id: usize,
    /// Sorted, non-empty.
    pub element_ids: Vec<usize>,
    pub lower_bound: f64,
    pub upper_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelSpec {
    pub width: f64,
    pub height: f64,
    pub nx: usize,
    pub ny: usize,
    pub material: Material,
    pub sections: Vec<SectionSpec>,
    pub load: LoadCase,
    pub bcs: Option<BoundaryConditions>,
}

impl Default for PanelSpec {
    /// The 1 m × 1 m aluminium desk panel on a 16 × 16 mesh, five balanced
    /// strips with thickness bounds [0.001, 1.0] m, loaded on the top edge.
    fn default() -> Self {
        Self {
            width: 1.0,
            height: 1.0,
            nx: 16,
            ny: 16,
            material: Material::aluminum(),
            sections: SectionSpec::balanced_strips(5, 16, DEFAULT_LOWER_BOUND, DEFAULT_UPPER_BOUND)
                .expect("16 rows split into 5 strips"),
            load: LoadCase {
                reference_magnitude: DEFAULT_REFERENCE_LOAD,
                loaded_edge: Edge::Top,
            },
            bcs: None,
        }
    }
}

pub const DEFAULT_LOWER_BOUND: f64 = 0.001;
pub const DEFAULT_UPPER_BOUND: f64 = 1.0;
pub const DEFAULT_INITIAL_THICKNESS: f64 = 0.005;
/// Puts the first load factor of the uniform desk panel near 2.1.
pub const DEFAULT_REFERENCE_LOAD: f64 = 15_000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PanelModel {
    width: f64,
    height: f64,
    nx: usize,
    ny: usize,
    material: Material,
    sections: Vec<Section>,
    element_section: Vec<usize>,
    load: LoadCase,
    bcs: BoundaryConditions,
}

impl PanelModel {
    pub fn new(spec: PanelSpec) -> Result<Self> {
        let PanelSpec {
            width,
            height,
            nx,
            ny,
            material,
            sections,
            load,
            bcs,
        } = spec;
        if !(width > 0.0 && width.is_finite() && height > 0.0 && height.is_finite()) {
            return Err(Error::Geometry(format!(
                "panel dimensions must be positive, got {width} x {height}"
            )));
        }
        if nx == 0 || ny == 0 {
            return Err(Error::Geometry(format!(
                "element counts must be positive, got {nx} x {ny}"
            )));
        }
        let material = Material::new(
            material.youngs_modulus,
            material.poisson_ratio,
            material.density,
        )?;
        let load = LoadCase::new(load.reference_magnitude, load.loaded_edge)?;
        if sections.is_empty() {
            return Err(Error::Partition("at least one section is required".into()));
        }

        let n_el = nx * ny;
        let mut element_section = vec![usize::MAX; n_el];
        let mut out = Vec::with_capacity(sections.len());
        for (id, s) in sections.into_iter().enumerate() {
            let path = format!("sections[{id}]");
            if !(s.lower_bound > 0.0 && s.lower_bound.is_finite()) {
                return Err(Error::field(path, "lower bound must be positive"));
            }
            if !(s.lower_bound < s.upper_bound && s.upper_bound.is_finite()) {
                return Err(Error::field(
                    path,
                    format!(
                        "lower bound {} must be below upper bound {}",
                        s.lower_bound, s.upper_bound
                    ),
                ));
            }
            let mut elements = match s.members {
                SectionMembers::Rows(rows) => {
                    let mut ids = Vec::with_capacity(rows.len() * nx);
                    for r in rows {
                        if r >= ny {
                            return Err(Error::Partition(format!(
                                "{path}: row {r} outside 0..{ny}"
                            )));
                        }
                        ids.extend(r * nx..(r + 1) * nx);
                    }
                    ids
                }
                SectionMembers::Elements(ids) => ids,
            };
            elements.sort_unstable();
            if elements.is_empty() {
                return Err(Error::Partition(format!("{path} owns no elements")));
            }
            for &e in &elements {
                if e >= n_el {
                    return Err(Error::Partition(format!(
                        "{path}: element {e} outside 0..{n_el}"
                    )));
                }
                if element_section[e] != usize::MAX {
                    return Err(Error::Partition(format!(
                        "element {e} claimed by sections {} and {id}",
                        element_section[e]
                    )));
                }
                element_section[e] = id;
            }
            out.push(Section {
                id,
                element_ids: elements,
                lower_bound: s.lower_bound,
                upper_bound: s.upper_bound,
            });
        }
        if let Some(e) = element_section.iter().position(|&s| s == usize::MAX) {
            return Err(Error::Partition(format!(
                "element {e} belongs to no section"
            )));
        }

        Ok(Self {
            width,
            height,
            nx,
            ny,
            material,
            sections: out,
            element_section,
            load,
            bcs: bcs.unwrap_or_else(|| BoundaryConditions::for_load(load.loaded_edge)),
        })
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn material(&self) -> &Material {
        &self.material
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    pub fn section_count(&self) -> usize {
        self.sections.len()
    }

    pub fn load(&self) -> &LoadCase {
        &self.load
    }

    pub fn bcs(&self) -> &BoundaryConditions {
        &self.bcs
    }

    /// Same model with a different reference load magnitude.
    pub fn with_load(&self, load: LoadCase) -> Self {
        Self {
            load,
            ..self.clone()
        }
    }

    pub fn element_count(&self) -> usize {
        self.nx * self.ny
    }

    pub fn node_count(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    /// Element side lengths `(a, b)` along x and y.
    pub fn element_size(&self) -> (f64, f64) {
        (self.width / self.nx as f64, self.height / self.ny as f64)
    }

    pub fn element_area(&self) -> f64 {
        let (a, b) = self.element_size();
        a * b
    }

    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    pub fn node_position(&self, node: usize) -> (f64, f64) {
        let (a, b) = self.element_size();
        let i = node % (self.nx + 1);
        let j = node / (self.nx + 1);
        (i as f64 * a, j as f64 * b)
    }

    /// Counter-clockwise node indices starting at the bottom-left corner.
    pub fn element_nodes(&self, e: usize) -> [usize; 4] {
        let col = e % self.nx;
        let row = e / self.nx;
        [
            self.node_index(col, row),
            self.node_index(col + 1, row),
            self.node_index(col + 1, row + 1),
            self.node_index(col, row + 1),
        ]
    }

    pub fn element_centroid(&self, e: usize) -> (f64, f64) {
        let (a, b) = self.element_size();
        let col = e % self.nx;
        let row = e / self.nx;
        ((col as f64 + 0.5) * a, (row as f64 + 0.5) * b)
    }

    pub fn section_of_element(&self, e: usize) -> usize {
        self.element_section[e]
    }

    /// Nodes along an edge, in increasing coordinate order.
    pub fn edge_nodes(&self, edge: Edge) -> Vec<usize> {
        match edge {
            Edge::Bottom => (0..=self.nx).map(|i| self.node_index(i, 0)).collect(),
            Edge::Top => (0..=self.nx).map(|i| self.node_index(i, self.ny)).collect(),
            Edge::Left => (0..=self.ny).map(|j| self.node_index(0, j)).collect(),
            Edge::Right => (0..=self.ny).map(|j| self.node_index(self.nx, j)).collect(),
        }
    }

    pub fn corner_node(&self, corner: Corner) -> usize {
        match corner {
            Corner::BottomLeft => self.node_index(0, 0),
            Corner::BottomRight => self.node_index(self.nx, 0),
            Corner::TopRight => self.node_index(self.nx, self.ny),
            Corner::TopLeft => self.node_index(0, self.ny),
        }
    }

    pub fn edge_length(&self, edge: Edge) -> f64 {
        match edge {
            Edge::Bottom | Edge::Top => self.width,
            Edge::Left | Edge::Right => self.height,
        }
    }

    pub fn section_area(&self, i: usize) -> f64 {
        self.sections[i].element_ids.len() as f64 * self.element_area()
    }

    /// Per-element thickness for a per-section thickness vector.
    pub fn element_thicknesses(&self, thicknesses: &[f64]) -> Vec<f64> {
        assert_eq!(thicknesses.len(), self.sections.len());
        self.element_section
            .iter()
            .map(|&s| thicknesses[s])
            .collect()
    }

    pub fn lower_bounds(&self) -> Vec<f64> {
        self.sections.iter().map(|s| s.lower_bound).collect()
    }

    pub fn upper_bounds(&self) -> Vec<f64> {
        self.sections.iter().map(|s| s.upper_bound).collect()
    }

    /// Mass `Σ ρ · area_i · t_i`.
    pub fn mass(&self, design: &DesignVector) -> f64 {
        self.mass_of(design.as_slice())
    }

    pub fn mass_of(&self, thicknesses: &[f64]) -> f64 {
        assert_eq!(thicknesses.len(), self.sections.len());
        let rho = self.material.density;
        (0..self.sections.len())
            .map(|i| rho * self.section_area(i) * thicknesses[i])
            .sum()
    }

    pub fn uniform_design(&self, t: f64) -> Result<DesignVector> {
        DesignVector::new(self, vec![t; self.sections.len()])
    }

    /// Clamps `raw` into the section bounds, recording every clamp.
    pub fn apply_design(&self, raw: &[f64]) -> Result<AppliedDesign> {
        if raw.len() != self.sections.len() {
            return Err(Error::InvalidDesign(format!(
                "expected {} thicknesses, got {}",
                self.sections.len(),
                raw.len()
            )));
        }
        let mut clamps = Vec::new();
        let mut values = Vec::with_capacity(raw.len());
        for (s, &t) in self.sections.iter().zip(raw) {
            if !t.is_finite() {
                return Err(Error::InvalidDesign(format!(
                    "section {} thickness is not finite ({t})",
                    s.id
                )));
            }
            let applied = t.clamp(s.lower_bound, s.upper_bound);
            if applied != t {
                clamps.push(Clamp {
                    section: s.id,
                    requested: t,
                    applied,
                });
            }
            values.push(applied);
        }
        Ok(AppliedDesign {
            design: DesignVector {
                thicknesses: values,
            },
            clamps,
        })
    }
}

/// Per-section thicknesses, guaranteed to lie within the section bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignVector {
    thicknesses: Vec<f64>,
}

impl DesignVector {
    pub fn new(model: &PanelModel, thicknesses: Vec<f64>) -> Result<Self> {
        if thicknesses.len() != model.section_count() {
            return Err(Error::InvalidDesign(format!(
                "expected {} thicknesses, got {}",
                model.section_count(),
                thicknesses.len()
            )));
        }
        for (s, &t) in model.sections().iter().zip(&thicknesses) {
            if !t.is_finite() {
                return Err(Error::InvalidDesign(format!(
                    "section {} thickness is not finite ({t})",
                    s.id
                )));
            }
            if t < s.lower_bound || t > s.upper_bound {
                return Err(Error::InvalidDesign(format!(
                    "section {} thickness {t} outside [{}, {}]",
                    s.id, s.lower_bound, s.upper_bound
                )));
            }
        }
        Ok(Self { thicknesses })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.thicknesses
    }

    pub fn len(&self) -> usize {
        self.thicknesses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thicknesses.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.thicknesses
    }
}

impl std::ops::Index<usize> for DesignVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.thicknesses[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clamp {
    pub section: usize,
    pub requested: f64,
    pub applied: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppliedDesign {
    pub design: DesignVector,
    pub clamps: Vec<Clamp>,
}
