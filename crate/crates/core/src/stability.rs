//! Per-section buckling stability values.
//!
//! With `u₁ᵀ K_ss u₁ = 1` and the stress stiffness held fixed, the change of
//! the first load factor when section `i` is thickened or thinned is
//! estimated by `β_i^± = u₁ᵀ Δk_i^± u₁`, where `Δk_i^±` is the change of the
//! section's assembled stiffness.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::eigen::{buckling_solve, buckling_solve_from, BucklingModes, EigenConfig};
use crate::error::{Error, Result};
use crate::fem::{
    assemble_geometric, assemble_thicknesses, load_vector, static_solve_rhs, AssembledSystem,
    DofMap, ElementKernel, StaticSolution,
};
use crate::linalg::CsrMatrix;
use crate::model::PanelModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Increase,
    Decrease,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Increase => 1.0,
            Direction::Decrease => -1.0,
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Direction::Increase => '+',
            Direction::Decrease => '-',
        }
    }
}

/// Relative thickness step `Δt_i = η t_i`, shortened so a decrease stops at
/// the section's lower bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaPolicy {
    pub eta: f64,
}

impl Default for DeltaPolicy {
    fn default() -> Self {
        Self { eta: 0.05 }
    }
}

impl DeltaPolicy {
    pub fn new(eta: f64) -> Result<Self> {
        if !(eta > 0.0 && eta < 1.0) {
            return Err(Error::field(
                "eta",
                format!("must lie in (0, 1), got {eta}"),
            ));
        }
        Ok(Self { eta })
    }

    pub fn step(&self, t: f64, lower_bound: f64) -> f64 {
        let dt = self.eta * t;
        if t - dt < lower_bound && t > lower_bound {
            t - lower_bound
        } else {
            dt
        }
    }
}

/// Stiffness change of one section, stored on the reduced dofs it touches.
#[derive(Debug, Clone)]
pub struct SectionDelta {
    pub section_id: usize,
    pub direction: Direction,
    pub delta_t: f64,
    /// Sorted reduced dof numbers; `matrix` is indexed by position here.
    pub dofs: Vec<usize>,
    pub matrix: CsrMatrix,
}

impl SectionDelta {
    /// `uᵀ Δk u` for a vector on the full reduced dof set.
    pub fn quad_form(&self, u: &[f64]) -> f64 {
        let local: Vec<f64> = self.dofs.iter().map(|&g| u[g]).collect();
        self.matrix.quad_form(&local)
    }

    /// The change embedded in the full reduced system.
    pub fn to_global(&self, n: usize) -> CsrMatrix {
        let triplets: Vec<_> = self
            .matrix
            .entries()
            .map(|(i, j, v)| (self.dofs[i], self.dofs[j], v))
            .collect();
        CsrMatrix::from_triplets(n, &triplets)
    }
}

pub fn section_delta_stiffness(
    model: &PanelModel,
    dof_map: &DofMap,
    thicknesses: &[f64],
    section: usize,
    delta_t: f64,
    direction: Direction,
) -> Result<SectionDelta> {
    let kernel = ElementKernel::for_model(model);
    section_delta_with(
        model,
        &kernel,
        dof_map,
        thicknesses,
        section,
        delta_t,
        direction,
    )
}

fn section_delta_with(
    model: &PanelModel,
    kernel: &ElementKernel,
    dof_map: &DofMap,
    thicknesses: &[f64],
    section: usize,
    delta_t: f64,
    direction: Direction,
) -> Result<SectionDelta> {
    let sec = model
        .sections()
        .get(section)
        .ok_or_else(|| Error::InvalidDesign(format!("no section {section}")))?;
    let t = thicknesses[section];
    if !(delta_t >= 0.0 && delta_t.is_finite()) {
        return Err(Error::InvalidDesign(format!(
            "thickness step {delta_t} on section {section} must be non-negative"
        )));
    }
    let t_new = t + direction.sign() * delta_t;
    if t_new <= 0.0 {
        return Err(Error::StepTooLarge {
            section,
            thickness: t,
            delta_t,
        });
    }
    let dk = kernel.stiffness_change(t, t_new);

    let mut dofs: Vec<usize> = sec
        .element_ids
        .iter()
        .flat_map(|&e| dof_map.element_dofs(model, e))
        .flatten()
        .collect();
    dofs.sort_unstable();
    dofs.dedup();
    let mut triplets = Vec::with_capacity(sec.element_ids.len() * 576);
    for &e in &sec.element_ids {
        let local: Vec<Option<usize>> = dof_map
            .element_dofs(model, e)
            .iter()
            .map(|g| g.map(|g| dofs.binary_search(&g).expect("dof collected above")))
            .collect();
        for p in 0..24 {
            let Some(lp) = local[p] else { continue };
            for q in 0..24 {
                if let Some(lq) = local[q] {
                    triplets.push((lp, lq, dk[(p, q)]));
                }
            }
        }
    }
    let mut matrix = CsrMatrix::from_triplets(dofs.len(), &triplets);
    matrix.symmetrize();
    Ok(SectionDelta {
        section_id: section,
        direction,
        delta_t,
        dofs,
        matrix,
    })
}

/// `β = u₁ᵀ Δk u₁` with the first mode of `modes`.
pub fn buckling_stability(modes: &BucklingModes, delta: &SectionDelta) -> f64 {
    delta.quad_form(modes.first_mode())
}

/// Everything computed for one design: stiffness, pre-buckling state and
/// buckling modes.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub thicknesses: Vec<f64>,
    pub system: AssembledSystem,
    pub static_solution: StaticSolution,
    pub modes: BucklingModes,
}

impl Analysis {
    pub fn lambda1(&self) -> f64 {
        self.modes.lambda1()
    }
}

/// Assembles, solves the reference load case and extracts `m` buckling modes.
pub fn analyze(
    model: &PanelModel,
    thicknesses: &[f64],
    m: usize,
    config: &EigenConfig,
) -> Result<Analysis> {
    analyze_from(model, thicknesses, m, config, &[])
}

/// As [`analyze`], seeding the eigensolver with nearby modes.
pub fn analyze_from(
    model: &PanelModel,
    thicknesses: &[f64],
    m: usize,
    config: &EigenConfig,
    start: &[Vec<f64>],
) -> Result<Analysis> {
    let system = assemble_thicknesses(model, thicknesses)?;
    let f = load_vector(model, system.dof_map(), model.load());
    let static_solution = static_solve_rhs(model, thicknesses, &system, &f)?;
    let system = assemble_geometric(model, system, &static_solution)?;
    let modes = if start.is_empty() {
        buckling_solve(&system, m, config)?
    } else {
        buckling_solve_from(&system, m, config, start)?
    };
    Ok(Analysis {
        thicknesses: thicknesses.to_vec(),
        system,
        static_solution,
        modes,
    })
}

/// Exact change of `λ₁` when section `i` changes by the signed step
/// `delta_t`, from a complete re-analysis. Bounds are not enforced.
pub fn fd_lambda_sensitivity(
    model: &PanelModel,
    base: &Analysis,
    section: usize,
    delta_t: f64,
    config: &EigenConfig,
) -> Result<f64> {
    let mut t = base.thicknesses.clone();
    fd_lambda_change(model, base, &mut t, &[(section, delta_t)], config)
}

/// As [`fd_lambda_sensitivity`] for several simultaneous section changes.
pub fn fd_lambda_change(
    model: &PanelModel,
    base: &Analysis,
    scratch: &mut Vec<f64>,
    changes: &[(usize, f64)],
    config: &EigenConfig,
) -> Result<f64> {
    scratch.clone_from(&base.thicknesses);
    for &(i, dt) in changes {
        if i >= scratch.len() {
            return Err(Error::InvalidDesign(format!("no section {i}")));
        }
        if scratch[i] + dt <= 0.0 {
            return Err(Error::StepTooLarge {
                section: i,
                thickness: scratch[i],
                delta_t: dt.abs(),
            });
        }
        scratch[i] += dt;
    }
    if changes.iter().all(|&(_, dt)| dt == 0.0) {
        return Ok(0.0);
    }
    let m = base.modes.len().min(FD_MODES);
    let perturbed = analyze_from(model, scratch, m, config, &base.modes.eigenvectors[..m])?;
    Ok(perturbed.lambda1() - base.lambda1())
}

/// Modes tracked by the finite-difference re-analysis; a few beyond the first
/// keep subspace iteration robust when the first two are close.
const FD_MODES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityEntry {
    pub section_id: usize,
    pub t: f64,
    pub delta_t: f64,
    pub beta_plus: f64,
    pub beta_minus: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub lambda1: f64,
    pub entries: Vec<StabilityEntry>,
}

impl StabilityReport {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("section_id,t,delta_t,beta_plus,beta_minus\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                e.section_id, e.t, e.delta_t, e.beta_plus, e.beta_minus
            );
        }
        out
    }
}

/// β⁺ and β⁻ for every section of an analysed design.
pub fn stability_report(
    model: &PanelModel,
    analysis: &Analysis,
    policy: &DeltaPolicy,
) -> Result<StabilityReport> {
    let kernel = ElementKernel::for_model(model);
    let dof_map = analysis.system.dof_map();
    let t = &analysis.thicknesses;
    let entries = model
        .sections()
        .par_iter()
        .map(|sec| {
            let i = sec.id;
            let dt = policy.step(t[i], sec.lower_bound);
            let plus = section_delta_with(model, &kernel, dof_map, t, i, dt, Direction::Increase)?;
            let minus = section_delta_with(model, &kernel, dof_map, t, i, dt, Direction::Decrease)?;
            Ok(StabilityEntry {
                section_id: i,
                t: t[i],
                delta_t: dt,
                beta_plus: buckling_stability(&analysis.modes, &plus),
                beta_minus: buckling_stability(&analysis.modes, &minus),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StabilityReport {
        lambda1: analysis.lambda1(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{dof, PanelSpec, SectionSpec, DOFS_PER_NODE};

    fn model(nx: usize, ny: usize, sections: usize) -> PanelModel {
        PanelModel::new(PanelSpec {
            nx,
            ny,
            sections: SectionSpec::balanced_strips(sections, ny, 0.001, 1.0).unwrap(),
            ..PanelSpec::default()
        })
        .unwrap()
    }

    const T: [f64; 5] = [0.004, 0.006, 0.005, 0.007, 0.003];

    #[test]
    fn zero_step_gives_zero_matrix_and_zero_beta() {
        let m = model(4, 5, 5);
        let a = analyze(&m, &T, 3, &EigenConfig::default()).unwrap();
        for dir in [Direction::Increase, Direction::Decrease] {
            let d = section_delta_stiffness(&m, a.system.dof_map(), &T, 2, 0.0, dir).unwrap();
            assert_eq!(d.matrix.max_abs(), 0.0);
            assert_eq!(buckling_stability(&a.modes, &d), 0.0);
        }
    }

    #[test]
    fn delta_blocks_scale_like_the_section_stiffness() {
        let m = model(4, 5, 5);
        let map = DofMap::new(&m);
        let (t, dt) = (T[1], 0.3 * T[1]);
        let d = section_delta_stiffness(&m, &map, &T, 1, dt, Direction::Increase).unwrap();
        let kernel = ElementKernel::for_model(&m);
        let mut bare = T.to_vec();
        bare[1] = 0.0;
        let k_sec = section_delta_with(&m, &kernel, &map, &bare, 1, t, Direction::Increase)
            .unwrap()
            .matrix;
        assert_eq!(d.dofs.len(), k_sec.dim());
        // classify each reduced dof by its node dof type
        let mut kind = vec![0usize; map.free_count()];
        for node in 0..m.node_count() {
            for ld in 0..DOFS_PER_NODE {
                if let Some(g) = map.get(node, ld) {
                    kind[g] = ld;
                }
            }
        }
        let membrane = |g: usize| matches!(kind[g], dof::U | dof::V | dof::RZ);
        let cubic = ((t + dt).powi(3) - t.powi(3)) / t.powi(3);
        let scale = d.matrix.max_abs();
        for (i, j, v) in d.matrix.entries() {
            let (gi, gj) = (d.dofs[i], d.dofs[j]);
            let k = k_sec.get(i, j);
            let expect = match (membrane(gi), membrane(gj)) {
                (true, true) => dt / t * k,
                (false, false) => cubic * k,
                _ => 0.0,
            };
            // the tied edge dof is a membrane dof with no bending coupling
            assert!(
                (v - expect).abs() <= 1e-12 * scale,
                "({gi},{gj}) {v} vs {expect}"
            );
        }
    }

    #[test]
    fn delta_touches_only_its_section_and_is_symmetric() {
        let m = model(4, 5, 5);
        let map = DofMap::new(&m);
        let d = section_delta_stiffness(&m, &map, &T, 0, 0.001, Direction::Decrease).unwrap();
        assert_eq!(d.matrix.max_asymmetry(), 0.0);
        let touched: std::collections::BTreeSet<usize> = m.sections()[0]
            .element_ids
            .iter()
            .flat_map(|&e| map.element_dofs(&m, e))
            .flatten()
            .collect();
        assert_eq!(d.dofs, touched.into_iter().collect::<Vec<_>>());
        // equal to the difference of two full assemblies
        let mut t2 = T.to_vec();
        t2[0] -= 0.001;
        let k0 = assemble_thicknesses(&m, &T).unwrap();
        let k1 = assemble_thicknesses(&m, &t2).unwrap();
        let g = d.to_global(map.free_count());
        let scale = g.max_abs();
        for (i, j, v) in k0.k().entries() {
            let diff = k1.k().get(i, j) - v;
            assert!((diff - g.get(i, j)).abs() <= 1e-9 * scale.max(v.abs() * 1e-3));
        }
    }

    #[test]
    fn oversized_decrease_is_rejected() {
        let m = model(4, 5, 5);
        let map = DofMap::new(&m);
        assert!(matches!(
            section_delta_stiffness(&m, &map, &T, 4, 0.003, Direction::Decrease),
            Err(Error::StepTooLarge { section: 4, .. })
        ));
        assert!(section_delta_stiffness(&m, &map, &T, 4, 0.003, Direction::Increase).is_ok());
        assert!(section_delta_stiffness(&m, &map, &T, 4, -0.001, Direction::Increase).is_err());
    }

    #[test]
    fn delta_policy_stops_at_lower_bound() {
        let p = DeltaPolicy::new(0.05).unwrap();
        assert!((p.step(0.01, 0.001) - 0.0005).abs() < 1e-18);
        assert!((p.step(0.00102, 0.001) - 0.00002).abs() < 1e-15);
        assert!((p.step(0.001, 0.001) - 0.00005).abs() < 1e-18);
        assert!(DeltaPolicy::new(0.0).is_err());
        assert!(DeltaPolicy::new(1.0).is_err());
    }

    #[test]
    fn signs_and_boundary_effect_on_uniform_strips() {
        let m = model(8, 10, 5);
        let a = analyze(&m, &[0.005; 5], 3, &EigenConfig::default()).unwrap();
        let r = stability_report(&m, &a, &DeltaPolicy::default()).unwrap();
        assert_eq!(r.len(), 5);
        for e in &r.entries {
            assert!(e.beta_plus > 0.0 && e.beta_minus < 0.0, "{e:?}");
        }
        let b: Vec<f64> = r.entries.iter().map(|e| e.beta_plus).collect();
        assert!((b[0] - b[4]).abs() <= 1e-8 * b[0]);
        assert!((b[1] - b[3]).abs() <= 1e-8 * b[1]);
        assert!(b[2] > b[1] && b[1] > b[0], "{b:?}");
        assert_eq!(
            r.to_csv(),
            stability_report(&m, &a, &DeltaPolicy::default())
                .unwrap()
                .to_csv()
        );
    }

    /// Exact first load factor of `(K(t'), K_ss(t))`, i.e. with the stress
    /// stiffness held at the current design, and the full re-analysis.
    fn perturbed(m: &PanelModel, a: &Analysis, i: usize, dt: f64) -> (f64, Analysis) {
        let mut t = a.thicknesses.clone();
        t[i] += dt;
        let b = analyze(m, &t, 4, &EigenConfig::default()).unwrap();
        let frozen = b
            .system
            .clone()
            .with_stress_stiffness(a.system.k_ss().clone())
            .unwrap();
        let lf = buckling_solve(&frozen, 4, &EigenConfig::default())
            .unwrap()
            .lambda1();
        (lf, b)
    }

    #[test]
    fn beta_bounds_the_frozen_stress_change_to_second_order() {
        let m = model(6, 5, 5);
        let a = analyze(&m, &T, 4, &EigenConfig::default()).unwrap();
        let map = a.system.dof_map();
        for i in 0..5 {
            for dir in [Direction::Increase, Direction::Decrease] {
                let gaps: Vec<f64> = [0.04, 0.02, 0.01]
                    .iter()
                    .map(|eta| {
                        let dt = eta * T[i];
                        let d = section_delta_stiffness(&m, map, &T, i, dt, dir).unwrap();
                        let beta = buckling_stability(&a.modes, &d);
                        let (lf, _) = perturbed(&m, &a, i, dir.sign() * dt);
                        // minimum principle: the frozen mode overestimates
                        let gap = a.lambda1() + beta - lf;
                        assert!(gap >= -1e-10 * a.lambda1(), "section {i}: {gap}");
                        gap
                    })
                    .collect();
                assert!(
                    gaps[0] > 3.0 * gaps[1] && gaps[1] > 3.0 * gaps[2],
                    "section {i}: {gaps:?}"
                );
            }
        }
    }

    #[test]
    fn stress_corrected_beta_converges_to_finite_difference() {
        let m = model(6, 5, 5);
        let a = analyze(&m, &T, 4, &EigenConfig::default()).unwrap();
        let map = a.system.dof_map();
        let u = a.modes.first_mode();
        for i in 0..5 {
            for dir in [Direction::Increase, Direction::Decrease] {
                let errs: Vec<f64> = [0.02, 0.01, 0.005]
                    .iter()
                    .map(|eta| {
                        let dt = eta * T[i];
                        let d = section_delta_stiffness(&m, map, &T, i, dt, dir).unwrap();
                        let (_, b) = perturbed(&m, &a, i, dir.sign() * dt);
                        let fd = b.lambda1() - a.lambda1();
                        let dkss = b.system.k_ss().quad_form(u) - a.system.k_ss().quad_form(u);
                        let estimate = buckling_stability(&a.modes, &d) - a.lambda1() * dkss;
                        ((estimate - fd) / fd).abs()
                    })
                    .collect();
                assert!(
                    errs[0] > 1.8 * errs[1] && errs[1] > 1.8 * errs[2],
                    "section {i}: {errs:?}"
                );
            }
        }
    }

    #[test]
    fn fd_sensitivity_is_antisymmetric_and_additive() {
        let m = model(6, 5, 5);
        let cfg = EigenConfig::default();
        let a = analyze(&m, &T, 4, &cfg).unwrap();
        assert_eq!(fd_lambda_sensitivity(&m, &a, 0, 0.0, &cfg).unwrap(), 0.0);
        let up = fd_lambda_sensitivity(&m, &a, 2, 1e-4, &cfg).unwrap();
        let down = fd_lambda_sensitivity(&m, &a, 2, -1e-4, &cfg).unwrap();
        assert!(up > 0.0 && down < 0.0);

        let mut scratch = Vec::new();
        let changes: Vec<(usize, f64)> = (0..5).map(|i| (i, 1e-4 * T[i])).collect();
        let together = fd_lambda_change(&m, &a, &mut scratch, &changes, &cfg).unwrap();
        let apart: f64 = changes
            .iter()
            .map(|&(i, dt)| fd_lambda_sensitivity(&m, &a, i, dt, &cfg).unwrap())
            .sum();
        assert!(
            ((together - apart) / together).abs() < 1e-3,
            "{together} vs {apart}"
        );
    }

    #[test]
    fn single_section_report() {
        let m = model(3, 4, 1);
        let a = analyze(&m, &[0.005], 2, &EigenConfig::default()).unwrap();
        let r = stability_report(&m, &a, &DeltaPolicy::default()).unwrap();
        assert_eq!(r.len(), 1);
        // thickening every element scales K: β⁺ is λ₁ times the relative change
        let e = &r.entries[0];
        assert!(e.beta_plus > 0.0 && e.beta_minus < 0.0);
        assert!(e.beta_plus < a.lambda1() * (1.05f64.powi(3) - 1.0) * (1.0 + 1e-9));
    }
}
