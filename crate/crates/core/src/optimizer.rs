//! eigenOpt: mass minimisation driven by the section stability values, and a
//! projected finite-difference descent used as a comparison baseline.
//!
//! An eigenOpt iteration analyses the current design, ranks the sections by
//! β and moves a fraction θ of them by one relative step. While the design
//! is infeasible it only thickens sections with the largest β⁺. Once
//! feasible it only thins sections whose β⁻ is closest to zero, sized so the
//! additive prediction `λ₁ + Σβ⁻` stays at or above `λ_min`.
//!
//! The prediction is optimistic: with `K_ss` frozen, `λ₁ + β` is a Rayleigh
//! quotient of the thinned design and so bounds its true `λ₁` from above. A
//! thinned design is therefore re-analysed before it is accepted; if it
//! turns out infeasible the step factor is halved and the move retried from
//! the current design. When the step would fall below the floor the design
//! is held, which lets the mass-window criterion terminate the run.

use serde::{Deserialize, Serialize};

use crate::eigen::EigenConfig;
use crate::error::{Error, Result};
use crate::model::{DesignVector, PanelModel};
use crate::stability::{
    analyze_from, fd_lambda_sensitivity, stability_report, Analysis, DeltaPolicy, Direction,
    StabilityReport,
};

pub const DEFAULT_LAMBDA_MIN: f64 = 1.30;

/// Relative β difference below which two sections rank as tied.
pub const TIE_TOLERANCE: f64 = 1e-9;
/// Smallest accepted fraction of the full step before the design is held.
const STEP_FLOOR: f64 = 0.1;
/// Step factor below which repeated rejections give up and hold.
const MIN_STEP_FACTOR: f64 = 1.0 / 16.0;
/// Relative thickness perturbation of the baseline's gradient estimate.
const FD_RELATIVE_STEP: f64 = 0.01;
/// Line-search halvings tried by the baseline.
const LINE_SEARCH_STEPS: usize = 6;

#[derive(Debug, Clone)]
pub struct OptimizationProblem {
    pub model: PanelModel,
    pub initial_design: DesignVector,
    pub lambda_min: f64,
}

impl OptimizationProblem {
    pub fn new(model: PanelModel, initial_design: DesignVector, lambda_min: f64) -> Result<Self> {
        if !(lambda_min > 0.0 && lambda_min.is_finite()) {
            return Err(Error::field("lambda_min", "must be positive"));
        }
        // re-validate against this model's bounds
        let initial_design = DesignVector::new(&model, initial_design.into_vec())?;
        Ok(Self {
            model,
            initial_design,
            lambda_min,
        })
    }

    pub fn lower_bounds(&self) -> Vec<f64> {
        self.model.lower_bounds()
    }

    pub fn upper_bounds(&self) -> Vec<f64> {
        self.model.upper_bounds()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EigenOptConfig {
    /// Fraction of eligible sections moved per iteration.
    pub theta0: f64,
    /// Per-iteration multiplier of `theta0`.
    pub theta_decay: f64,
    /// Relative thickness step.
    pub eta: f64,
    pub max_iters: usize,
    /// Relative mass spread over the window that counts as converged.
    pub rel_tol: f64,
    pub window: usize,
    /// Eigenvalues computed and recorded per iteration.
    pub modes: usize,
    /// Thicken and thin in the same iteration, as in the unsplit method.
    pub mixed_moves: bool,
    pub lambda_min: f64,
}

impl Default for EigenOptConfig {
    fn default() -> Self {
        Self {
            theta0: 0.20,
            theta_decay: 1.0,
            eta: 0.05,
            max_iters: 200,
            rel_tol: 1e-3,
            window: 5,
            modes: crate::eigen::DEFAULT_MODES,
            mixed_moves: false,
            lambda_min: DEFAULT_LAMBDA_MIN,
        }
    }
}

impl EigenOptConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !unit(self.theta0) {
            return Err(Error::field("theta0", "must lie in (0, 1]"));
        }
        if !unit(self.theta_decay) {
            return Err(Error::field("theta_decay", "must lie in (0, 1]"));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::field("eta", "must lie in (0, 1)"));
        }
        if !(self.rel_tol > 0.0 && self.rel_tol.is_finite()) {
            return Err(Error::field("rel_tol", "must be positive"));
        }
        if self.window < 2 {
            return Err(Error::field("window", "must be at least 2"));
        }
        if self.modes == 0 {
            return Err(Error::field("modes", "must be at least 1"));
        }
        if !(self.lambda_min > 0.0 && self.lambda_min.is_finite()) {
            return Err(Error::field("lambda_min", "must be positive"));
        }
        Ok(())
    }

    pub fn theta(&self, iter: usize) -> f64 {
        self.theta0 * self.theta_decay.powi(iter as i32)
    }
}

/// A thickness change applied to one section between two records.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Move {
    pub section: usize,
    pub direction: Direction,
    /// Magnitude actually applied, after bound clamping.
    pub delta_t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub design: DesignVector,
    pub mass: f64,
    pub lambda_1: f64,
    pub lambdas: Vec<f64>,
    /// Moves taken from this design to the next; empty for the last record.
    pub moves: Vec<Move>,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    Converged,
    MaxIters,
    Error(String),
}

impl Termination {
    pub fn label(&self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::MaxIters => "max_iters",
            Termination::Error(_) => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationHistory {
    pub records: Vec<IterationRecord>,
    pub termination: Termination,
    /// Complete analyses (assembly, static solve, eigen solve) performed.
    pub fe_solves: usize,
}

impl OptimizationHistory {
    /// Lowest-mass feasible record; ties go to the earliest.
    pub fn best_feasible(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, r) in self.records.iter().enumerate() {
            if r.feasible && best.is_none_or(|b| r.mass < self.records[b].mass) {
                best = Some(i);
            }
        }
        best
    }

    pub fn last(&self) -> &IterationRecord {
        self.records
            .last()
            .expect("history holds the initial record")
    }

    /// Iterations performed, i.e. transitions between records.
    pub fn iterations(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    pub fn infeasible_fraction(&self) -> f64 {
        let n = self.records.iter().filter(|r| !r.feasible).count();
        n as f64 / self.records.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankMode {
    Grow,
    Shrink,
}

/// Sections to move, best first: `max(1, ⌈θ · eligible⌉)` of them.
///
/// Shrinking ranks by β⁻ descending (the smallest loss of λ₁ first) among
/// sections above their lower bound; growing ranks by β⁺ descending among
/// sections below their upper bound. β values that agree to within
/// `TIE_TOLERANCE` of the largest magnitude count as equal and keep the
/// lower section id first, so mirror-image sections are ordered by id
/// rather than by round-off.
pub fn rank_sections(
    report: &StabilityReport,
    model: &PanelModel,
    design: &[f64],
    mode: RankMode,
    theta: f64,
) -> Result<Vec<usize>> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::field("theta", "must lie in (0, 1]"));
    }
    let eligible: Vec<(usize, f64)> = report
        .entries
        .iter()
        .filter(|e| {
            let sec = &model.sections()[e.section_id];
            match mode {
                RankMode::Shrink => design[e.section_id] > sec.lower_bound,
                RankMode::Grow => design[e.section_id] < sec.upper_bound,
            }
        })
        .map(|e| {
            let key = match mode {
                RankMode::Shrink => e.beta_minus,
                RankMode::Grow => e.beta_plus,
            };
            (e.section_id, key)
        })
        .collect();
    if eligible.is_empty() {
        return Err(Error::EmptyMoveSet);
    }
    let scale = eligible.iter().fold(0.0f64, |m, e| m.max(e.1.abs()));
    let quantum = if scale > 0.0 {
        TIE_TOLERANCE * scale
    } else {
        1.0
    };
    let mut keyed: Vec<(usize, i64)> = eligible
        .iter()
        .map(|&(id, b)| (id, (b / quantum).round() as i64))
        .collect();
    keyed.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let count = move_count(theta, eligible.len());
    Ok(keyed.into_iter().take(count).map(|(id, _)| id).collect())
}

fn move_count(theta: f64, eligible: usize) -> usize {
    // the small offset keeps products like 0.2 · 5 from rounding up
    let raw = (theta * eligible as f64 - 1e-9).ceil() as usize;
    raw.clamp(1, eligible)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Converged,
    MaxIters,
}

/// Converged when the last `window` records are feasible and their masses
/// spread by at most `rel_tol` relative to the latest; otherwise stops at
/// `max_iters`.
pub fn check_convergence(records: &[IterationRecord], config: &EigenOptConfig) -> Decision {
    let Some(last) = records.last() else {
        return Decision::Continue;
    };
    if records.len() >= config.window {
        let tail = &records[records.len() - config.window..];
        if tail.iter().all(|r| r.feasible) {
            let (lo, hi) = tail
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                    (lo.min(r.mass), hi.max(r.mass))
                });
            if (hi - lo) <= config.rel_tol * last.mass.abs() {
                return Decision::Converged;
            }
        }
    }
    if last.iter >= config.max_iters {
        Decision::MaxIters
    } else {
        Decision::Continue
    }
}

fn record(
    problem: &OptimizationProblem,
    iter: usize,
    analysis: &Analysis,
    modes: usize,
) -> Result<IterationRecord> {
    let design = DesignVector::new(&problem.model, analysis.thicknesses.clone())?;
    let lambda_1 = analysis.lambda1();
    Ok(IterationRecord {
        iter,
        mass: problem.model.mass(&design),
        design,
        lambda_1,
        lambdas: analysis
            .modes
            .eigenvalues
            .iter()
            .take(modes)
            .copied()
            .collect(),
        moves: Vec::new(),
        feasible: lambda_1 >= problem.lambda_min,
    })
}

/// Applies signed steps, clamping to the section bounds, and reports the
/// moves actually made.
fn apply_moves(model: &PanelModel, t: &[f64], steps: &[(usize, f64)]) -> (Vec<f64>, Vec<Move>) {
    let mut next = t.to_vec();
    let mut moves = Vec::with_capacity(steps.len());
    for &(i, dt) in steps {
        let sec = &model.sections()[i];
        let new = (t[i] + dt).clamp(sec.lower_bound, sec.upper_bound);
        next[i] = new;
        if new != t[i] {
            moves.push(Move {
                section: i,
                direction: if new > t[i] {
                    Direction::Increase
                } else {
                    Direction::Decrease
                },
                delta_t: (new - t[i]).abs(),
            });
        }
    }
    (next, moves)
}

struct Run<'a> {
    problem: &'a OptimizationProblem,
    config: &'a EigenOptConfig,
    eigen: EigenConfig,
    fe_solves: usize,
}

impl Run<'_> {
    fn analyze(&mut self, t: &[f64], start: Option<&Analysis>) -> Result<Analysis> {
        self.fe_solves += 1;
        let seed = start.map_or(&[][..], |a| &a.modes.eigenvectors[..]);
        analyze_from(&self.problem.model, t, self.config.modes, &self.eigen, seed)
    }

    /// One eigenOpt transition. Returns the next analysis and the moves, or
    /// `None` for a hold.
    fn step(
        &mut self,
        current: &Analysis,
        report: &StabilityReport,
        theta: f64,
        step_factor: &mut f64,
    ) -> Result<Option<(Analysis, Vec<Move>)>> {
        let model = &self.problem.model;
        let t = &current.thicknesses;
        let lambda1 = current.lambda1();
        let lambda_min = self.problem.lambda_min;
        let feasible = lambda1 >= lambda_min;

        let grow = if !feasible || self.config.mixed_moves {
            match rank_sections(report, model, t, RankMode::Grow, theta) {
                Ok(ids) => ids,
                Err(Error::EmptyMoveSet) if feasible => Vec::new(),
                Err(e) => return Err(e),
            }
        } else {
            Vec::new()
        };
        let shrink: Vec<usize> = if feasible || self.config.mixed_moves {
            match rank_sections(report, model, t, RankMode::Shrink, theta) {
                Ok(ids) => ids.into_iter().filter(|i| !grow.contains(i)).collect(),
                Err(Error::EmptyMoveSet) => Vec::new(),
                Err(e) => return Err(e),
            }
        } else {
            Vec::new()
        };

        let entry = |i: usize| &report.entries[i];
        let grow_steps: Vec<(usize, f64)> = grow.iter().map(|&i| (i, entry(i).delta_t)).collect();
        let gain: f64 = grow.iter().map(|&i| entry(i).beta_plus).sum();
        let loss: f64 = -shrink.iter().map(|&i| entry(i).beta_minus).sum::<f64>();

        // largest fraction of the full thinning step the linear model allows
        let margin = lambda1 + gain - lambda_min;
        let allowed = if shrink.is_empty() || margin <= 0.0 {
            0.0
        } else if loss <= margin {
            1.0
        } else {
            margin / loss
        };

        if allowed < STEP_FLOOR {
            if grow_steps.is_empty() {
                return Ok(None);
            }
            let (next, moves) = apply_moves(model, t, &grow_steps);
            return Ok(Some((self.analyze(&next, Some(current))?, moves)));
        }

        loop {
            let fraction = allowed * *step_factor;
            let mut steps = grow_steps.clone();
            steps.extend(shrink.iter().map(|&i| (i, -fraction * entry(i).delta_t)));
            let (next, moves) = apply_moves(model, t, &steps);
            let trial = self.analyze(&next, Some(current))?;
            // thinning must not leave a feasible design infeasible
            if !feasible || trial.lambda1() >= lambda_min {
                return Ok(Some((trial, moves)));
            }
            *step_factor *= 0.5;
            if *step_factor < MIN_STEP_FACTOR {
                return Ok(None);
            }
        }
    }
}

/// Runs eigenOpt from the problem's initial design.
pub fn run_eigenopt(
    problem: &OptimizationProblem,
    config: &EigenOptConfig,
) -> Result<OptimizationHistory> {
    config.validate()?;
    let policy = DeltaPolicy::new(config.eta)?;
    let mut run = Run {
        problem,
        config,
        eigen: EigenConfig::default(),
        fe_solves: 0,
    };
    let t0 = problem.initial_design.as_slice();
    let mut current = run.analyze(t0, None)?;
    if current.lambda1() < problem.lambda_min
        && t0
            .iter()
            .zip(problem.upper_bounds())
            .all(|(t, ub)| *t >= ub)
    {
        return Err(Error::InfeasibleProblem);
    }

    let mut records = vec![record(problem, 0, &current, config.modes)?];
    let mut step_factor = 1.0;
    let termination = loop {
        match check_convergence(&records, config) {
            Decision::Converged => break Termination::Converged,
            Decision::MaxIters => break Termination::MaxIters,
            Decision::Continue => {}
        }
        let iter = records.len() - 1;
        let outcome = stability_report(&problem.model, &current, &policy)
            .and_then(|report| run.step(&current, &report, config.theta(iter), &mut step_factor));
        match outcome {
            Ok(Some((next, moves))) => {
                records.last_mut().unwrap().moves = moves;
                current = next;
            }
            Ok(None) => {}
            Err(e) => break Termination::Error(e.to_string()),
        }
        match record(problem, iter + 1, &current, config.modes) {
            Ok(r) => records.push(r),
            Err(e) => break Termination::Error(e.to_string()),
        }
    };
    Ok(OptimizationHistory {
        records,
        termination,
        fe_solves: run.fe_solves,
    })
}

/// Projected finite-difference descent on mass with the buckling
/// constraint handled as in a feasible-directions method.
///
/// Each iteration estimates `∂λ₁/∂t_i` by forward differences. Away from
/// the constraint the direction is steepest mass descent; near it the
/// component along `∇λ₁` is removed and a linearised correction that
/// brings `λ₁` to just above `λ_min` is added. Directions are scaled by the thicknesses so all sections move by
/// comparable relative amounts, at most `eta` per iteration. A backtracking
/// search accepts the first trial that is feasible and lighter; if none is,
/// the run stops as converged. An infeasible design is first moved up
/// `∇λ₁` until feasible.
pub fn run_baseline_fd(
    problem: &OptimizationProblem,
    config: &EigenOptConfig,
) -> Result<OptimizationHistory> {
    config.validate()?;
    let model = &problem.model;
    let mut run = Run {
        problem,
        config,
        eigen: EigenConfig::default(),
        fe_solves: 0,
    };
    let (lb, ub) = (model.lower_bounds(), model.upper_bounds());
    let area: Vec<f64> = (0..model.section_count())
        .map(|i| model.section_area(i))
        .collect();
    let rho = model.material().density;
    let lambda_min = problem.lambda_min;
    // constraint considered active within this band above λ_min
    let band = 0.05 * lambda_min;
    let margin = 0.005 * lambda_min;

    let mut current = run.analyze(problem.initial_design.as_slice(), None)?;
    let mut records = vec![record(problem, 0, &current, config.modes)?];
    let termination = loop {
        match check_convergence(&records, config) {
            Decision::Converged => break Termination::Converged,
            Decision::MaxIters => break Termination::MaxIters,
            Decision::Continue => {}
        }
        let iter = records.len() - 1;
        let t = current.thicknesses.clone();
        let lambda1 = current.lambda1();
        let n = t.len();

        let mut grad = Vec::with_capacity(n);
        let mut failed = None;
        for (i, &ti) in t.iter().enumerate() {
            let h = FD_RELATIVE_STEP * ti;
            run.fe_solves += 1;
            match fd_lambda_sensitivity(model, &current, i, h, &run.eigen) {
                Ok(d) => grad.push(d / h),
                Err(e) => {
                    failed = Some(e);
                    break;
                }
            }
        }
        if let Some(e) = failed {
            break Termination::Error(e.to_string());
        }

        // directions in scaled variables z_i = t_i / t_i(current)
        let gl: Vec<f64> = (0..n).map(|i| grad[i] * t[i]).collect();
        let gm: Vec<f64> = (0..n).map(|i| rho * area[i] * t[i]).collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let gl2 = dot(&gl, &gl);
        let peak = |d: &[f64]| d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let fit = |d: &mut [f64]| {
            let p = peak(d);
            if p > config.eta {
                d.iter_mut().for_each(|v| *v *= config.eta / p);
            }
        };
        let mut d: Vec<f64> = if lambda1 < lambda_min {
            gl.clone()
        } else {
            let mut d: Vec<f64> = gm.iter().map(|g| -g).collect();
            let active = lambda1 - lambda_min < band && gl2 > 0.0;
            if active {
                let along = dot(&d, &gl) / gl2;
                if along < 0.0 {
                    d.iter_mut().zip(&gl).for_each(|(di, g)| *di -= along * g);
                }
            }
            let p = peak(&d);
            if p > 0.0 {
                d.iter_mut().for_each(|v| *v *= config.eta / p);
            }
            if active {
                // linearised move onto λ_min plus a small margin
                let mut corr: Vec<f64> = gl
                    .iter()
                    .map(|g| (lambda_min + margin - lambda1) / gl2 * g)
                    .collect();
                fit(&mut corr);
                d.iter_mut().zip(&corr).for_each(|(di, c)| *di += c);
            }
            d
        };
        for i in 0..n {
            if (t[i] <= lb[i] && d[i] < 0.0) || (t[i] >= ub[i] && d[i] > 0.0) {
                d[i] = 0.0;
            }
        }
        fit(&mut d);
        if lambda1 < lambda_min {
            let p = peak(&d);
            if p > 0.0 {
                d.iter_mut().for_each(|v| *v *= config.eta / p);
            }
        }

        let mut accepted = None;
        if peak(&d) > 0.0 {
            let mut scale = 1.0;
            for _ in 0..LINE_SEARCH_STEPS {
                let steps: Vec<(usize, f64)> = (0..n).map(|i| (i, scale * d[i] * t[i])).collect();
                let (next, moves) = apply_moves(model, &t, &steps);
                let trial = match run.analyze(&next, Some(&current)) {
                    Ok(a) => a,
                    Err(e) => {
                        failed = Some(e);
                        break;
                    }
                };
                let ok = if lambda1 < lambda_min {
                    trial.lambda1() > lambda1
                } else {
                    trial.lambda1() >= lambda_min && model.mass_of(&next) < model.mass_of(&t)
                };
                if ok && !moves.is_empty() {
                    accepted = Some((trial, moves));
                    break;
                }
                scale *= 0.5;
            }
        }
        if let Some(e) = failed {
            break Termination::Error(e.to_string());
        }
        let Some((next, moves)) = accepted else {
            break if lambda1 >= lambda_min {
                Termination::Converged
            } else {
                Termination::Error("no step improves the buckling factor".into())
            };
        };
        records.last_mut().unwrap().moves = moves;
        current = next;
        match record(problem, iter + 1, &current, config.modes) {
            Ok(r) => records.push(r),
            Err(e) => break Termination::Error(e.to_string()),
        }
    };
    Ok(OptimizationHistory {
        records,
        termination,
        fe_solves: run.fe_solves,
    })
}

/// Side-by-side summary of optimizer runs on the same problem.
pub fn comparison_table(runs: &[(&str, &OptimizationHistory)]) -> String {
    let mut out =
        String::from("| optimizer | status | mass | lambda_1 | iterations | fe_solves |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    for (name, h) in runs {
        let last = h.last();
        out.push_str(&format!(
            "| {} | {} | {:.6} | {:.6} | {} | {} |\n",
            name,
            h.termination.label(),
            last.mass,
            last.lambda_1,
            h.iterations(),
            h.fe_solves
        ));
    }
    out
}
