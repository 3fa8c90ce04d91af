//! Model and config documents (JSON) and the plain-text result files.
//!
//! Every writer renders to a `String` first so output is byte-identical
//! for identical inputs; floats use Rust's shortest round-trip formatting.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eigen::BucklingModes;
use crate::error::{Error, Result};
use crate::fem::DofMap;
use crate::model::{
    dof, BoundaryConditions, Corner, DesignVector, Edge, EdgeSupport, LoadCase, Material,
    PanelModel, PanelSpec, SectionMembers, SectionSpec, DEFAULT_INITIAL_THICKNESS,
    DEFAULT_LOWER_BOUND, DEFAULT_REFERENCE_LOAD, DEFAULT_UPPER_BOUND, DOFS_PER_NODE,
};
use crate::optimizer::{EigenOptConfig, OptimizationHistory};
use crate::stability::StabilityReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDocument {
    #[serde(default = "one")]
    width: f64,
    #[serde(default = "one")]
    height: f64,
    #[serde(default = "sixteen")]
    nx: usize,
    #[serde(default = "sixteen")]
    ny: usize,
    #[serde(default)]
    material: MaterialDocument,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sections: Option<Vec<SectionDocument>>,
    #[serde(default)]
    load: LoadDocument,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bcs: Option<BcsDocument>,
}

fn one() -> f64 {
    1.0
}

fn sixteen() -> usize {
    16
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct MaterialDocument {
    #[serde(rename = "E")]
    e: f64,
    nu: f64,
    rho: f64,
}

impl Default for MaterialDocument {
    fn default() -> Self {
        let m = Material::aluminum();
        Self {
            e: m.youngs_modulus,
            nu: m.poisson_ratio,
            rho: m.density,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SectionDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rows: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    elements: Option<Vec<usize>>,
    #[serde(default = "default_lb")]
    lb: f64,
    #[serde(default = "default_ub")]
    ub: f64,
    #[serde(default = "default_t0")]
    t0: f64,
}

fn default_lb() -> f64 {
    DEFAULT_LOWER_BOUND
}

fn default_ub() -> f64 {
    DEFAULT_UPPER_BOUND
}

fn default_t0() -> f64 {
    DEFAULT_INITIAL_THICKNESS
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LoadDocument {
    edge: Edge,
    magnitude: f64,
}

impl Default for LoadDocument {
    fn default() -> Self {
        Self {
            edge: Edge::Top,
            magnitude: DEFAULT_REFERENCE_LOAD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum CornerChoice {
    None,
    BottomLeft,
    BottomRight,
    TopRight,
    TopLeft,
}

impl From<Option<Corner>> for CornerChoice {
    fn from(c: Option<Corner>) -> Self {
        match c {
            None => CornerChoice::None,
            Some(Corner::BottomLeft) => CornerChoice::BottomLeft,
            Some(Corner::BottomRight) => CornerChoice::BottomRight,
            Some(Corner::TopRight) => CornerChoice::TopRight,
            Some(Corner::TopLeft) => CornerChoice::TopLeft,
        }
    }
}

impl From<CornerChoice> for Option<Corner> {
    fn from(c: CornerChoice) -> Self {
        match c {
            CornerChoice::None => None,
            CornerChoice::BottomLeft => Some(Corner::BottomLeft),
            CornerChoice::BottomRight => Some(Corner::BottomRight),
            CornerChoice::TopRight => Some(Corner::TopRight),
            CornerChoice::TopLeft => Some(Corner::TopLeft),
        }
    }
}

/// Overrides on top of the supports implied by the loaded edge.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BcsDocument {
    #[serde(skip_serializing_if = "Option::is_none")]
    bottom: Option<EdgeSupport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    right: Option<EdgeSupport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    top: Option<EdgeSupport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    left: Option<EdgeSupport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tie_loaded_edge: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pinned_corner: Option<CornerChoice>,
}

impl BcsDocument {
    fn apply(&self, mut bcs: BoundaryConditions) -> BoundaryConditions {
        let edges = [self.bottom, self.right, self.top, self.left];
        for (edge, over) in Edge::ALL.into_iter().zip(edges) {
            if let Some(s) = over {
                *bcs.edge_mut(edge) = s;
            }
        }
        if let Some(tie) = self.tie_loaded_edge {
            bcs.tie_loaded_edge = tie;
        }
        if let Some(c) = self.pinned_corner {
            bcs.pinned_corner = c.into();
        }
        bcs
    }

    fn full(bcs: &BoundaryConditions) -> Self {
        Self {
            bottom: Some(*bcs.edge(Edge::Bottom)),
            right: Some(*bcs.edge(Edge::Right)),
            top: Some(*bcs.edge(Edge::Top)),
            left: Some(*bcs.edge(Edge::Left)),
            tie_loaded_edge: Some(bcs.tie_loaded_edge),
            pinned_corner: Some(bcs.pinned_corner.into()),
        }
    }
}

fn parse_error(context: &str, e: serde_json::Error) -> Error {
    Error::Parse {
        context: format!("{context}:{}:{}", e.line(), e.column()),
        message: e.to_string(),
    }
}

/// Parses a model document, applying defaults for omitted fields, and
/// returns the validated model with its initial design.
pub fn parse_model_str(text: &str, context: &str) -> Result<(PanelModel, DesignVector)> {
    let doc: ModelDocument = serde_json::from_str(text).map_err(|e| parse_error(context, e))?;
    build_model(doc)
}

pub fn parse_model_file(path: &Path) -> Result<(PanelModel, DesignVector)> {
    let text = fs::read_to_string(path)?;
    parse_model_str(&text, &path.display().to_string())
}

fn build_model(doc: ModelDocument) -> Result<(PanelModel, DesignVector)> {
    let material = Material::new(doc.material.e, doc.material.nu, doc.material.rho)?;
    let load = LoadCase::new(doc.load.magnitude, doc.load.edge)?;
    let (sections, t0) = match doc.sections {
        None => {
            let s =
                SectionSpec::balanced_strips(5, doc.ny, DEFAULT_LOWER_BOUND, DEFAULT_UPPER_BOUND)?;
            let t0 = vec![DEFAULT_INITIAL_THICKNESS; s.len()];
            (s, t0)
        }
        Some(list) => {
            let mut specs = Vec::with_capacity(list.len());
            let mut t0 = Vec::with_capacity(list.len());
            for (i, s) in list.into_iter().enumerate() {
                let members = match (s.rows, s.elements) {
                    (Some(r), None) => SectionMembers::Rows(r),
                    (None, Some(e)) => SectionMembers::Elements(e),
                    _ => {
                        return Err(Error::field(
                            format!("sections[{i}]"),
                            "exactly one of `rows` or `elements` is required",
                        ))
                    }
                };
                specs.push(SectionSpec {
                    members,
                    lower_bound: s.lb,
                    upper_bound: s.ub,
                });
                t0.push(s.t0);
            }
            (specs, t0)
        }
    };
    let bcs = doc
        .bcs
        .map(|o| o.apply(BoundaryConditions::for_load(load.loaded_edge)));
    let model = PanelModel::new(PanelSpec {
        width: doc.width,
        height: doc.height,
        nx: doc.nx,
        ny: doc.ny,
        material,
        sections,
        load,
        bcs,
    })?;
    for (s, &t) in model.sections().iter().zip(&t0) {
        if !(t >= s.lower_bound && t <= s.upper_bound) {
            return Err(Error::field(
                format!("sections[{}].t0", s.id),
                format!("{t} outside [{}, {}]", s.lower_bound, s.upper_bound),
            ));
        }
    }
    let design = DesignVector::new(&model, t0)?;
    Ok((model, design))
}

/// Renders a model and design as a complete document. Sections made of
/// whole element rows are written as rows.
pub fn model_to_json(model: &PanelModel, design: &DesignVector) -> String {
    let nx = model.nx();
    let sections = model
        .sections()
        .iter()
        .zip(design.as_slice())
        .map(|(s, &t0)| {
            let whole_rows = s.element_ids.len() % nx == 0
                && s.element_ids
                    .chunks(nx)
                    .all(|c| c[0] % nx == 0 && c.windows(2).all(|w| w[1] == w[0] + 1));
            let (rows, elements) = if whole_rows {
                (
                    Some(s.element_ids.chunks(nx).map(|c| c[0] / nx).collect()),
                    None,
                )
            } else {
                (None, Some(s.element_ids.clone()))
            };
            SectionDocument {
                rows,
                elements,
                lb: s.lower_bound,
                ub: s.upper_bound,
                t0,
            }
        })
        .collect();
    let m = model.material();
    let doc = ModelDocument {
        width: model.width(),
        height: model.height(),
        nx,
        ny: model.ny(),
        material: MaterialDocument {
            e: m.youngs_modulus,
            nu: m.poisson_ratio,
            rho: m.density,
        },
        sections: Some(sections),
        load: LoadDocument {
            edge: model.load().loaded_edge,
            magnitude: model.load().reference_magnitude,
        },
        bcs: Some(BcsDocument::full(model.bcs())),
    };
    let mut out = serde_json::to_string_pretty(&doc).expect("model document serializes");
    out.push('\n');
    out
}

pub fn parse_config_str(text: &str, context: &str) -> Result<EigenOptConfig> {
    let cfg: EigenOptConfig = serde_json::from_str(text).map_err(|e| parse_error(context, e))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config_file(path: &Path) -> Result<EigenOptConfig> {
    let text = fs::read_to_string(path)?;
    parse_config_str(&text, &path.display().to_string())
}

/// `iter,mass,lambda_1,feasible,moves,t_1..t_N`, one row per record.
pub fn history_csv(history: &OptimizationHistory) -> String {
    let n = history.records.first().map_or(0, |r| r.design.len());
    let mut out = String::from("iter,mass,lambda_1,feasible,moves");
    for i in 1..=n {
        let _ = write!(out, ",t_{i}");
    }
    out.push('\n');
    for r in &history.records {
        let moves: Vec<String> = r
            .moves
            .iter()
            .map(|m| format!("{}:{}{}", m.section, m.direction.symbol(), m.delta_t))
            .collect();
        let _ = write!(
            out,
            "{},{},{},{},{}",
            r.iter,
            r.mass,
            r.lambda_1,
            r.feasible,
            moves.join(";")
        );
        for t in r.design.as_slice() {
            let _ = write!(out, ",{t}");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub status: String,
    pub iters: usize,
    pub final_mass: f64,
    pub final_lambda1: f64,
    pub best_feasible_iter: Option<usize>,
}

impl Summary {
    pub fn of(history: &OptimizationHistory) -> Self {
        let last = history.last();
        Self {
            status: history.termination.label().to_string(),
            iters: history.iterations(),
            final_mass: last.mass,
            final_lambda1: last.lambda_1,
            best_feasible_iter: history.best_feasible().map(|i| history.records[i].iter),
        }
    }
}

pub fn summary_json(history: &OptimizationHistory) -> String {
    let mut out = serde_json::to_string_pretty(&Summary::of(history)).expect("summary serializes");
    out.push('\n');
    out
}

pub fn series_mass_csv(history: &OptimizationHistory) -> String {
    let mut out = String::from("iter,mass\n");
    for r in &history.records {
        let _ = writeln!(out, "{},{}", r.iter, r.mass);
    }
    out
}

pub fn series_lambda1_csv(history: &OptimizationHistory) -> String {
    let mut out = String::from("iter,lambda_1\n");
    for r in &history.records {
        let _ = writeln!(out, "{},{}", r.iter, r.lambda_1);
    }
    out
}

pub fn series_thickness_csv(history: &OptimizationHistory) -> String {
    let n = history.records.first().map_or(0, |r| r.design.len());
    let mut out = String::from("iter");
    for i in 1..=n {
        let _ = write!(out, ",t_{i}");
    }
    out.push('\n');
    for r in &history.records {
        let _ = write!(out, "{}", r.iter);
        for t in r.design.as_slice() {
            let _ = write!(out, ",{t}");
        }
        out.push('\n');
    }
    out
}

/// `mode,lambda,critical_load`, modes numbered from 1.
pub fn eigenvalues_csv(modes: &BucklingModes, reference_load: f64) -> String {
    let mut out = String::from("mode,lambda,critical_load\n");
    for (i, (l, p)) in modes
        .eigenvalues
        .iter()
        .zip(modes.critical_loads(reference_load))
        .enumerate()
    {
        let _ = writeln!(out, "{},{},{}", i + 1, l, p);
    }
    out
}

/// Out-of-plane nodal displacement of every mode: `mode,node,x,y,w`.
pub fn mode_shapes_csv(model: &PanelModel, dofs: &DofMap, modes: &BucklingModes) -> String {
    let mut out = String::from("mode,node,x,y,w\n");
    for (k, u) in modes.eigenvectors.iter().enumerate() {
        let full = dofs.expand(u);
        for node in 0..model.node_count() {
            let (x, y) = model.node_position(node);
            let w = full[node * DOFS_PER_NODE + dof::W];
            let _ = writeln!(out, "{},{},{},{},{}", k + 1, node, x, y, w);
        }
    }
    out
}

pub fn stability_csv(report: &StabilityReport) -> String {
    report.to_csv()
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::write(dir.join(name), contents)?;
    Ok(())
}

pub const HISTORY_FILE: &str = "history.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SERIES_MASS_FILE: &str = "series_mass.csv";
pub const SERIES_LAMBDA1_FILE: &str = "series_lambda1.csv";
pub const SERIES_THICKNESS_FILE: &str = "series_thickness.csv";
pub const EIGENVALUES_FILE: &str = "eigenvalues.csv";
pub const MODE_SHAPES_FILE: &str = "mode_shapes.csv";
pub const STABILITY_FILE: &str = "stability.csv";

/// History, summary and the three plot series.
pub fn write_optimization_outputs(dir: &Path, history: &OptimizationHistory) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_file(dir, HISTORY_FILE, &history_csv(history))?;
    write_file(dir, SUMMARY_FILE, &summary_json(history))?;
    write_file(dir, SERIES_MASS_FILE, &series_mass_csv(history))?;
    write_file(dir, SERIES_LAMBDA1_FILE, &series_lambda1_csv(history))?;
    write_file(dir, SERIES_THICKNESS_FILE, &series_thickness_csv(history))
}

pub fn write_analysis_outputs(
    dir: &Path,
    model: &PanelModel,
    dofs: &DofMap,
    modes: &BucklingModes,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_file(
        dir,
        EIGENVALUES_FILE,
        &eigenvalues_csv(modes, model.load().reference_magnitude),
    )?;
    write_file(dir, MODE_SHAPES_FILE, &mode_shapes_csv(model, dofs, modes))
}

pub fn write_stability_output(dir: &Path, report: &StabilityReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_file(dir, STABILITY_FILE, &stability_csv(report))
}
