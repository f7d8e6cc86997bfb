//! Granger-causal graphs: extraction from trained selectors, sweep scores and
//! evaluation against a known graph.
//!
//! Adjacency entry `(v, w)` is `true` when variate `w` Granger-causes variate `v`,
//! i.e. row `v` lists the inputs of component `v`.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::train::ComponentModel;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphFile", into = "GraphFile")]
pub struct GcGraph {
    adjacency: Array2<bool>,
    /// `L x V x V`; slot `l` holds the edges acting at lag `l + 1`.
    lags: Option<Array3<bool>>,
    variate_names: Vec<String>,
}

/// JSON layout of a graph file.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraphFile {
    variate_names: Vec<String>,
    adjacency: Vec<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lags: Option<Vec<Vec<Vec<bool>>>>,
}

impl TryFrom<GraphFile> for GcGraph {
    type Error = Error;

    fn try_from(f: GraphFile) -> Result<Self> {
        let v = f.adjacency.len();
        let square = |m: &Vec<Vec<bool>>| m.len() == v && m.iter().all(|r| r.len() == v);
        if !square(&f.adjacency) {
            return Err(Error::Shape("adjacency is not square".into()));
        }
        let flat: Vec<bool> = f.adjacency.into_iter().flatten().collect();
        let adjacency = Array2::from_shape_vec((v, v), flat).expect("checked square");
        let lags = match f.lags {
            None => None,
            Some(l) => {
                if !l.iter().all(square) {
                    return Err(Error::Shape("lag adjacency is not square".into()));
                }
                let n = l.len();
                let flat: Vec<bool> = l.into_iter().flatten().flatten().collect();
                Some(Array3::from_shape_vec((n, v, v), flat).expect("checked square"))
            }
        };
        let names = if f.variate_names.is_empty() {
            (0..v).map(|i| format!("v{i}")).collect()
        } else {
            f.variate_names
        };
        match lags {
            Some(l) => GcGraph::with_lags(l, names),
            None => GcGraph::new(adjacency, names),
        }
    }
}

impl From<GcGraph> for GraphFile {
    fn from(g: GcGraph) -> Self {
        GraphFile {
            adjacency: g.adjacency.outer_iter().map(|r| r.to_vec()).collect(),
            lags: g.lags.map(|l| {
                l.outer_iter()
                    .map(|m| m.outer_iter().map(|r| r.to_vec()).collect())
                    .collect()
            }),
            variate_names: g.variate_names,
        }
    }
}

impl GcGraph {
    pub fn new(adjacency: Array2<bool>, variate_names: Vec<String>) -> Result<Self> {
        let (a, b) = adjacency.dim();
        if a != b || variate_names.len() != a {
            return Err(Error::Shape(format!(
                "adjacency {a}x{b} with {} names",
                variate_names.len()
            )));
        }
        Ok(Self {
            adjacency,
            lags: None,
            variate_names,
        })
    }

    /// Lag-resolved graph; the aggregated adjacency is the OR over lags.
    pub fn with_lags(lags: Array3<bool>, variate_names: Vec<String>) -> Result<Self> {
        let (_, a, b) = lags.dim();
        if a != b || variate_names.len() != a {
            return Err(Error::Shape(format!("lag adjacency {a}x{b} with {} names", variate_names.len())));
        }
        let adjacency = lags.map_axis(Axis(0), |l| l.iter().any(|&e| e));
        Ok(Self {
            adjacency,
            lags: Some(lags),
            variate_names,
        })
    }

    pub fn empty(v: usize) -> Self {
        Self {
            adjacency: Array2::from_elem((v, v), false),
            lags: None,
            variate_names: (0..v).map(|i| format!("v{i}")).collect(),
        }
    }

    pub fn num_variates(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn adjacency(&self) -> &Array2<bool> {
        &self.adjacency
    }

    pub fn lags(&self) -> Option<&Array3<bool>> {
        self.lags.as_ref()
    }

    pub fn variate_names(&self) -> &[String] {
        &self.variate_names
    }

    pub fn set_variate_names(&mut self, names: Vec<String>) -> Result<()> {
        if names.len() != self.num_variates() {
            return Err(Error::Shape("wrong number of variate names".into()));
        }
        self.variate_names = names;
        Ok(())
    }

    /// Does `w` Granger-cause `v`?
    pub fn has_edge(&self, v: usize, w: usize) -> bool {
        self.adjacency[[v, w]]
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.iter().filter(|&&e| e).count()
    }

    /// Copy without lag detail.
    pub fn aggregated(&self) -> GcGraph {
        Self {
            lags: None,
            ..self.clone()
        }
    }

    pub fn inverted(&self) -> GcGraph {
        Self {
            adjacency: self.adjacency.mapv(|e| !e),
            lags: None,
            variate_names: self.variate_names.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    /// 0/1 matrix with a header row of variate names; row `v` lists the inputs of `v`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut wtr = csv::Writer::from_writer(std::io::BufWriter::new(file));
        wtr.write_record(&self.variate_names)?;
        for row in self.adjacency.outer_iter() {
            wtr.write_record(row.iter().map(|&e| if e { "1" } else { "0" }))?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Graphviz digraph with one `w -> v` edge per causal link.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph granger {\n");
        for name in &self.variate_names {
            out.push_str(&format!("  {name:?};\n"));
        }
        for ((v, w), &e) in self.adjacency.indexed_iter() {
            if e {
                out.push_str(&format!(
                    "  {:?} -> {:?};\n",
                    self.variate_names[w], self.variate_names[v]
                ));
            }
        }
        out.push_str("}\n");
        out
    }
}

/// Edge confidence scores (higher means more confident), `V x V`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeScores {
    pub scores: Vec<Vec<f64>>,
}

impl EdgeScores {
    pub fn from_array(a: &Array2<f64>) -> Result<Self> {
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::Shape("edge scores must be finite".into()));
        }
        Ok(Self {
            scores: a.outer_iter().map(|r| r.to_vec()).collect(),
        })
    }

    pub fn get(&self, v: usize, w: usize) -> f64 {
        self.scores[v][w]
    }

    pub fn num_variates(&self) -> usize {
        self.scores.len()
    }
}

/// Confusion counts and derived metrics for one predicted graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auroc: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_lambda: Vec<LambdaMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaMetrics {
    pub lambda: f64,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub edges: usize,
}

/// Reads the graph off trained components: `w -> v` iff column `w` of component
/// `v`'s projection has nonzero norm. Per-lag selectors also yield lag graphs.
pub fn extract_graph(models: &[ComponentModel]) -> Result<GcGraph> {
    let v = models.len();
    if v == 0 {
        return Err(Error::Shape("no component models".into()));
    }
    let mut order: Vec<&ComponentModel> = models.iter().collect();
    order.sort_by_key(|m| m.variate);
    let ids: BTreeSet<usize> = order.iter().map(|m| m.variate).collect();
    if ids.len() != v || *ids.iter().next_back().expect("nonempty") != v - 1 {
        return Err(Error::Shape("component indices must be exactly 0..V".into()));
    }
    if order.iter().any(|m| m.selector.num_variates() != v) {
        return Err(Error::Shape("selector input width differs from the number of components".into()));
    }
    let names: Vec<String> = (0..v).map(|i| format!("v{i}")).collect();
    let per_lag = order.iter().all(|m| m.selector.lag_mode == crate::selector::LagMode::PerLag);
    if per_lag {
        let slots = order[0].selector.num_slots();
        if order.iter().any(|m| m.selector.num_slots() != slots) {
            return Err(Error::Shape("components disagree on the number of lags".into()));
        }
        let mut lags = Array3::from_elem((slots, v, v), false);
        for (row, m) in order.iter().enumerate() {
            let norms = m.selector.column_norms();
            for ((l, w), &n) in norms.indexed_iter() {
                lags[[l, row, w]] = n > 0.0;
            }
        }
        GcGraph::with_lags(lags, names)
    } else {
        let mut adj = Array2::from_elem((v, v), false);
        for (row, m) in order.iter().enumerate() {
            for (w, &n) in m.selector.variate_norms().iter().enumerate() {
                adj[[row, w]] = n > 0.0;
            }
        }
        GcGraph::new(adj, names)
    }
}

/// Survival counts over a λ sweep: the score of an edge is the number of sweep
/// graphs that contain it, so edges surviving stronger sparsity rank higher.
pub fn edge_scores_from_sweep(sweep: &[(f64, GcGraph)]) -> Result<EdgeScores> {
    if sweep.len() < 2 {
        return Err(Error::Config("a sweep needs at least 2 λ values".into()));
    }
    let v = sweep[0].1.num_variates();
    if sweep.iter().any(|(_, g)| g.num_variates() != v) {
        return Err(Error::Shape("sweep graphs differ in size".into()));
    }
    let mut scores = Array2::<f64>::zeros((v, v));
    for (_, g) in sweep {
        scores.zip_mut_with(g.adjacency(), |s, &e| {
            if e {
                *s += 1.0
            }
        });
    }
    EdgeScores::from_array(&scores)
}

fn scored_cells(v: usize, include_diagonal: bool) -> impl Iterator<Item = (usize, usize)> {
    (0..v)
        .flat_map(move |a| (0..v).map(move |b| (a, b)))
        .filter(move |(a, b)| include_diagonal || a != b)
}

/// Accuracy and balanced accuracy of `pred` against `truth` over all cells
/// (or off-diagonal cells only).
pub fn confusion_metrics(pred: &GcGraph, truth: &GcGraph, include_diagonal: bool) -> Result<MetricsReport> {
    let v = truth.num_variates();
    if pred.num_variates() != v {
        return Err(Error::Shape(format!(
            "predicted graph has {} variates, truth has {v}",
            pred.num_variates()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (a, b) in scored_cells(v, include_diagonal) {
        match (pred.has_edge(a, b), truth.has_edge(a, b)) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    if tp + fn_ == 0 || tn + fp == 0 {
        return Err(Error::DegenerateTruth(format!(
            "truth has {} positive and {} negative cells",
            tp + fn_,
            tn + fp
        )));
    }
    let total = (tp + fp + tn + fn_) as f64;
    let tpr = tp as f64 / (tp + fn_) as f64;
    let tnr = tn as f64 / (tn + fp) as f64;
    Ok(MetricsReport {
        accuracy: (tp + tn) as f64 / total,
        balanced_accuracy: 0.5 * (tpr + tnr),
        auroc: None,
        tp,
        fp,
        tn,
        fn_,
        per_lambda: Vec::new(),
    })
}

/// Probability that a random true edge outscores a random non-edge, ties counting
/// one half (Mann-Whitney statistic via mid-ranks).
pub fn auroc(scores: &EdgeScores, truth: &GcGraph, include_diagonal: bool) -> Result<f64> {
    let v = truth.num_variates();
    if scores.num_variates() != v || scores.scores.iter().any(|r| r.len() != v) {
        return Err(Error::Shape("score matrix does not match the truth graph".into()));
    }
    let mut cells: Vec<(f64, bool)> = scored_cells(v, include_diagonal)
        .map(|(a, b)| (scores.get(a, b), truth.has_edge(a, b)))
        .collect();
    let pos = cells.iter().filter(|c| c.1).count();
    let neg = cells.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateTruth(format!(
            "truth has {pos} positive and {neg} negative cells"
        )));
    }
    cells.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < cells.len() {
        let mut j = i;
        while j + 1 < cells.len() && cells[j + 1].0 == cells[i].0 {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * cells[i..=j].iter().filter(|c| c.1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Number of variates each component still reads (nonzero columns), by component index.
pub fn variable_usage(models: &[ComponentModel]) -> Vec<usize> {
    let mut order: Vec<&ComponentModel> = models.iter().collect();
    order.sort_by_key(|m| m.variate);
    order.iter().map(|m| m.selector.active_variates()).collect()
}
