//! Multivariate series storage, CSV IO, z-score normalization and context windows.

use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};

use crate::gc::GcGraph;
use crate::{Error, Result};

/// Population standard deviations below this are treated as constant variates.
pub const STD_FLOOR: f64 = 1e-8;

/// A `V x T` real-valued series (variates in rows, time in columns).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: Array2<f64>,
    variate_names: Vec<String>,
    truth: Option<GcGraph>,
}

impl Dataset {
    /// Builds a dataset, checking `V >= 2`, matching names and finite values.
    pub fn new(values: Array2<f64>, variate_names: Vec<String>) -> Result<Self> {
        let (v, _) = values.dim();
        if v < 2 {
            return Err(Error::Shape(format!("need at least 2 variates, got {v}")));
        }
        if variate_names.len() != v {
            return Err(Error::Shape(format!(
                "{} variate names for {v} variates",
                variate_names.len()
            )));
        }
        if let Some(((variate, time), _)) = values.indexed_iter().find(|(_, x)| !x.is_finite()) {
            return Err(Error::NonFiniteData { variate, time });
        }
        Ok(Self {
            values,
            variate_names,
            truth: None,
        })
    }

    /// Like [`Dataset::new`] with generated names `v0..v{V-1}`.
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        let names = default_names(values.nrows());
        Self::new(values, names)
    }

    pub fn with_truth(mut self, truth: GcGraph) -> Result<Self> {
        if truth.num_variates() != self.num_variates() {
            return Err(Error::Shape(format!(
                "truth graph has {} variates, dataset has {}",
                truth.num_variates(),
                self.num_variates()
            )));
        }
        self.truth = Some(truth);
        Ok(self)
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn variate_names(&self) -> &[String] {
        &self.variate_names
    }

    pub fn truth(&self) -> Option<&GcGraph> {
        self.truth.as_ref()
    }

    pub fn num_variates(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_steps(&self) -> usize {
        self.values.ncols()
    }

    /// Reads a CSV with one row per time step and one column per variate.
    pub fn load_csv(path: impl AsRef<Path>, has_header: bool) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file, has_header)
    }

    /// Parses CSV from any reader. Reported row and column indices are 1-based and
    /// count data rows only (the header row is not counted).
    pub fn read_csv<R: std::io::Read>(reader: R, has_header: bool) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(has_header)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header: Option<Vec<String>> = if has_header {
            Some(rdr.headers()?.iter().map(str::to_owned).collect())
        } else {
            None
        };

        let mut width = header.as_ref().map(Vec::len);
        let mut rows: Vec<f64> = Vec::new();
        let mut steps = 0;
        for (i, record) in rdr.records().enumerate() {
            let record = record?;
            let row = i + 1;
            let expected = *width.get_or_insert(record.len());
            if record.len() != expected {
                return Err(Error::Ragged {
                    row,
                    found: record.len(),
                    expected,
                });
            }
            for (j, cell) in record.iter().enumerate() {
                let x: f64 = cell.parse().map_err(|_| Error::ParseCell {
                    row,
                    column: j + 1,
                    value: cell.to_owned(),
                })?;
                rows.push(x);
            }
            steps += 1;
        }
        if steps < 2 {
            return Err(Error::Shape(format!("T < 2: csv has {steps} data rows")));
        }
        let v = width.unwrap_or(0);
        let by_time = Array2::from_shape_vec((steps, v), rows)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let names = header.unwrap_or_else(|| default_names(v));
        Self::new(by_time.reversed_axes().as_standard_layout().into_owned(), names)
    }

    /// Writes the series in the same layout [`Dataset::load_csv`] reads, with a header.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut wtr = csv::Writer::from_writer(std::io::BufWriter::new(file));
        wtr.write_record(&self.variate_names)?;
        for column in self.values.columns() {
            // `{}` on f64 prints the shortest string that parses back to the same value.
            wtr.write_record(column.iter().map(|x| format!("{x}")))?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn default_names(v: usize) -> Vec<String> {
    (0..v).map(|i| format!("v{i}")).collect()
}

/// Per-variate statistics used by [`standardize`].
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
    /// Variates whose std was floored at [`STD_FLOOR`].
    pub floored: Vec<usize>,
}

impl NormStats {
    /// Maps a standardized dataset back to the original scale.
    pub fn invert(&self, d: &Dataset) -> Dataset {
        let mut values = d.values.clone();
        for (mut row, (&m, &s)) in values
            .outer_iter_mut()
            .zip(self.mean.iter().zip(self.std.iter()))
        {
            row.mapv_inplace(|x| x * s + m);
        }
        Dataset {
            values,
            ..d.clone()
        }
    }
}

/// Z-scores every variate with its whole-series mean and population std.
///
/// Constant variates get std `1e-8` (so they map to all zeros) and a warning.
pub fn standardize(d: &Dataset) -> (Dataset, NormStats) {
    let t = d.num_steps() as f64;
    let mut values = d.values.clone();
    let mut mean = Array1::zeros(d.num_variates());
    let mut std = Array1::zeros(d.num_variates());
    let mut floored = Vec::new();
    for (v, mut row) in values.outer_iter_mut().enumerate() {
        let m = row.sum() / t;
        let var = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / t;
        let mut s = var.sqrt();
        if s < STD_FLOOR {
            log::warn!(
                "variate {} ({}) is constant; std floored at {STD_FLOOR}",
                v,
                d.variate_names[v]
            );
            s = STD_FLOOR;
            floored.push(v);
        }
        row.mapv_inplace(|x| (x - m) / s);
        mean[v] = m;
        std[v] = s;
    }
    let out = Dataset {
        values,
        ..d.clone()
    };
    (out, NormStats { mean, std, floored })
}

/// Stride-1 context windows and next-step targets.
///
/// `contexts` is stored lag-major as `C x N x V` so each lag is a contiguous
/// `N x V` matrix; lag index 0 is the oldest step of every window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    contexts: Array3<f64>,
    targets: Array2<f64>,
}

impl WindowSet {
    /// Windows over a raw `V x T` array (no `V >= 2` requirement).
    pub fn from_values(values: ArrayView2<'_, f64>, context: usize) -> Result<Self> {
        let (v, t) = values.dim();
        if context == 0 {
            return Err(Error::Config("context length must be at least 1".into()));
        }
        if t <= context {
            return Err(Error::Shape(format!(
                "series of length T={t} is too short for context C={context} (need T >= C+1)"
            )));
        }
        let n = t - context;
        let mut contexts = Array3::zeros((context, n, v));
        for c in 0..context {
            contexts
                .index_axis_mut(Axis(0), c)
                .assign(&values.slice(s![.., c..c + n]).t());
        }
        let targets = values.slice(s![.., context..]).t().to_owned();
        Ok(Self { contexts, targets })
    }

    /// Pools the windows of several recordings with the same variates.
    pub fn concat(sets: &[WindowSet]) -> Result<Self> {
        let first = sets
            .first()
            .ok_or_else(|| Error::Shape("no window sets to concatenate".into()))?;
        if sets.iter().any(|w| {
            w.context_len() != first.context_len() || w.num_variates() != first.num_variates()
        }) {
            return Err(Error::Shape(
                "window sets differ in context length or variate count".into(),
            ));
        }
        let ctx: Vec<_> = sets.iter().map(|w| w.contexts.view()).collect();
        let tgt: Vec<_> = sets.iter().map(|w| w.targets.view()).collect();
        Ok(Self {
            contexts: ndarray::concatenate(Axis(1), &ctx)
                .map_err(|e| Error::Shape(e.to_string()))?,
            targets: ndarray::concatenate(Axis(0), &tgt)
                .map_err(|e| Error::Shape(e.to_string()))?,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn context_len(&self) -> usize {
        self.contexts.len_of(Axis(0))
    }

    pub fn num_variates(&self) -> usize {
        self.targets.ncols()
    }

    /// All windows at lag index `c` (0 = oldest) as an `N x V` matrix.
    pub fn lag(&self, c: usize) -> ArrayView2<'_, f64> {
        self.contexts.index_axis(Axis(0), c)
    }

    /// `N x V` matrix of next-step targets.
    pub fn targets(&self) -> ArrayView2<'_, f64> {
        self.targets.view()
    }

    /// Window `i` as a `V x C` matrix, oldest lag first.
    pub fn window(&self, i: usize) -> Array2<f64> {
        self.contexts.slice(s![.., i, ..]).t().to_owned()
    }

    /// Subset of windows, in the given order.
    pub fn select(&self, indices: &[usize]) -> WindowSet {
        Self {
            contexts: self.contexts.select(Axis(1), indices),
            targets: self.targets.select(Axis(0), indices),
        }
    }
}

/// Stride-1 windows of context `C` over a dataset; `T - C` windows.
pub fn make_windows(d: &Dataset, context: usize) -> Result<WindowSet> {
    WindowSet::from_values(d.values(), context)
}
