//! Compiles a [`Formula`] against factor definitions into a parameter layout,
//! and turns tabular cells into the indexed form the likelihood consumes.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::formula::Formula;
use crate::frame::{header_positions, mixed_radix_index, FactorSpec, Frame};

/// Column names for binomial outcomes in dataset files.
pub const SUCCESSES_COLUMN: &str = "successes";
pub const TRIALS_COLUMN: &str = "trials";

/// A fixed covariate derived from the level of a factor, e.g. `female` coded
/// `+0.5` / `-0.5` from `gender`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub factor: String,
    pub values: BTreeMap<String, f64>,
    /// Subtract 0.5 at ingest when centering is enabled for the run.
    #[serde(default)]
    pub center: bool,
}

#[derive(Clone, Debug)]
pub struct DesignTerm {
    pub label: String,
    pub factors: Vec<usize>,
    pub radices: Vec<usize>,
    pub cardinality: usize,
}

/// One column of varying effects: the intercept or a slope of one term.
#[derive(Clone, Debug)]
pub struct EffectColumn {
    pub term: usize,
    /// Index into the fixed covariates when this column is a slope.
    pub slope: Option<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug)]
struct FixedCovariate {
    name: String,
    source: Option<(usize, Vec<f64>)>,
    shift: f64,
}

/// Offsets of each parameter block inside the unconstrained vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub mu: Option<usize>,
    pub fixed: usize,
    pub effects: usize,
    pub shares: usize,
    pub scale: usize,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct Design {
    formula: Formula,
    factors: Vec<FactorSpec>,
    terms: Vec<DesignTerm>,
    columns: Vec<EffectColumn>,
    fixed: Vec<FixedCovariate>,
    layout: Layout,
}

impl Design {
    pub fn new(
        formula: &Formula,
        factors: &[FactorSpec],
        covariates: &[CovariateSpec],
        center_covariates: bool,
    ) -> Result<Design, ModelError> {
        let factor_pos = |name: &str| {
            factors
                .iter()
                .position(|f| f.name == name)
                .ok_or_else(|| ModelError::UnknownFactor(name.to_string()))
        };

        let mut fixed = Vec::with_capacity(formula.fixed.len());
        for name in &formula.fixed {
            let spec = covariates.iter().find(|c| &c.name == name);
            let (source, shift) = match spec {
                Some(spec) => {
                    let pos = factor_pos(&spec.factor)?;
                    let mut values = Vec::with_capacity(factors[pos].len());
                    for level in &factors[pos].levels {
                        let v = spec.values.get(level).copied().ok_or_else(|| {
                            ModelError::Covariate(format!(
                                "covariate `{name}` has no value for level `{level}` of `{}`",
                                spec.factor
                            ))
                        })?;
                        values.push(v);
                    }
                    let shift = if spec.center && center_covariates { 0.5 } else { 0.0 };
                    (Some((pos, values)), shift)
                }
                None => (None, 0.0),
            };
            fixed.push(FixedCovariate {
                name: name.clone(),
                source,
                shift,
            });
        }

        let mu = formula.intercept.then_some(0);
        let fixed_start = usize::from(formula.intercept);
        let mut offset = fixed_start + fixed.len();
        let effects_start = offset;
        let mut terms = Vec::with_capacity(formula.varying.len());
        let mut columns = Vec::new();
        for (t, vt) in formula.varying.iter().enumerate() {
            let positions = vt
                .grouping
                .iter()
                .map(|g| factor_pos(g))
                .collect::<Result<Vec<_>, _>>()?;
            let radices: Vec<usize> = positions.iter().map(|&p| factors[p].len()).collect();
            let cardinality = radices.iter().product();
            terms.push(DesignTerm {
                label: vt.label(),
                factors: positions,
                radices,
                cardinality,
            });
            if vt.has_intercept {
                columns.push(EffectColumn { term: t, slope: None, offset, len: cardinality });
                offset += cardinality;
            }
            for slope in &vt.slopes {
                let idx = formula
                    .fixed
                    .iter()
                    .position(|f| f == slope)
                    .ok_or_else(|| ModelError::Covariate(format!("undeclared slope `{slope}`")))?;
                columns.push(EffectColumn { term: t, slope: Some(idx), offset, len: cardinality });
                offset += cardinality;
            }
        }
        let shares = offset;
        let scale = shares + columns.len().saturating_sub(1);
        let layout = Layout {
            mu,
            fixed: fixed_start,
            effects: effects_start,
            shares,
            scale,
            dim: scale + 1,
        };
        Ok(Design {
            formula: formula.clone(),
            factors: factors.to_vec(),
            terms,
            columns,
            fixed,
            layout,
        })
    }

    pub fn formula(&self) -> &Formula {
        &self.formula
    }

    pub fn factors(&self) -> &[FactorSpec] {
        &self.factors
    }

    pub fn terms(&self) -> &[DesignTerm] {
        &self.terms
    }

    pub fn columns(&self) -> &[EffectColumn] {
        &self.columns
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    pub fn n_fixed(&self) -> usize {
        self.fixed.len()
    }

    pub fn fixed_names(&self) -> impl Iterator<Item = &str> {
        self.fixed.iter().map(|f| f.name.as_str())
    }

    /// `|V|`: the number of effect columns.
    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    /// Group index for `term` given a level index per design factor.
    pub fn group_of(&self, term: usize, key: &[usize]) -> usize {
        let t = &self.terms[term];
        mixed_radix_index(t.factors.iter().map(|&p| key[p]), &t.radices)
    }

    /// Covariate value for a full key, if the covariate is level-derived.
    fn derived_covariate(&self, k: usize, key: &[usize]) -> Option<f64> {
        let fc = &self.fixed[k];
        fc.source.as_ref().map(|(pos, values)| values[key[*pos]] - fc.shift)
    }

    /// Indexes every cell of `frame`. All covariates must be level-derived.
    pub fn cells_for_frame(&self, frame: &Frame) -> Result<DesignMatrix, ModelError> {
        let map = self
            .factors
            .iter()
            .map(|f| {
                let pos = frame
                    .factor_index(&f.name)
                    .map_err(|_| ModelError::UnknownFactor(f.name.clone()))?;
                if frame.factors()[pos] != *f {
                    return Err(ModelError::Covariate(format!(
                        "factor `{}` has different levels in frame and model",
                        f.name
                    )));
                }
                Ok(pos)
            })
            .collect::<Result<Vec<_>, _>>()?;
        for fc in &self.fixed {
            if fc.source.is_none() {
                return Err(ModelError::Covariate(format!(
                    "covariate `{}` is not derivable from frame factors",
                    fc.name
                )));
            }
        }
        let mut m = DesignMatrix::with_capacity(self, frame.len());
        let mut key = vec![0; self.factors.len()];
        for cell in frame.cells() {
            for (k, &p) in key.iter_mut().zip(&map) {
                *k = cell.key[p];
            }
            let covs: Vec<f64> = (0..self.fixed.len())
                .map(|j| self.derived_covariate(j, &key).expect("checked above"))
                .collect();
            m.push(self, &key, &covs);
        }
        Ok(m)
    }

    /// Reads a training dataset. Needs a column for every grouping factor,
    /// `successes`, `trials`, and for each fixed covariate either its own
    /// column or the column of the factor it derives from.
    pub fn read_dataset<R: Read>(&self, reader: R) -> Result<Dataset, ModelError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr.headers().map_err(ModelError::from)?.clone();
        let columns = header_positions(&header).map_err(|e| ModelError::Data(e.to_string()))?;
        let col = |name: &str| {
            columns
                .get(name)
                .copied()
                .ok_or_else(|| ModelError::Data(format!("missing column `{name}`")))
        };
        let succ_col = col(SUCCESSES_COLUMN)?;
        let trial_col = col(TRIALS_COLUMN)?;
        let cov_cols: Vec<Option<usize>> =
            self.fixed.iter().map(|f| columns.get(f.name.as_str()).copied()).collect();

        let mut needed = vec![false; self.factors.len()];
        for t in &self.terms {
            for &p in &t.factors {
                needed[p] = true;
            }
        }
        for (fc, c) in self.fixed.iter().zip(&cov_cols) {
            match (c, &fc.source) {
                (Some(_), _) => {}
                (None, Some((p, _))) => needed[*p] = true,
                (None, None) => {
                    return Err(ModelError::Data(format!("missing column `{}`", fc.name)))
                }
            }
        }
        let factor_cols: Vec<Option<usize>> = self
            .factors
            .iter()
            .zip(&needed)
            .map(|(f, &n)| if n { col(&f.name).map(Some) } else { Ok(None) })
            .collect::<Result<_, _>>()?;

        let mut m = DesignMatrix::with_capacity(self, 0);
        let mut successes = Vec::new();
        let mut trials = Vec::new();
        let mut key = vec![0; self.factors.len()];
        let mut covs = vec![0.0; self.fixed.len()];
        for (i, record) in rdr.records().enumerate() {
            let row = i + 1;
            let record = record.map_err(ModelError::from)?;
            let field = |c: usize| record.get(c).unwrap_or("");
            for ((k, f), c) in key.iter_mut().zip(&self.factors).zip(&factor_cols) {
                if let Some(c) = c {
                    let label = field(*c);
                    *k = f.level_index(label).ok_or_else(|| {
                        ModelError::Data(format!(
                            "row {row}: unknown level `{label}` for factor `{}`",
                            f.name
                        ))
                    })?;
                }
            }
            for (j, c) in cov_cols.iter().enumerate() {
                covs[j] = match c {
                    Some(c) => {
                        let raw = field(*c);
                        let v: f64 = raw.parse().map_err(|_| {
                            ModelError::Data(format!("row {row}: covariate `{raw}` is not a number"))
                        })?;
                        if !v.is_finite() {
                            return Err(ModelError::Data(format!("row {row}: non-finite covariate")));
                        }
                        v - self.fixed[j].shift
                    }
                    None => self.derived_covariate(j, &key).expect("source checked"),
                };
            }
            let count = |c: usize, what: &str| -> Result<u64, ModelError> {
                let raw = field(c);
                raw.parse::<u64>().map_err(|_| {
                    ModelError::Data(format!("row {row}: {what} `{raw}` is not a nonnegative integer"))
                })
            };
            let s = count(succ_col, SUCCESSES_COLUMN)?;
            let t = count(trial_col, TRIALS_COLUMN)?;
            if s > t {
                return Err(ModelError::Data(format!(
                    "row {row}: successes {s} exceed trials {t}"
                )));
            }
            m.push(self, &key, &covs);
            successes.push(s);
            trials.push(t);
        }
        Dataset::new(self, m, successes, trials)
    }
}

/// Cells in indexed form: a group per term and a value per fixed covariate.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrix {
    n: usize,
    /// Term-major group indices.
    groups: Vec<Vec<u32>>,
    /// Covariate-major values.
    covariates: Vec<Vec<f64>>,
}

impl DesignMatrix {
    pub fn with_capacity(design: &Design, n: usize) -> Self {
        DesignMatrix {
            n: 0,
            groups: vec![Vec::with_capacity(n); design.terms.len()],
            covariates: vec![Vec::with_capacity(n); design.n_fixed()],
        }
    }

    /// Appends a cell from a level index per design factor.
    pub fn push(&mut self, design: &Design, key: &[usize], covariates: &[f64]) {
        for (t, groups) in self.groups.iter_mut().enumerate() {
            groups.push(design.group_of(t, key) as u32);
        }
        for (col, &v) in self.covariates.iter_mut().zip(covariates) {
            col.push(v);
        }
        self.n += 1;
    }

    /// Builds from raw per-term group indices and per-covariate values.
    pub fn from_parts(
        design: &Design,
        groups: Vec<Vec<usize>>,
        covariates: Vec<Vec<f64>>,
    ) -> Result<Self, ModelError> {
        if groups.len() != design.terms.len() || covariates.len() != design.n_fixed() {
            return Err(ModelError::Dimension {
                expected: design.terms.len() + design.n_fixed(),
                found: groups.len() + covariates.len(),
            });
        }
        let n = groups
            .first()
            .map(Vec::len)
            .or_else(|| covariates.first().map(Vec::len))
            .unwrap_or(0);
        let mut out = Vec::with_capacity(groups.len());
        for (t, g) in groups.into_iter().enumerate() {
            if g.len() != n {
                return Err(ModelError::Dimension { expected: n, found: g.len() });
            }
            let card = design.terms[t].cardinality;
            if let Some(&bad) = g.iter().find(|&&x| x >= card) {
                return Err(ModelError::InvalidGroup { term: t, index: bad, cardinality: card });
            }
            out.push(g.into_iter().map(|x| x as u32).collect());
        }
        for c in &covariates {
            if c.len() != n {
                return Err(ModelError::Dimension { expected: n, found: c.len() });
            }
        }
        Ok(DesignMatrix { n, groups: out, covariates })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn n_terms(&self) -> usize {
        self.groups.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.len()
    }

    #[inline]
    pub fn group(&self, term: usize, cell: usize) -> usize {
        self.groups[term][cell] as usize
    }

    #[inline]
    pub fn covariate(&self, k: usize, cell: usize) -> f64 {
        self.covariates[k][cell]
    }

    pub fn assignments(&self, cell: usize) -> Vec<usize> {
        self.groups.iter().map(|g| g[cell] as usize).collect()
    }

    pub fn covariates_of(&self, cell: usize) -> Vec<f64> {
        self.covariates.iter().map(|c| c[cell]).collect()
    }
}

/// Binomial training cells: `successes` out of `trials` per design row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub cells: DesignMatrix,
    pub successes: Vec<u64>,
    pub trials: Vec<u64>,
}

impl Dataset {
    pub fn new(
        design: &Design,
        cells: DesignMatrix,
        successes: Vec<u64>,
        trials: Vec<u64>,
    ) -> Result<Dataset, ModelError> {
        if cells.groups.len() != design.terms.len() || cells.covariates.len() != design.n_fixed() {
            return Err(ModelError::Dimension {
                expected: design.terms.len(),
                found: cells.groups.len(),
            });
        }
        if successes.len() != cells.len() || trials.len() != cells.len() {
            return Err(ModelError::Dimension {
                expected: cells.len(),
                found: successes.len().min(trials.len()),
            });
        }
        if let Some(i) = successes.iter().zip(&trials).position(|(s, t)| s > t) {
            return Err(ModelError::Data(format!(
                "cell {i}: successes {} exceed trials {}",
                successes[i], trials[i]
            )));
        }
        Ok(Dataset { cells, successes, trials })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn total_trials(&self) -> u64 {
        self.trials.iter().sum()
    }

    pub fn total_successes(&self) -> u64 {
        self.successes.iter().sum()
    }

    /// Per term, which groups have at least one trial.
    pub fn observed_groups(&self, design: &Design) -> Vec<Vec<bool>> {
        design
            .terms
            .iter()
            .enumerate()
            .map(|(t, term)| {
                let mut seen = vec![false; term.cardinality];
                for i in 0..self.len() {
                    if self.trials[i] > 0 {
                        seen[self.cells.group(t, i)] = true;
                    }
                }
                seen
            })
            .collect()
    }
}
