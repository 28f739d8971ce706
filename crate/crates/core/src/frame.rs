//! Demographic factors and the poststratification cell table.
//!
//! A [`Frame`] stores only the level combinations that were actually supplied;
//! missing combinations are absent rather than zero-filled. Group enumeration
//! for interaction terms, on the other hand, always spans the full cross
//! product of the participating factors.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Column holding the cell population in frame files.
pub const POPULATION_COLUMN: &str = "population";

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("duplicate factor name `{0}`")]
    DuplicateFactor(String),
    #[error("factor `{factor}` has duplicate level `{level}`")]
    DuplicateLevel { factor: String, level: String },
    #[error("factor `{0}` needs at least two levels")]
    TooFewLevels(String),
    #[error("row {row}: unknown level `{level}` for factor `{factor}`")]
    UnknownLevel { row: usize, factor: String, level: String },
    #[error("row {row}: negative population {value}")]
    NegativePopulation { row: usize, value: f64 },
    #[error("row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("unknown factor `{0}`")]
    UnknownFactor(String),
    #[error("empty term")]
    EmptyTerm,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("factor config: {0}")]
    Config(String),
}

/// A categorical variable with a fixed, ordered set of level labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub name: String,
    pub levels: Vec<String>,
}

impl FactorSpec {
    pub fn new(name: impl Into<String>, levels: Vec<String>) -> Result<Self, FrameError> {
        let name = name.into();
        if levels.len() < 2 {
            return Err(FrameError::TooFewLevels(name));
        }
        let mut seen = HashSet::with_capacity(levels.len());
        for level in &levels {
            if !seen.insert(level.as_str()) {
                return Err(FrameError::DuplicateLevel {
                    factor: name,
                    level: level.clone(),
                });
            }
        }
        Ok(FactorSpec { name, levels })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn level_index(&self, label: &str) -> Option<usize> {
        self.levels.iter().position(|l| l == label)
    }
}

/// Factor entry as it appears in a configuration document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawFactor {
    pub name: String,
    #[serde(default)]
    pub levels: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct FactorDocument {
    factors: Vec<RawFactor>,
}

/// Validates raw factor entries, keeping config order and level order.
pub fn load_factor_specs(raw: &[RawFactor]) -> Result<Vec<FactorSpec>, FrameError> {
    let mut names = HashSet::new();
    let mut specs = Vec::with_capacity(raw.len());
    for entry in raw {
        if !names.insert(entry.name.as_str()) {
            return Err(FrameError::DuplicateFactor(entry.name.clone()));
        }
        specs.push(FactorSpec::new(entry.name.clone(), entry.levels.clone())?);
    }
    Ok(specs)
}

/// Parses a TOML document with a `[[factors]]` array of `{ name, levels }` tables.
pub fn parse_factor_config(text: &str) -> Result<Vec<FactorSpec>, FrameError> {
    let doc: FactorDocument =
        toml::from_str(text).map_err(|e| FrameError::Config(e.message().to_string()))?;
    load_factor_specs(&doc.factors)
}

/// One demographic cell: a level index per factor and its population `N_g`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cell {
    pub key: Vec<usize>,
    pub population: u64,
}

/// Input record for [`build_frame`]: one label per factor plus a population.
#[derive(Clone, Debug)]
pub struct FrameRow {
    pub labels: Vec<String>,
    pub population: f64,
}

#[derive(Clone, Debug)]
pub struct Frame {
    factors: Vec<FactorSpec>,
    cells: Vec<Cell>,
    index: HashMap<Vec<usize>, usize>,
}

impl PartialEq for Frame {
    fn eq(&self, other: &Self) -> bool {
        self.factors == other.factors && self.cells == other.cells
    }
}

/// Rounds a census weight to a whole head count, ties to even.
pub fn round_population(value: f64) -> u64 {
    value.round_ties_even() as u64
}

/// Builds the cell table. Duplicate keys have their populations summed; cells
/// are ordered lexicographically by level index.
pub fn build_frame(specs: &[FactorSpec], rows: &[FrameRow]) -> Result<Frame, FrameError> {
    let mut builder = FrameBuilder::new(specs.to_vec());
    for (i, row) in rows.iter().enumerate() {
        builder.push(i + 1, &row.labels, row.population)?;
    }
    Ok(builder.finish())
}

struct FrameBuilder {
    factors: Vec<FactorSpec>,
    lookup: Vec<HashMap<String, usize>>,
    cells: Vec<Cell>,
    index: HashMap<Vec<usize>, usize>,
}

impl FrameBuilder {
    fn new(factors: Vec<FactorSpec>) -> Self {
        let lookup = factors
            .iter()
            .map(|f| {
                f.levels
                    .iter()
                    .enumerate()
                    .map(|(i, l)| (l.clone(), i))
                    .collect()
            })
            .collect();
        FrameBuilder {
            factors,
            lookup,
            cells: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn push<S: AsRef<str>>(
        &mut self,
        row: usize,
        labels: &[S],
        population: f64,
    ) -> Result<(), FrameError> {
        if labels.len() != self.factors.len() {
            return Err(FrameError::MalformedRow {
                row,
                reason: format!(
                    "expected {} factor labels, found {}",
                    self.factors.len(),
                    labels.len()
                ),
            });
        }
        if !population.is_finite() {
            return Err(FrameError::MalformedRow {
                row,
                reason: format!("population `{population}` is not finite"),
            });
        }
        if population < 0.0 {
            return Err(FrameError::NegativePopulation {
                row,
                value: population,
            });
        }
        let mut key = Vec::with_capacity(labels.len());
        for ((label, factor), lookup) in labels.iter().zip(&self.factors).zip(&self.lookup) {
            let label = label.as_ref();
            let idx = lookup
                .get(label)
                .copied()
                .ok_or_else(|| FrameError::UnknownLevel {
                    row,
                    factor: factor.name.clone(),
                    level: label.to_string(),
                })?;
            key.push(idx);
        }
        let population = round_population(population);
        match self.index.get(&key) {
            Some(&pos) => self.cells[pos].population += population,
            None => {
                self.index.insert(key.clone(), self.cells.len());
                self.cells.push(Cell { key, population });
            }
        }
        Ok(())
    }

    /// Cells come out in lexicographic key order whatever the input order.
    fn finish(mut self) -> Frame {
        self.cells.sort_by(|a, b| a.key.cmp(&b.key));
        let index = self.cells.iter().enumerate().map(|(i, c)| (c.key.clone(), i)).collect();
        Frame {
            factors: self.factors,
            cells: self.cells,
            index,
        }
    }
}

impl Frame {
    /// Every combination of levels, in lexicographic level order, with the
    /// population supplied by `population(key)`.
    pub fn full_cross(factors: Vec<FactorSpec>, mut population: impl FnMut(&[usize]) -> u64) -> Frame {
        let mut builder = FrameBuilder::new(factors);
        let radices: Vec<usize> = builder.factors.iter().map(FactorSpec::len).collect();
        for key in CrossProduct::new(&radices) {
            let n = population(&key);
            builder.index.insert(key.clone(), builder.cells.len());
            builder.cells.push(Cell { key, population: n });
        }
        builder.finish()
    }

    pub fn factors(&self) -> &[FactorSpec] {
        &self.factors
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn factor_index(&self, name: &str) -> Result<usize, FrameError> {
        self.factors
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| FrameError::UnknownFactor(name.to_string()))
    }

    pub fn position(&self, key: &[usize]) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn total_population(&self) -> u64 {
        self.cells.iter().map(|c| c.population).sum()
    }

    pub fn labels(&self, cell: usize) -> Vec<&str> {
        self.cells[cell]
            .key
            .iter()
            .zip(&self.factors)
            .map(|(&l, f)| f.levels[l].as_str())
            .collect()
    }

    /// Stable digest of factor definitions and cell keys (not populations).
    pub fn fingerprint(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for f in &self.factors {
            h.update(f.name.as_bytes());
            h.update([0u8]);
            for l in &f.levels {
                h.update(l.as_bytes());
                h.update([1u8]);
            }
        }
        for c in &self.cells {
            for &k in &c.key {
                h.update((k as u64).to_le_bytes());
            }
        }
        let out = h.finalize();
        u64::from_le_bytes(out[..8].try_into().expect("digest has 32 bytes"))
    }

    /// Reads a frame from delimited text. The header must name every factor in
    /// `specs` and a `population` column, in any order.
    pub fn read_csv<R: Read>(specs: &[FactorSpec], reader: R) -> Result<Frame, FrameError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr.headers()?.clone();
        let columns = header_positions(&header)?;
        let pop_col = *columns
            .get(POPULATION_COLUMN)
            .ok_or_else(|| FrameError::MalformedHeader("missing `population` column".into()))?;
        let mut factor_cols = Vec::with_capacity(specs.len());
        for spec in specs {
            let col = columns.get(spec.name.as_str()).ok_or_else(|| {
                FrameError::MalformedHeader(format!("missing factor column `{}`", spec.name))
            })?;
            factor_cols.push(*col);
        }
        if header.len() != specs.len() + 1 {
            let extra: Vec<&str> = header
                .iter()
                .filter(|h| *h != POPULATION_COLUMN && !specs.iter().any(|s| s.name == *h))
                .collect();
            return Err(FrameError::MalformedHeader(format!(
                "unexpected columns: {}",
                extra.join(", ")
            )));
        }

        let mut builder = FrameBuilder::new(specs.to_vec());
        for (i, record) in rdr.records().enumerate() {
            let row = i + 1;
            let record = record?;
            let labels: Vec<&str> = factor_cols
                .iter()
                .map(|&col| record.get(col).unwrap_or(""))
                .collect();
            let raw = record.get(pop_col).unwrap_or("");
            let population: f64 = raw.parse().map_err(|_| FrameError::MalformedRow {
                row,
                reason: format!("population `{raw}` is not a number"),
            })?;
            builder.push(row, &labels, population)?;
        }
        Ok(builder.finish())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), FrameError> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.factors.iter().map(|f| f.name.as_str()).collect();
        header.push(POPULATION_COLUMN);
        wtr.write_record(&header)?;
        for (i, cell) in self.cells.iter().enumerate() {
            let mut record = self.labels(i);
            let pop = cell.population.to_string();
            record.push(&pop);
            wtr.write_record(&record)?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

pub(crate) fn header_positions(
    header: &csv::StringRecord,
) -> Result<BTreeMap<&str, usize>, FrameError> {
    let mut columns = BTreeMap::new();
    for (i, h) in header.iter().enumerate() {
        if columns.insert(h, i).is_some() {
            return Err(FrameError::MalformedHeader(format!("duplicate column `{h}`")));
        }
    }
    Ok(columns)
}

/// Mixed-radix iterator over all keys, last position varying fastest.
pub struct CrossProduct {
    radices: Vec<usize>,
    next: Option<Vec<usize>>,
}

impl CrossProduct {
    pub fn new(radices: &[usize]) -> Self {
        let next = if radices.contains(&0) {
            None
        } else {
            Some(vec![0; radices.len()])
        };
        CrossProduct {
            radices: radices.to_vec(),
            next,
        }
    }
}

impl Iterator for CrossProduct {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let current = self.next.take()?;
        let mut succ = current.clone();
        let mut pos = succ.len();
        loop {
            if pos == 0 {
                break;
            }
            pos -= 1;
            succ[pos] += 1;
            if succ[pos] < self.radices[pos] {
                self.next = Some(succ);
                break;
            }
            succ[pos] = 0;
        }
        Some(current)
    }
}

/// Lexicographic index of `levels` among all combinations with the given radices.
pub fn mixed_radix_index(levels: impl IntoIterator<Item = usize>, radices: &[usize]) -> usize {
    levels
        .into_iter()
        .zip(radices)
        .fold(0, |acc, (l, &r)| acc * r + l)
}

/// Assignment of frame cells to the groups of an interaction term.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupMap {
    pub term: Vec<String>,
    pub cardinality: usize,
    pub assignment: Vec<usize>,
}

/// Resolves factor names to positions in `factors`.
pub fn resolve_term(factors: &[FactorSpec], term: &[String]) -> Result<Vec<usize>, FrameError> {
    if term.is_empty() {
        return Err(FrameError::EmptyTerm);
    }
    term.iter()
        .map(|name| {
            factors
                .iter()
                .position(|f| &f.name == name)
                .ok_or_else(|| FrameError::UnknownFactor(name.clone()))
        })
        .collect()
}

pub fn group_map(frame: &Frame, term: &[String]) -> Result<GroupMap, FrameError> {
    let positions = resolve_term(&frame.factors, term)?;
    let radices: Vec<usize> = positions.iter().map(|&p| frame.factors[p].len()).collect();
    let cardinality = radices.iter().product();
    let assignment = frame
        .cells
        .iter()
        .map(|c| mixed_radix_index(positions.iter().map(|&p| c.key[p]), &radices))
        .collect();
    Ok(GroupMap {
        term: term.to_vec(),
        cardinality,
        assignment,
    })
}
