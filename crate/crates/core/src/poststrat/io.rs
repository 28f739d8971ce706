//! Delimited-text readers and writers for predictions, targets and tables.

use std::io::{Read, Write};

use super::{AggregateTable, CalibrationResult, CellPredictions, GapTable, PoststratError, StateTarget};
use crate::frame::Frame;

const PREDICTION_COLUMNS: [&str; 5] = [
    "population",
    "turnout",
    "preference",
    "expected_voters",
    "expected_votes",
];

const TABLE_COLUMNS: [&str; 5] = [
    "population",
    "expected_voters",
    "expected_votes",
    "turnout_rate",
    "vote_share",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn at(v: &Option<Vec<f64>>, i: usize) -> Option<f64> {
    v.as_ref().map(|v| v[i])
}

fn parse_opt(field: &str, column: &str, line: usize) -> Result<Option<f64>, PoststratError> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|_| PoststratError::Data(format!("line {line}: `{field}` in `{column}` is not a number")))
}

fn column(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h.trim() == name)
}

/// One row per frame cell, in frame order. Absent fields are left empty.
pub fn write_predictions<W: Write>(
    preds: &CellPredictions,
    frame: &Frame,
    writer: W,
) -> Result<(), PoststratError> {
    preds.check_frame(frame)?;
    let mut w = csv::Writer::from_writer(writer);
    let header: Vec<&str> = frame
        .factors()
        .iter()
        .map(|f| f.name.as_str())
        .chain(PREDICTION_COLUMNS)
        .collect();
    w.write_record(&header)?;
    for (i, cell) in frame.cells().iter().enumerate() {
        let mut record: Vec<String> = frame.labels(i).into_iter().map(str::to_string).collect();
        record.push(cell.population.to_string());
        record.push(opt(at(&preds.turnout, i)));
        record.push(opt(at(&preds.preference, i)));
        record.push(opt(at(&preds.expected_voters, i)));
        record.push(opt(at(&preds.expected_votes, i)));
        w.write_record(&record)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads predictions for `frame`. Rows may come in any order but must cover
/// every cell exactly once; expected counts are recomputed from the frame.
pub fn read_predictions<R: Read>(frame: &Frame, reader: R) -> Result<CellPredictions, PoststratError> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    let factor_cols: Vec<usize> = frame
        .factors()
        .iter()
        .map(|f| {
            column(&headers, &f.name)
                .ok_or_else(|| PoststratError::Data(format!("predictions lack column `{}`", f.name)))
        })
        .collect::<Result<_, _>>()?;
    let turnout_col = column(&headers, "turnout");
    let preference_col = column(&headers, "preference");

    let n = frame.len();
    let mut turnout: Vec<Option<f64>> = vec![None; n];
    let mut preference: Vec<Option<f64>> = vec![None; n];
    let mut seen = vec![false; n];
    for (row, record) in r.records().enumerate() {
        let record = record?;
        let line = row + 2;
        let mut key = Vec::with_capacity(factor_cols.len());
        for (spec, &c) in frame.factors().iter().zip(&factor_cols) {
            let label = record.get(c).unwrap_or("").trim();
            key.push(spec.level_index(label).ok_or_else(|| {
                PoststratError::Data(format!("line {line}: `{label}` is not a level of `{}`", spec.name))
            })?);
        }
        let pos = frame
            .position(&key)
            .ok_or_else(|| PoststratError::Data(format!("line {line}: cell is not in the frame")))?;
        if std::mem::replace(&mut seen[pos], true) {
            return Err(PoststratError::Data(format!("line {line}: duplicate cell")));
        }
        if let Some(c) = turnout_col {
            turnout[pos] = parse_opt(record.get(c).unwrap_or(""), "turnout", line)?;
        }
        if let Some(c) = preference_col {
            preference[pos] = parse_opt(record.get(c).unwrap_or(""), "preference", line)?;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(PoststratError::FrameMismatch);
    }
    let complete = |v: Vec<Option<f64>>, name: &str| -> Result<Option<Vec<f64>>, PoststratError> {
        if v.iter().all(Option::is_none) {
            return Ok(None);
        }
        v.into_iter()
            .map(|x| x.ok_or_else(|| PoststratError::Data(format!("`{name}` is missing for some cells"))))
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    };
    let turnout = complete(turnout, "turnout")?;
    let preference = complete(preference, "preference")?;
    CellPredictions::new(frame, turnout, preference)
}

/// Reads `state, two_party_share, turnout_rate`; either value may be empty.
pub fn read_targets<R: Read>(reader: R) -> Result<Vec<StateTarget>, PoststratError> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    let need = |name: &str| {
        column(&headers, name).ok_or_else(|| PoststratError::Targets(format!("missing column `{name}`")))
    };
    let (state, share, turnout) = (need("state")?, need("two_party_share")?, need("turnout_rate")?);
    let mut out = Vec::new();
    for (row, record) in r.records().enumerate() {
        let record = record?;
        let line = row + 2;
        out.push(StateTarget {
            state: record.get(state).unwrap_or("").trim().to_string(),
            vote_share: parse_opt(record.get(share).unwrap_or(""), "two_party_share", line)?,
            turnout: parse_opt(record.get(turnout).unwrap_or(""), "turnout_rate", line)?,
        });
    }
    Ok(out)
}

pub fn write_aggregate<W: Write>(table: &AggregateTable, writer: W) -> Result<(), PoststratError> {
    let mut w = csv::Writer::from_writer(writer);
    let header: Vec<&str> = table
        .axes
        .iter()
        .map(String::as_str)
        .chain(TABLE_COLUMNS)
        .collect();
    w.write_record(&header)?;
    for row in &table.rows {
        let mut record = row.levels.clone();
        record.push(row.population.to_string());
        record.push(opt(row.expected_voters));
        record.push(opt(row.expected_votes));
        record.push(opt(row.turnout_rate));
        record.push(opt(row.vote_share));
        w.write_record(&record)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_gap<W: Write>(table: &GapTable, writer: W) -> Result<(), PoststratError> {
    let mut w = csv::Writer::from_writer(writer);
    let header: Vec<&str> = table
        .axes
        .iter()
        .map(String::as_str)
        .chain(TABLE_COLUMNS)
        .chain(["male_share", "female_share", "gap"])
        .collect();
    w.write_record(&header)?;
    for row in &table.rows {
        let t = &row.totals;
        let mut record = t.levels.clone();
        record.push(t.population.to_string());
        record.push(opt(t.expected_voters));
        record.push(opt(t.expected_votes));
        record.push(opt(t.turnout_rate));
        record.push(opt(t.vote_share));
        record.push(opt(row.male_share));
        record.push(opt(row.female_share));
        record.push(opt(row.gap));
        w.write_record(&record)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_calibration<W: Write>(result: &CalibrationResult, writer: W) -> Result<(), PoststratError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "state",
        "turnout_shift",
        "turnout_residual",
        "preference_shift",
        "preference_residual",
    ])?;
    for s in &result.states {
        w.write_record([
            s.state.clone(),
            opt(s.turnout_shift),
            opt(s.turnout_residual),
            opt(s.preference_shift),
            opt(s.preference_residual),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
