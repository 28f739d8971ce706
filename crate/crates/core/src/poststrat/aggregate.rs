use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CellPredictions, Compensated, PoststratError, Weighting};
use crate::frame::Frame;

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    /// One level label per axis.
    pub levels: Vec<String>,
    pub population: u64,
    pub expected_voters: Option<f64>,
    pub expected_votes: Option<f64>,
    pub turnout_rate: Option<f64>,
    pub vote_share: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateTable {
    pub axes: Vec<String>,
    pub weighting: Weighting,
    pub rows: Vec<AggregateRow>,
}

impl AggregateTable {
    pub fn row(&self, levels: &[&str]) -> Option<&AggregateRow> {
        self.rows
            .iter()
            .find(|r| r.levels.iter().map(String::as_str).eq(levels.iter().copied()))
    }
}

#[derive(Default, Clone, Copy)]
struct Sums {
    population: u64,
    pop_f: Compensated,
    voters: Compensated,
    pop_alpha: Compensated,
    votes: Compensated,
}

fn axis_positions(frame: &Frame, by: &[String]) -> Result<Vec<usize>, PoststratError> {
    by.iter()
        .map(|a| frame.factor_index(a).map_err(|_| PoststratError::UnknownAxis(a.clone())))
        .collect()
}

fn accumulate(
    preds: &CellPredictions,
    frame: &Frame,
    positions: &[usize],
    mut include: impl FnMut(&[usize]) -> bool,
) -> BTreeMap<Vec<usize>, Sums> {
    let mut groups: BTreeMap<Vec<usize>, Sums> = BTreeMap::new();
    for (i, cell) in frame.cells().iter().enumerate() {
        if !include(&cell.key) {
            continue;
        }
        let key: Vec<usize> = positions.iter().map(|&p| cell.key[p]).collect();
        let s = groups.entry(key).or_default();
        let n = cell.population as f64;
        s.population += cell.population;
        s.pop_f.add(n);
        if let Some(phi) = &preds.turnout {
            s.voters.add(n * phi[i]);
        }
        if let Some(alpha) = &preds.preference {
            s.pop_alpha.add(n * alpha[i]);
        }
        if let (Some(phi), Some(alpha)) = (&preds.turnout, &preds.preference) {
            s.votes.add(n * phi[i] * alpha[i]);
        }
    }
    groups
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

fn share(s: &Sums, preds: &CellPredictions, weighting: Weighting) -> Option<f64> {
    preds.preference.as_ref()?;
    match weighting {
        Weighting::Population => ratio(s.pop_alpha.value(), s.pop_f.value()),
        Weighting::Voters => {
            preds.turnout.as_ref()?;
            ratio(s.votes.value(), s.voters.value())
        }
    }
}

fn labels(frame: &Frame, positions: &[usize], key: &[usize]) -> Vec<String> {
    positions
        .iter()
        .zip(key)
        .map(|(&p, &l)| frame.factors()[p].levels[l].clone())
        .collect()
}

/// Groups cells by the levels of `by` (empty means one national row). Rows
/// follow level order; level combinations with no cells are omitted.
pub fn aggregate(
    preds: &CellPredictions,
    frame: &Frame,
    by: &[String],
    weighting: Weighting,
) -> Result<AggregateTable, PoststratError> {
    preds.check_frame(frame)?;
    let positions = axis_positions(frame, by)?;
    if weighting == Weighting::Voters && preds.preference.is_some() && preds.turnout.is_none() {
        return Err(PoststratError::MissingPredictions("turnout"));
    }
    let groups = accumulate(preds, frame, &positions, |_| true);
    let rows = groups
        .into_iter()
        .map(|(key, s)| AggregateRow {
            levels: labels(frame, &positions, &key),
            population: s.population,
            expected_voters: preds.turnout.as_ref().map(|_| s.voters.value()),
            expected_votes: preds.expected_votes.as_ref().map(|_| s.votes.value()),
            turnout_rate: preds
                .turnout
                .as_ref()
                .and_then(|_| ratio(s.voters.value(), s.pop_f.value())),
            vote_share: share(&s, preds, weighting),
        })
        .collect();
    Ok(AggregateTable {
        axes: by.to_vec(),
        weighting,
        rows,
    })
}

/// Which factor and levels encode gender.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenderSpec {
    pub factor: String,
    pub male: String,
    pub female: String,
}

impl Default for GenderSpec {
    fn default() -> Self {
        GenderSpec {
            factor: "gender".into(),
            male: "Male".into(),
            female: "Female".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GapRow {
    pub totals: AggregateRow,
    pub male_share: Option<f64>,
    pub female_share: Option<f64>,
    /// Male share minus female share, both among voters.
    pub gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GapTable {
    pub axes: Vec<String>,
    pub rows: Vec<GapRow>,
}

/// Voter-weighted male share minus female share within each row of `by`.
pub fn gender_gap(
    preds: &CellPredictions,
    frame: &Frame,
    by: &[String],
    gender: &GenderSpec,
) -> Result<GapTable, PoststratError> {
    preds.check_frame(frame)?;
    let gpos = frame
        .factor_index(&gender.factor)
        .map_err(|_| PoststratError::Gender(format!("frame has no `{}` factor", gender.factor)))?;
    if by.contains(&gender.factor) {
        return Err(PoststratError::Gender("axes must not include the gender factor".into()));
    }
    let level = |name: &str| {
        frame.factors()[gpos].level_index(name).ok_or_else(|| {
            PoststratError::Gender(format!("`{}` has no level `{name}`", gender.factor))
        })
    };
    let (male, female) = (level(&gender.male)?, level(&gender.female)?);
    if preds.turnout.is_none() {
        return Err(PoststratError::MissingPredictions("turnout"));
    }
    if preds.preference.is_none() {
        return Err(PoststratError::MissingPredictions("preference"));
    }
    let totals = aggregate(preds, frame, by, Weighting::Voters)?;
    let positions = axis_positions(frame, by)?;
    let men = accumulate(preds, frame, &positions, |k| k[gpos] == male);
    let women = accumulate(preds, frame, &positions, |k| k[gpos] == female);
    let all = accumulate(preds, frame, &positions, |_| true);

    let rows = all
        .keys()
        .zip(totals.rows)
        .map(|(key, totals)| {
            let m = men.get(key).and_then(|s| ratio(s.votes.value(), s.voters.value()));
            let f = women.get(key).and_then(|s| ratio(s.votes.value(), s.voters.value()));
            GapRow {
                totals,
                male_share: m,
                female_share: f,
                gap: m.zip(f).map(|(m, f)| m - f),
            }
        })
        .collect();
    Ok(GapTable {
        axes: by.to_vec(),
        rows,
    })
}
