//! Per-state additive logit shifts matching known turnout and vote share.
//!
//! Turnout is solved first because the vote-share target is weighted by the
//! (calibrated) expected voters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CellPredictions, Compensated, PoststratError};
use crate::frame::Frame;
use crate::model::inv_logit;
use crate::model::simplex::logit;

/// Largest admissible gap between a calibrated aggregate and its target.
pub const RESIDUAL_TOLERANCE: f64 = 1e-8;

const MAX_SHIFT: f64 = 1e3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateTarget {
    pub state: String,
    pub vote_share: Option<f64>,
    pub turnout: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    pub state_factor: String,
    pub turnout: bool,
    pub preference: bool,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            state_factor: "state".into(),
            turnout: true,
            preference: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateShift {
    pub state: String,
    pub turnout_shift: Option<f64>,
    pub turnout_residual: Option<f64>,
    pub preference_shift: Option<f64>,
    pub preference_residual: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub states: Vec<StateShift>,
}

fn shifted(p: f64, delta: f64) -> f64 {
    if delta == 0.0 {
        p
    } else {
        inv_logit(logit(p) + delta)
    }
}

/// Finds `δ` with `gap(δ) = 0` for increasing `gap`. Returns `(δ, |gap(δ)|)`.
fn solve_shift(state: &str, gap: impl Fn(f64) -> f64) -> Result<(f64, f64), PoststratError> {
    let at_zero = gap(0.0);
    if at_zero.abs() < 1e-12 {
        return Ok((0.0, at_zero.abs()));
    }
    let (mut lo, mut hi) = if at_zero > 0.0 { (-1.0, 0.0) } else { (0.0, 1.0) };
    while gap(lo) > 0.0 {
        lo *= 2.0;
        if lo < -MAX_SHIFT {
            return Err(unbracketable(state));
        }
    }
    while gap(hi) < 0.0 {
        hi *= 2.0;
        if hi > MAX_SHIFT {
            return Err(unbracketable(state));
        }
    }
    let mut best = (0.0, at_zero.abs());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let g = gap(mid);
        if g.abs() < best.1 {
            best = (mid, g.abs());
        }
        if g == 0.0 || mid == lo || mid == hi {
            break;
        }
        if g < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if best.1 >= RESIDUAL_TOLERANCE {
        return Err(PoststratError::Unbracketable {
            state: state.to_string(),
            reason: format!("residual {:.3e} after bisection", best.1),
        });
    }
    Ok(best)
}

fn unbracketable(state: &str) -> PoststratError {
    PoststratError::Unbracketable {
        state: state.to_string(),
        reason: "no sign change within the logit shift range".into(),
    }
}

fn check_target(state: &str, value: f64) -> Result<(), PoststratError> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(PoststratError::Unbracketable {
            state: state.to_string(),
            reason: format!("target {value} is outside (0, 1)"),
        })
    }
}

/// Shifts turnout and/or preference on the logit scale, one scalar per state,
/// so that each state's turnout rate and voter-weighted share hit the targets.
pub fn calibrate(
    preds: &CellPredictions,
    frame: &Frame,
    targets: &[StateTarget],
    opts: &CalibrationOptions,
) -> Result<(CellPredictions, CalibrationResult), PoststratError> {
    preds.check_frame(frame)?;
    let spos = frame
        .factor_index(&opts.state_factor)
        .map_err(|_| PoststratError::UnknownAxis(opts.state_factor.clone()))?;
    let states = &frame.factors()[spos];

    let mut by_state: BTreeMap<usize, &StateTarget> = BTreeMap::new();
    for t in targets {
        let idx = states
            .level_index(&t.state)
            .ok_or_else(|| PoststratError::Targets(format!("unknown state `{}`", t.state)))?;
        if by_state.insert(idx, t).is_some() {
            return Err(PoststratError::Targets(format!("duplicate state `{}`", t.state)));
        }
    }

    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in frame.cells().iter().enumerate() {
        members.entry(c.key[spos]).or_default().push(i);
    }

    let mut turnout = preds.turnout.clone();
    let mut preference = preds.preference.clone();
    if opts.turnout && turnout.is_none() {
        return Err(PoststratError::MissingPredictions("turnout"));
    }
    if opts.preference && preference.is_none() {
        return Err(PoststratError::MissingPredictions("preference"));
    }
    let pop = |i: usize| frame.cells()[i].population as f64;

    let mut shifts = Vec::with_capacity(members.len());
    for (&s, cells) in &members {
        let name = &states.levels[s];
        let target = by_state
            .get(&s)
            .ok_or_else(|| PoststratError::MissingState(name.clone()))?;
        let mut shift = StateShift {
            state: name.clone(),
            turnout_shift: None,
            turnout_residual: None,
            preference_shift: None,
            preference_residual: None,
        };
        let total_pop: f64 = cells.iter().map(|&i| pop(i)).sum();
        if total_pop <= 0.0 {
            return Err(PoststratError::Data(format!("state `{name}` has zero population")));
        }

        if opts.turnout {
            let goal = target.turnout.ok_or_else(|| {
                PoststratError::Targets(format!("no turnout target for `{name}`"))
            })?;
            check_target(name, goal)?;
            let phi = turnout.as_mut().expect("checked above");
            let rate = |delta: f64| {
                let mut acc = Compensated::default();
                for &i in cells {
                    acc.add(pop(i) * shifted(phi[i], delta));
                }
                acc.value() / total_pop
            };
            let (delta, residual) = solve_shift(name, |d| rate(d) - goal)?;
            for &i in cells {
                phi[i] = shifted(phi[i], delta);
            }
            shift.turnout_shift = Some(delta);
            shift.turnout_residual = Some(residual);
        }

        if opts.preference {
            let goal = target.vote_share.ok_or_else(|| {
                PoststratError::Targets(format!("no vote share target for `{name}`"))
            })?;
            check_target(name, goal)?;
            // Voter weights when turnout is known, population weights otherwise.
            let weights: Vec<f64> = match &turnout {
                Some(phi) => cells.iter().map(|&i| pop(i) * phi[i]).collect(),
                None => cells.iter().map(|&i| pop(i)).collect(),
            };
            let total_w: f64 = {
                let mut acc = Compensated::default();
                weights.iter().for_each(|&w| acc.add(w));
                acc.value()
            };
            if total_w <= 0.0 {
                return Err(PoststratError::Data(format!("state `{name}` has no expected voters")));
            }
            let alpha = preference.as_mut().expect("checked above");
            let share = |delta: f64| {
                let mut acc = Compensated::default();
                for (&i, w) in cells.iter().zip(&weights) {
                    acc.add(w * shifted(alpha[i], delta));
                }
                acc.value() / total_w
            };
            let (delta, residual) = solve_shift(name, |d| share(d) - goal)?;
            for &i in cells {
                alpha[i] = shifted(alpha[i], delta);
            }
            shift.preference_shift = Some(delta);
            shift.preference_residual = Some(residual);
        }
        shifts.push(shift);
    }

    let calibrated = CellPredictions::new(frame, turnout, preference)?;
    Ok((calibrated, CalibrationResult { states: shifts }))
}
