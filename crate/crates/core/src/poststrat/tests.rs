use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::formula::parse_formula;
use crate::frame::FactorSpec;
use crate::model::inv_logit;
use crate::model::simplex::logit;

fn factor(name: &str, levels: &[&str]) -> FactorSpec {
    FactorSpec::new(name, levels.iter().map(|s| s.to_string()).collect()).unwrap()
}

/// state × gender × age with varied populations.
fn electorate() -> Frame {
    Frame::full_cross(
        vec![
            factor("state", &["AK", "AL", "AZ"]),
            factor("gender", &["Male", "Female"]),
            factor("age", &["18-29", "30-44", "45-64", "65+"]),
        ],
        |k| 100 + 37 * k[0] as u64 + 11 * k[1] as u64 + 53 * k[2] as u64,
    )
}

fn random_preds(frame: &Frame, seed: u64) -> CellPredictions {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi = (0..frame.len()).map(|_| rng.random_range(0.05..0.95)).collect();
    let alpha = (0..frame.len()).map(|_| rng.random_range(0.05..0.95)).collect();
    CellPredictions::new(frame, Some(phi), Some(alpha)).unwrap()
}

fn axes(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

#[test]
fn three_rows_combine_exactly() {
    let frame = Frame::full_cross(vec![factor("row", &["a", "b", "c"])], |k| [400, 300, 200][k[0]]);
    let turnout = CellPredictions::new(&frame, Some(vec![0.40, 0.30, 0.40]), None).unwrap();
    let pref = CellPredictions::new(&frame, None, Some(vec![0.50, 0.60, 0.40])).unwrap();
    let both = combine(&turnout, &pref, &frame).unwrap();
    assert_eq!(both.expected_votes.unwrap(), vec![80.0, 54.0, 32.0]);
    assert_eq!(both.expected_voters.unwrap(), vec![160.0, 90.0, 80.0]);
}

#[test]
fn zero_turnout_means_zero_votes() {
    let frame = Frame::full_cross(vec![factor("row", &["a", "b"])], |_| 500);
    let p = CellPredictions::new(&frame, Some(vec![0.0, 0.0]), Some(vec![0.9, 0.1])).unwrap();
    assert_eq!(p.expected_votes.unwrap(), vec![0.0, 0.0]);
}

#[test]
fn combine_rejects_foreign_frames() {
    let a = Frame::full_cross(vec![factor("row", &["a", "b"])], |_| 5);
    let b = Frame::full_cross(vec![factor("row", &["a", "c"])], |_| 5);
    let t = CellPredictions::new(&a, Some(vec![0.5, 0.5]), None).unwrap();
    let p = CellPredictions::new(&b, None, Some(vec![0.5, 0.5])).unwrap();
    assert!(matches!(combine(&t, &p, &a), Err(PoststratError::FrameMismatch)));
    assert!(matches!(
        CellPredictions::new(&a, Some(vec![0.5]), None),
        Err(PoststratError::FrameMismatch)
    ));
}

fn fitted(frame: &Frame, formula: &str) -> FittedModel {
    let f = parse_formula(formula).unwrap();
    let design = Design::new(&f, frame.factors(), &[], false).unwrap();
    let mut p = ParamVector::zeros(&design);
    let observed = design.terms().iter().map(|t| vec![true; t.cardinality]).collect();
    p.mu = 0.0;
    FittedModel {
        design,
        estimate: Estimate::Point(p),
        observed,
    }
}

#[test]
fn zero_parameters_predict_one_half() {
    let frame = electorate();
    let fit = fitted(&frame, "cbind(y, n) ~ 1 + (1 | state) + (1 | gender:age)");
    let p = predict_cells(&fit, &frame, Kind::Preference).unwrap();
    assert!(p.preference.unwrap().iter().all(|&v| v == 0.5));
    assert!(p.turnout.is_none());
}

#[test]
fn predictions_match_a_naive_loop() {
    let frame = electorate();
    let mut fit = fitted(&frame, "cbind(y, n) ~ 1 + (1 | state) + (1 | gender:age)");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let Estimate::Point(p) = &mut fit.estimate else { unreachable!() };
    p.mu = -0.3;
    for e in p.effects.iter_mut() {
        e.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    // Hide one state from training: its effect must not be used.
    fit.observed[0][2] = false;
    let p = p.clone();
    let got = predict_cells(&fit, &frame, Kind::Turnout).unwrap().turnout.unwrap();
    for (i, cell) in frame.cells().iter().enumerate() {
        let (s, g, a) = (cell.key[0], cell.key[1], cell.key[2]);
        let state = if s == 2 { 0.0 } else { p.effects[0][s] };
        let eta = -0.3 + state + p.effects[1][g * 4 + a];
        let want = 1.0 / (1.0 + (-eta).exp());
        assert_abs_diff_eq!(got[i], want, epsilon = 1e-12);
    }
}

#[test]
fn draws_average_probabilities_not_parameters() {
    let frame = Frame::full_cross(vec![factor("g", &["a", "b"])], |_| 10);
    let base = fitted(&frame, "cbind(y, n) ~ 1");
    let Estimate::Point(p) = &base.estimate else { unreachable!() };
    let mut lo = p.clone();
    let mut hi = p.clone();
    lo.mu = -2.0;
    hi.mu = 2.0;
    let fit = FittedModel {
        estimate: Estimate::Draws(vec![lo, hi]),
        ..base
    };
    let got = predict_cells(&fit, &frame, Kind::Preference).unwrap().preference.unwrap();
    let want = 0.5 * (inv_logit(-2.0) + inv_logit(2.0));
    assert_abs_diff_eq!(got[0], want, epsilon = 1e-15);
}

#[test]
fn two_equal_cells_average_to_one_half() {
    let frame = Frame::full_cross(vec![factor("g", &["a", "b"])], |_| 250);
    let p = CellPredictions::new(&frame, None, Some(vec![0.4, 0.6])).unwrap();
    let t = aggregate(&p, &frame, &[], Weighting::Population).unwrap();
    assert_eq!(t.rows.len(), 1);
    assert_abs_diff_eq!(t.rows[0].vote_share.unwrap(), 0.5, epsilon = 1e-15);
    assert_eq!(t.rows[0].population, 500);
    assert!(t.rows[0].turnout_rate.is_none());
    assert!(matches!(
        aggregate(&p, &frame, &[], Weighting::Voters),
        Err(PoststratError::MissingPredictions("turnout"))
    ));
}

#[test]
fn constant_preference_is_reproduced_by_every_row() {
    let frame = electorate();
    let mut p = random_preds(&frame, 8);
    p = CellPredictions::new(&frame, p.turnout.clone(), Some(vec![0.375; frame.len()])).unwrap();
    for weighting in [Weighting::Population, Weighting::Voters] {
        for by in [vec![], axes(&["state"]), axes(&["gender", "age"])] {
            for row in aggregate(&p, &frame, &by, weighting).unwrap().rows {
                assert_abs_diff_eq!(row.vote_share.unwrap(), 0.375, epsilon = 1e-15);
            }
        }
    }
}

#[test]
fn national_share_is_voter_weighted_mean_of_states() {
    let frame = electorate();
    let p = random_preds(&frame, 21);
    let national = aggregate(&p, &frame, &[], Weighting::Voters).unwrap();
    let states = aggregate(&p, &frame, &axes(&["state"]), Weighting::Voters).unwrap();
    let (mut num, mut den) = (0.0, 0.0);
    for row in &states.rows {
        num += row.expected_voters.unwrap() * row.vote_share.unwrap();
        den += row.expected_voters.unwrap();
    }
    assert_abs_diff_eq!(national.rows[0].vote_share.unwrap(), num / den, epsilon = 1e-12);

    // Direct double summation over cells.
    let phi = p.turnout.as_ref().unwrap();
    let alpha = p.preference.as_ref().unwrap();
    let (mut votes, mut voters) = (0.0, 0.0);
    for (i, c) in frame.cells().iter().enumerate() {
        votes += c.population as f64 * phi[i] * alpha[i];
        voters += c.population as f64 * phi[i];
    }
    assert_abs_diff_eq!(national.rows[0].vote_share.unwrap(), votes / voters, epsilon = 1e-12);
    assert_abs_diff_eq!(national.rows[0].expected_votes.unwrap(), votes, epsilon = 1e-9);
}

#[test]
fn population_weighting_matches_its_formula() {
    let frame = electorate();
    let p = random_preds(&frame, 4);
    let t = aggregate(&p, &frame, &axes(&["age"]), Weighting::Population).unwrap();
    let alpha = p.preference.as_ref().unwrap();
    for (a, row) in t.rows.iter().enumerate() {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, c) in frame.cells().iter().enumerate().filter(|(_, c)| c.key[2] == a) {
            num += c.population as f64 * alpha[i];
            den += c.population as f64;
        }
        assert_abs_diff_eq!(row.vote_share.unwrap(), num / den, epsilon = 1e-12);
    }
}

#[test]
fn rows_follow_level_order() {
    let frame = electorate();
    let t = aggregate(&random_preds(&frame, 1), &frame, &axes(&["age", "state"]), Weighting::Voters).unwrap();
    assert_eq!(t.rows.len(), 12);
    assert_eq!(t.rows[0].levels, vec!["18-29", "AK"]);
    assert_eq!(t.rows[1].levels, vec!["18-29", "AL"]);
    assert!(t.row(&["65+", "AZ"]).is_some());
}

#[test]
fn unknown_axis_is_rejected() {
    let frame = electorate();
    let err = aggregate(&random_preds(&frame, 1), &frame, &axes(&["income"]), Weighting::Voters);
    assert!(matches!(err, Err(PoststratError::UnknownAxis(a)) if a == "income"));
}

#[test]
fn identical_genders_have_no_gap() {
    let frame = electorate();
    let p = random_preds(&frame, 6);
    let mut alpha = p.preference.clone().unwrap();
    for (i, c) in frame.cells().iter().enumerate() {
        if c.key[1] == 1 {
            let twin = frame.position(&[c.key[0], 0, c.key[2]]).unwrap();
            alpha[i] = alpha[twin];
        }
    }
    // Different turnout across genders would reweight ages, so keep φ uniform.
    let p = CellPredictions::new(&frame, Some(vec![0.6; frame.len()]), Some(alpha)).unwrap();
    let uniform = Frame::full_cross(frame.factors().to_vec(), |k| 100 + 37 * k[0] as u64 + 53 * k[2] as u64);
    let p = CellPredictions::new(&uniform, p.turnout, p.preference).unwrap();
    for by in [axes(&["state"]), axes(&["age"]), axes(&["state", "age"])] {
        for row in gender_gap(&p, &uniform, &by, &GenderSpec::default()).unwrap().rows {
            assert_abs_diff_eq!(row.gap.unwrap(), 0.0, epsilon = 1e-15);
        }
    }
}

#[test]
fn ten_point_gap() {
    let frame = Frame::full_cross(
        vec![factor("gender", &["Male", "Female"]), factor("age", &["young", "old"])],
        |_| 1000,
    );
    let alpha = frame.cells().iter().map(|c| if c.key[0] == 0 { 0.6 } else { 0.5 }).collect();
    let p = CellPredictions::new(&frame, Some(vec![0.55; 4]), Some(alpha)).unwrap();
    let t = gender_gap(&p, &frame, &[], &GenderSpec::default()).unwrap();
    assert_abs_diff_eq!(t.rows[0].gap.unwrap(), 0.10, epsilon = 1e-12);
    assert_abs_diff_eq!(t.rows[0].male_share.unwrap(), 0.6, epsilon = 1e-12);
}

#[test]
fn gap_rows_match_filter_and_average() {
    let frame = electorate();
    let p = random_preds(&frame, 17);
    let t = gender_gap(&p, &frame, &axes(&["age"]), &GenderSpec::default()).unwrap();
    let phi = p.turnout.as_ref().unwrap();
    let alpha = p.preference.as_ref().unwrap();
    let share = |age: usize, gender: usize| {
        let cells: Vec<usize> = (0..frame.len())
            .filter(|&i| frame.cells()[i].key[2] == age && frame.cells()[i].key[1] == gender)
            .collect();
        let w = |i: usize| frame.cells()[i].population as f64 * phi[i];
        cells.iter().map(|&i| w(i) * alpha[i]).sum::<f64>() / cells.iter().map(|&i| w(i)).sum::<f64>()
    };
    assert_eq!(t.rows.len(), 4);
    for (a, row) in t.rows.iter().enumerate() {
        assert_abs_diff_eq!(row.gap.unwrap(), share(a, 0) - share(a, 1), epsilon = 1e-12);
    }
}

#[test]
fn gap_requires_a_gender_factor() {
    let frame = Frame::full_cross(vec![factor("age", &["a", "b"])], |_| 1);
    let p = CellPredictions::new(&frame, Some(vec![0.5; 2]), Some(vec![0.5; 2])).unwrap();
    assert!(matches!(
        gender_gap(&p, &frame, &[], &GenderSpec::default()),
        Err(PoststratError::Gender(_))
    ));
    let frame = electorate();
    let p = random_preds(&frame, 1);
    assert!(gender_gap(&p, &frame, &axes(&["gender"]), &GenderSpec::default()).is_err());
}

fn targets_from(table: &AggregateTable) -> Vec<StateTarget> {
    table
        .rows
        .iter()
        .map(|r| StateTarget {
            state: r.levels[0].clone(),
            vote_share: r.vote_share,
            turnout: r.turnout_rate,
        })
        .collect()
}

#[test]
fn matched_targets_need_no_shift() {
    let frame = electorate();
    let p = random_preds(&frame, 30);
    let table = aggregate(&p, &frame, &axes(&["state"]), Weighting::Voters).unwrap();
    let (out, result) = calibrate(&p, &frame, &targets_from(&table), &CalibrationOptions::default()).unwrap();
    for s in &result.states {
        assert_eq!(s.turnout_shift, Some(0.0));
        assert_eq!(s.preference_shift, Some(0.0));
    }
    assert_eq!(out, p);
}

#[test]
fn single_cell_shift_has_closed_form() {
    let frame = Frame::full_cross(vec![factor("state", &["only", "other"])], |_| 1000);
    let p = CellPredictions::new(&frame, None, Some(vec![0.5, 0.5])).unwrap();
    let targets = [
        StateTarget { state: "only".into(), vote_share: Some(0.6), turnout: None },
        StateTarget { state: "other".into(), vote_share: Some(0.5), turnout: None },
    ];
    let opts = CalibrationOptions { turnout: false, ..Default::default() };
    let (out, result) = calibrate(&p, &frame, &targets, &opts).unwrap();
    let delta = result.states[0].preference_shift.unwrap();
    assert_abs_diff_eq!(delta, logit(0.6), epsilon = 1e-10);
    assert_abs_diff_eq!(delta, 0.4055, epsilon = 1e-4);
    assert_abs_diff_eq!(out.preference.unwrap()[0], 0.6, epsilon = 1e-12);
    assert_eq!(result.states[1].preference_shift, Some(0.0));
}

fn state_targets(frame: &Frame) -> Vec<StateTarget> {
    frame.factors()[0]
        .levels
        .iter()
        .enumerate()
        .map(|(i, s)| StateTarget {
            state: s.clone(),
            vote_share: Some(0.35 + 0.12 * i as f64),
            turnout: Some(0.70 - 0.15 * i as f64),
        })
        .collect()
}

#[test]
fn calibrated_states_hit_targets_on_reaggregation() {
    let frame = electorate();
    let p = random_preds(&frame, 44);
    let targets = state_targets(&frame);
    let (out, result) = calibrate(&p, &frame, &targets, &CalibrationOptions::default()).unwrap();
    // Independent re-aggregation straight from the cells.
    let phi = out.turnout.as_ref().unwrap();
    let alpha = out.preference.as_ref().unwrap();
    for (s, target) in targets.iter().enumerate() {
        let (mut pop, mut voters, mut votes) = (0.0, 0.0, 0.0);
        for (i, c) in frame.cells().iter().enumerate().filter(|(_, c)| c.key[0] == s) {
            let n = c.population as f64;
            pop += n;
            voters += n * phi[i];
            votes += n * phi[i] * alpha[i];
        }
        assert!((voters / pop - target.turnout.unwrap()).abs() < RESIDUAL_TOLERANCE);
        assert!((votes / voters - target.vote_share.unwrap()).abs() < RESIDUAL_TOLERANCE);
        assert!(result.states[s].turnout_residual.unwrap() < RESIDUAL_TOLERANCE);
        assert!(result.states[s].preference_residual.unwrap() < RESIDUAL_TOLERANCE);
    }
    // Expected counts follow the calibrated probabilities.
    let voters = out.expected_voters.as_ref().unwrap();
    for (i, c) in frame.cells().iter().enumerate() {
        assert_eq!(voters[i], c.population as f64 * phi[i]);
    }
}

#[test]
fn turnout_calibration_leaves_preference_alone() {
    let frame = electorate();
    let p = random_preds(&frame, 2);
    let opts = CalibrationOptions { preference: false, ..Default::default() };
    let (out, result) = calibrate(&p, &frame, &state_targets(&frame), &opts).unwrap();
    assert_eq!(out.preference, p.preference);
    assert!(result.states.iter().all(|s| s.preference_shift.is_none()));

    let opts = CalibrationOptions { turnout: false, ..Default::default() };
    let (out, _) = calibrate(&p, &frame, &state_targets(&frame), &opts).unwrap();
    assert_eq!(out.turnout, p.turnout);
}

#[test]
fn calibration_errors() {
    let frame = electorate();
    let p = random_preds(&frame, 2);
    let opts = CalibrationOptions::default();
    let mut targets = state_targets(&frame);
    targets.pop();
    assert!(matches!(calibrate(&p, &frame, &targets, &opts), Err(PoststratError::MissingState(s)) if s == "AZ"));

    let mut targets = state_targets(&frame);
    targets[1].vote_share = Some(1.0);
    assert!(matches!(
        calibrate(&p, &frame, &targets, &opts),
        Err(PoststratError::Unbracketable { state, .. }) if state == "AL"
    ));

    let mut targets = state_targets(&frame);
    targets.push(targets[0].clone());
    assert!(matches!(calibrate(&p, &frame, &targets, &opts), Err(PoststratError::Targets(_))));

    let mut targets = state_targets(&frame);
    targets[0].state = "ZZ".into();
    assert!(matches!(calibrate(&p, &frame, &targets, &opts), Err(PoststratError::Targets(_))));
}

#[test]
fn predictions_round_trip_through_csv() {
    let frame = electorate();
    let p = random_preds(&frame, 12);
    let mut buf = Vec::new();
    write_predictions(&p, &frame, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("state,gender,age,population,turnout,preference,expected_voters,expected_votes\n"));
    // Reverse the rows: reading is order independent.
    let mut lines: Vec<&str> = text.lines().collect();
    let header = lines.remove(0);
    lines.reverse();
    let shuffled = format!("{header}\n{}\n", lines.join("\n"));
    let back = read_predictions(&frame, shuffled.as_bytes()).unwrap();
    assert_eq!(back, p);

    let half = CellPredictions::new(&frame, None, p.preference.clone()).unwrap();
    let mut buf = Vec::new();
    write_predictions(&half, &frame, &mut buf).unwrap();
    assert_eq!(read_predictions(&frame, buf.as_slice()).unwrap(), half);
}

#[test]
fn targets_csv() {
    let text = "state,two_party_share,turnout_rate\nAK,0.58,0.61\nAL,0.64,\n";
    let t = read_targets(text.as_bytes()).unwrap();
    assert_eq!(t.len(), 2);
    assert_eq!(t[0].vote_share, Some(0.58));
    assert_eq!(t[1].turnout, None);
    assert!(read_targets("state,share\nAK,0.5\n".as_bytes()).is_err());
}

#[test]
fn table_writers() {
    let frame = electorate();
    let p = random_preds(&frame, 5);
    let table = aggregate(&p, &frame, &axes(&["state"]), Weighting::Voters).unwrap();
    let mut buf = Vec::new();
    write_aggregate(&table, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("state,population,expected_voters,expected_votes,turnout_rate,vote_share\nAK,"));
    assert_eq!(text.lines().count(), 4);

    let gap = gender_gap(&p, &frame, &axes(&["age"]), &GenderSpec::default()).unwrap();
    let mut buf = Vec::new();
    write_gap(&gap, &mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().lines().next().unwrap().ends_with("male_share,female_share,gap"));
}

proptest! {
    #[test]
    fn summing_over_an_axis_reproduces_the_coarser_table(seed in 0u64..500) {
        let frame = electorate();
        let p = random_preds(&frame, seed);
        let fine = aggregate(&p, &frame, &axes(&["state", "age"]), Weighting::Voters).unwrap();
        let coarse = aggregate(&p, &frame, &axes(&["state"]), Weighting::Voters).unwrap();
        for row in &coarse.rows {
            let parts: Vec<&AggregateRow> = fine.rows.iter().filter(|r| r.levels[0] == row.levels[0]).collect();
            prop_assert_eq!(parts.iter().map(|r| r.population).sum::<u64>(), row.population);
            let voters: f64 = parts.iter().map(|r| r.expected_voters.unwrap()).sum();
            let votes: f64 = parts.iter().map(|r| r.expected_votes.unwrap()).sum();
            prop_assert!((voters - row.expected_voters.unwrap()).abs() <= 1e-9 * voters);
            prop_assert!((votes - row.expected_votes.unwrap()).abs() <= 1e-9 * votes);
        }
    }

    #[test]
    fn logit_shift_preserves_order(seed in 0u64..200, target in 0.05f64..0.95) {
        let frame = electorate();
        let p = random_preds(&frame, seed);
        let targets: Vec<StateTarget> = frame.factors()[0].levels.iter().map(|s| StateTarget {
            state: s.clone(), vote_share: Some(target), turnout: None,
        }).collect();
        let opts = CalibrationOptions { turnout: false, ..Default::default() };
        let (out, _) = calibrate(&p, &frame, &targets, &opts).unwrap();
        let before = p.preference.as_ref().unwrap();
        let after = out.preference.as_ref().unwrap();
        for i in 0..frame.len() {
            for j in 0..frame.len() {
                if frame.cells()[i].key[0] == frame.cells()[j].key[0] && before[i] < before[j] {
                    prop_assert!(after[i] <= after[j]);
                }
            }
        }
    }

    #[test]
    fn combined_national_share_is_votes_over_voters(seed in 0u64..500) {
        let frame = electorate();
        let p = random_preds(&frame, seed);
        let t = aggregate(&p, &frame, &[], Weighting::Voters).unwrap();
        let mut votes = Compensated::default();
        let mut voters = Compensated::default();
        for i in 0..frame.len() {
            votes.add(p.expected_votes.as_ref().unwrap()[i]);
            voters.add(p.expected_voters.as_ref().unwrap()[i]);
        }
        prop_assert_eq!(t.rows[0].vote_share.unwrap(), votes.value() / voters.value());
    }
}

#[test]
fn shifted_probabilities_stay_inside_the_unit_interval() {
    assert!(inv_logit(logit(0.999) + 30.0) <= 1.0);
}
