//! Dataset types, file I/O and the meal-diary preprocessing pipeline.
//!
//! A dataset on disk is a directory with a `manifest.json` listing patients
//! and one CSV per patient with header `day,kind,time,value`. Times are
//! stored as decimal hours since the start of each patient-day with six
//! fractional digits; dosages are grams of carbohydrate, outcome values
//! mmol/L.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single timestamped event: a treatment `(time, dosage)` or an outcome
/// `(time, value)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub value: f64,
}

impl Event {
    pub fn new(time: f64, value: f64) -> Self {
        Event { time, value }
    }
}

/// One observation day: treatments and outcomes on `[0, day_length]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayTrajectory {
    pub day_length: f64,
    pub treatments: Vec<Event>,
    pub outcomes: Vec<Event>,
}

impl DayTrajectory {
    pub fn empty(day_length: f64) -> Self {
        DayTrajectory {
            day_length,
            treatments: Vec::new(),
            outcomes: Vec::new(),
        }
    }

    /// Checks the stream invariants: times inside `[0, day_length]`,
    /// strictly increasing per stream, dosages non-negative.
    pub fn validate(&self, record: &str) -> Result<()> {
        check_stream(&self.treatments, self.day_length, record, "treatment")?;
        check_stream(&self.outcomes, self.day_length, record, "outcome")?;
        for e in &self.treatments {
            if e.value < 0.0 {
                return Err(Error::validation(
                    record,
                    format!("negative dosage {} at time {}", e.value, e.time),
                ));
            }
        }
        Ok(())
    }

    /// Interval end points `(0, t_1, ..., t_N, T)` over the sorted union of
    /// both event streams, deduplicated.
    pub fn event_partition(&self) -> Vec<f64> {
        let mut pts: Vec<f64> = Vec::with_capacity(self.treatments.len() + self.outcomes.len() + 2);
        pts.push(0.0);
        pts.extend(self.treatments.iter().map(|e| e.time));
        pts.extend(self.outcomes.iter().map(|e| e.time));
        pts.push(self.day_length);
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pts.dedup();
        pts
    }
}

fn check_stream(events: &[Event], day_length: f64, record: &str, kind: &str) -> Result<()> {
    let mut prev: Option<f64> = None;
    for e in events {
        if !e.time.is_finite() || !e.value.is_finite() {
            return Err(Error::validation(
                record,
                format!("non-finite {kind} entry at time {}", e.time),
            ));
        }
        if e.time < 0.0 || e.time > day_length {
            return Err(Error::validation(
                record,
                format!("{kind} time {} outside [0, {}]", e.time, day_length),
            ));
        }
        if let Some(p) = prev {
            if e.time <= p {
                return Err(Error::validation(
                    record,
                    format!("{kind} times not strictly increasing at {}", e.time),
                ));
            }
        }
        prev = Some(e.time);
    }
    Ok(())
}

/// All recorded days of one patient, with policy and group labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub policy_label: String,
    pub group_id: String,
    pub days: Vec<DayTrajectory>,
}

impl PatientRecord {
    pub fn validate(&self) -> Result<()> {
        if self.patient_id.is_empty() {
            return Err(Error::validation("<unnamed>", "empty patient id"));
        }
        if self.policy_label.is_empty() {
            return Err(Error::validation(&self.patient_id, "empty policy label"));
        }
        for (i, day) in self.days.iter().enumerate() {
            day.validate(&format!("{} day {}", self.patient_id, i))?;
        }
        Ok(())
    }
}

/// A growing view of past events, shared by the regressive treatment model
/// and the rollout engine. Both streams stay sorted by time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventHistory {
    pub treatments: Vec<Event>,
    pub outcomes: Vec<Event>,
}

impl EventHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_day(day: &DayTrajectory) -> Self {
        EventHistory {
            treatments: day.treatments.clone(),
            outcomes: day.outcomes.clone(),
        }
    }

    pub fn push_treatment(&mut self, time: f64, dosage: f64) {
        debug_assert!(self.treatments.last().is_none_or(|e| e.time < time));
        self.treatments.push(Event::new(time, dosage));
    }

    pub fn push_outcome(&mut self, time: f64, value: f64) {
        debug_assert!(self.outcomes.last().is_none_or(|e| e.time < time));
        self.outcomes.push(Event::new(time, value));
    }

    pub fn is_sorted(&self) -> bool {
        let ok = |v: &[Event]| v.windows(2).all(|w| w[0].time < w[1].time);
        ok(&self.treatments) && ok(&self.outcomes)
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    patients: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    policy: String,
    group: String,
    days: usize,
}

/// Loads a dataset directory (`manifest.json` plus per-patient CSVs) and
/// validates every record. No partially valid records escape: the first
/// schema or invariant violation aborts the load.
pub fn load_dataset(dir: &Path) -> Result<Vec<PatientRecord>> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: format!("manifest.json: {e}"),
    })?;

    let mut records = Vec::with_capacity(manifest.patients.len());
    for entry in &manifest.patients {
        let csv_path = dir.join(format!("{}.csv", entry.id));
        let text = fs::read_to_string(&csv_path)?;
        let mut days = vec![DayTrajectory::empty(DAY_LENGTH_HOURS); entry.days];
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 {
                if line.trim() != "day,kind,time,value" {
                    return Err(Error::Parse {
                        line: 1,
                        msg: format!("{}: expected header day,kind,time,value", entry.id),
                    });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("{}: expected 4 fields, got {}", entry.id, fields.len()),
                });
            }
            let parse_err = |what: &str| Error::Parse {
                line: lineno + 1,
                msg: format!("{}: invalid {what} '{}'", entry.id, line),
            };
            let day: usize = fields[0].parse().map_err(|_| parse_err("day"))?;
            let time: f64 = fields[2].parse().map_err(|_| parse_err("time"))?;
            let value: f64 = fields[3].parse().map_err(|_| parse_err("value"))?;
            if day >= days.len() {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("{}: day {} out of range ({} days)", entry.id, day, days.len()),
                });
            }
            match fields[1] {
                "treatment" => days[day].treatments.push(Event::new(time, value)),
                "outcome" => days[day].outcomes.push(Event::new(time, value)),
                other => {
                    return Err(Error::Parse {
                        line: lineno + 1,
                        msg: format!("{}: unknown kind '{other}'", entry.id),
                    })
                }
            }
        }
        let record = PatientRecord {
            patient_id: entry.id.clone(),
            policy_label: entry.policy.clone(),
            group_id: entry.group.clone(),
            days,
        };
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

/// Canonical day length in hours.
pub const DAY_LENGTH_HOURS: f64 = 24.0;

/// Writes a dataset directory. Saving the result of a load reproduces the
/// files byte for byte.
pub fn save_dataset(records: &[PatientRecord], dir: &Path) -> Result<()> {
    for r in records {
        r.validate()?;
    }
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        patients: records
            .iter()
            .map(|r| ManifestEntry {
                id: r.patient_id.clone(),
                policy: r.policy_label.clone(),
                group: r.group_id.clone(),
                days: r.days.len(),
            })
            .collect(),
    };
    let mut out = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    out.push('\n');
    fs::write(dir.join("manifest.json"), out)?;

    for r in records {
        let mut f = fs::File::create(dir.join(format!("{}.csv", r.patient_id)))?;
        f.write_all(b"day,kind,time,value\n")?;
        for (d, day) in r.days.iter().enumerate() {
            // Merge the two streams in time order for readability.
            let mut rows: Vec<(f64, &str, f64)> = day
                .treatments
                .iter()
                .map(|e| (e.time, "treatment", e.value))
                .chain(day.outcomes.iter().map(|e| (e.time, "outcome", e.value)))
                .collect();
            rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(b.1).reverse()));
            for (time, kind, value) in rows {
                writeln!(f, "{d},{kind},{time:.6},{value:.6}")?;
            }
        }
    }
    Ok(())
}

/// Merges meal events closer than `window` hours: the earliest event of each
/// cluster is kept and the cluster's dosages are summed.
pub fn dedup_meals(treatments: &[Event], window: f64) -> Vec<Event> {
    let mut out: Vec<Event> = Vec::new();
    let mut i = 0;
    while i < treatments.len() {
        let anchor = treatments[i];
        let mut dose = anchor.value;
        let mut j = i + 1;
        while j < treatments.len() && treatments[j].time - anchor.time < window {
            dose += treatments[j].value;
            j += 1;
        }
        out.push(Event::new(anchor.time, dose));
        i = j;
    }
    out
}

/// Two-sided average derivative of the outcome stream at `index`; falls back
/// to a one-sided difference at the boundaries.
pub fn glucose_derivative(outcomes: &[Event], index: usize) -> Result<f64> {
    let n = outcomes.len();
    if n < 2 || index >= n {
        return Err(Error::invalid_argument(
            "glucose_derivative: need >= 2 outcomes and a valid index",
        ));
    }
    let fwd = |i: usize| {
        (outcomes[i + 1].value - outcomes[i].value) / (outcomes[i + 1].time - outcomes[i].time)
    };
    if index == 0 {
        Ok(fwd(0))
    } else if index == n - 1 {
        Ok(fwd(n - 2))
    } else {
        Ok(0.5 * (fwd(index - 1) + fwd(index)))
    }
}

/// Moves each meal to the next outcome-grid time whose glucose derivative is
/// below `threshold`, without crossing the next meal. Meals with no
/// qualifying grid point keep their original time.
pub fn shift_meal_times(treatments: &[Event], outcomes: &[Event], threshold: f64) -> Vec<Event> {
    if outcomes.len() < 2 {
        return treatments.to_vec();
    }
    let mut out = Vec::with_capacity(treatments.len());
    for (i, meal) in treatments.iter().enumerate() {
        let next_meal_time = treatments
            .get(i + 1)
            .map_or(f64::INFINITY, |next| next.time);
        let mut shifted = *meal;
        for (j, o) in outcomes.iter().enumerate() {
            if o.time < meal.time {
                continue;
            }
            if o.time >= next_meal_time {
                break;
            }
            let d = glucose_derivative(outcomes, j).expect("index valid by construction");
            if d < threshold {
                shifted.time = o.time;
                break;
            }
        }
        out.push(shifted);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dedup_two_hour_rule() {
        let meals = vec![Event::new(8.0, 30.0), Event::new(9.0, 20.0)];
        let out = dedup_meals(&meals, 2.0);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].time, 8.0);
        assert_eq!(out[0].value, 50.0);
    }

    #[test]
    fn dedup_keeps_separated_meals() {
        let meals = vec![Event::new(8.0, 30.0), Event::new(11.0, 20.0)];
        assert_eq!(dedup_meals(&meals, 2.0).len(), 2);
    }

    #[test]
    fn dedup_cluster_chain() {
        // 9.5 merges into 8.0's cluster; 10.5 is >= 2h past 8.0 and starts a
        // new cluster.
        let meals = vec![
            Event::new(8.0, 10.0),
            Event::new(9.5, 20.0),
            Event::new(10.5, 30.0),
        ];
        let out = dedup_meals(&meals, 2.0);
        assert_eq!(
            out,
            vec![Event::new(8.0, 30.0), Event::new(10.5, 30.0)]
        );
    }

    #[test]
    fn dedup_idempotent() {
        let meals = vec![
            Event::new(8.0, 10.0),
            Event::new(9.5, 20.0),
            Event::new(10.5, 30.0),
            Event::new(14.0, 5.0),
        ];
        let once = dedup_meals(&meals, 2.0);
        assert_eq!(dedup_meals(&once, 2.0), once);
    }

    #[test]
    fn derivative_constant_is_zero() {
        let ys: Vec<Event> = (0..5).map(|i| Event::new(i as f64, 4.2)).collect();
        assert_eq!(glucose_derivative(&ys, 2).unwrap(), 0.0);
    }

    #[test]
    fn derivative_linear_case() {
        let ys: Vec<Event> = (0..5).map(|i| Event::new(i as f64, 2.0 * i as f64)).collect();
        assert_eq!(glucose_derivative(&ys, 2).unwrap(), 2.0);
        // boundary falls back to one-sided
        assert_eq!(glucose_derivative(&ys, 0).unwrap(), 2.0);
        assert_eq!(glucose_derivative(&ys, 4).unwrap(), 2.0);
    }

    #[test]
    fn derivative_hand_case() {
        let ys = vec![
            Event::new(0.0, 1.0),
            Event::new(1.0, 3.0),
            Event::new(3.0, 4.0),
        ];
        assert_eq!(glucose_derivative(&ys, 1).unwrap(), 1.25);
    }

    fn grid_outcomes(vals: &[f64]) -> Vec<Event> {
        vals.iter()
            .enumerate()
            .map(|(i, v)| Event::new(i as f64 * 0.5, *v))
            .collect()
    }

    #[test]
    fn shift_keeps_meal_at_low_derivative() {
        let outcomes = grid_outcomes(&[5.0, 5.02, 5.04, 5.06]);
        let meals = vec![Event::new(0.5, 40.0)];
        let out = shift_meal_times(&meals, &outcomes, 0.5);
        assert_eq!(out[0].time, 0.5);
    }

    #[test]
    fn shift_moves_meal_past_steep_region() {
        // derivative at grid 1 is steep, at grid 2 it settles below 0.5
        let outcomes = grid_outcomes(&[5.0, 6.5, 7.0, 7.05, 7.1]);
        let meals = vec![Event::new(0.5, 40.0)];
        let out = shift_meal_times(&meals, &outcomes, 0.5);
        assert_eq!(out[0].time, 1.5);
        assert_eq!(out[0].value, 40.0);
    }

    #[test]
    fn shift_fallback_keeps_original() {
        let outcomes = grid_outcomes(&[5.0, 6.0, 7.0, 8.0]);
        let meals = vec![Event::new(0.5, 40.0)];
        let out = shift_meal_times(&meals, &outcomes, 0.5);
        assert_eq!(out[0].time, 0.5);
    }

    #[test]
    fn shift_idempotent() {
        let outcomes = grid_outcomes(&[5.0, 6.5, 7.0, 7.05, 7.1, 7.12]);
        let meals = vec![Event::new(0.3, 40.0), Event::new(2.4, 10.0)];
        let once = shift_meal_times(&meals, &outcomes, 0.5);
        let twice = shift_meal_times(&once, &outcomes, 0.5);
        assert_eq!(once, twice);
    }

    #[test]
    fn validate_rejects_decreasing_times() {
        let day = DayTrajectory {
            day_length: 24.0,
            treatments: vec![Event::new(9.0, 30.0), Event::new(8.0, 20.0)],
            outcomes: vec![],
        };
        assert!(day.validate("p1").is_err());
    }

    #[test]
    fn validate_rejects_duplicate_timestamps() {
        let day = DayTrajectory {
            day_length: 24.0,
            treatments: vec![],
            outcomes: vec![Event::new(8.0, 5.0), Event::new(8.0, 5.1)],
        };
        assert!(day.validate("p1").is_err());
    }

    #[test]
    fn validate_rejects_negative_dosage() {
        let day = DayTrajectory {
            day_length: 24.0,
            treatments: vec![Event::new(8.0, -1.0)],
            outcomes: vec![],
        };
        assert!(day.validate("p1").is_err());
    }
}
