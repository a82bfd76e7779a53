use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{score_trajectory, CompatibilityRecord, Thresholds};
use crate::demo::DemonstrationSet;
use crate::error::{Error, Result};
use crate::policy::PolicyEnsemble;

pub const MAP_CSV_HEADER: [&str; 5] = ["trajectory_id", "step", "novelty", "likelihood", "score"];

/// Every step of a set scored under one base ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityMap {
    pub records: Vec<CompatibilityRecord>,
    pub thresholds: Thresholds,
    pub base_policy_fingerprint: String,
}

impl CompatibilityMap {
    pub fn mean_score(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.score).sum::<f64>() / self.records.len() as f64
    }

    /// Records of one trajectory, in step order.
    pub fn trajectory(&self, id: &str) -> impl Iterator<Item = &CompatibilityRecord> {
        let id = id.to_owned();
        self.records.iter().filter(move |r| r.trajectory_id == id)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        write_map_csv(&self.records, &mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

/// Records in (trajectory order, step order).
pub fn build_map(ensemble: &PolicyEnsemble, set: &DemonstrationSet, th: &Thresholds) -> Result<CompatibilityMap> {
    th.validate()?;
    let mut records = Vec::with_capacity(set.pair_count());
    for traj in set.trajectories() {
        records.extend(score_trajectory(ensemble, traj, th)?.0);
    }
    Ok(CompatibilityMap {
        records,
        thresholds: *th,
        base_policy_fingerprint: ensemble.fingerprint(),
    })
}

#[derive(Serialize, Deserialize)]
struct Row {
    trajectory_id: String,
    step: usize,
    novelty: f64,
    likelihood: f64,
    score: f64,
}

/// Floats are written with shortest round-trip formatting.
pub fn write_map_csv<W: Write>(records: &[CompatibilityRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if records.is_empty() {
        w.write_record(MAP_CSV_HEADER)?;
    }
    for r in records {
        w.serialize(Row {
            trajectory_id: r.trajectory_id.clone(),
            step: r.step_index,
            novelty: r.novelty,
            likelihood: r.likelihood,
            score: r.score,
        })?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

pub fn read_map_csv<R: Read>(input: R) -> Result<Vec<CompatibilityRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(MAP_CSV_HEADER) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {}", MAP_CSV_HEADER.join(",")),
        });
    }
    r.deserialize::<Row>()
        .map(|row| {
            let row = row?;
            Ok(CompatibilityRecord {
                trajectory_id: row.trajectory_id,
                step_index: row.step,
                novelty: row.novelty,
                likelihood: row.likelihood,
                score: row.score,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compat::tests::constant_ensemble;
    use crate::demo::{ActionVector, StateVector, Step, Trajectory};

    fn three_step_set() -> DemonstrationSet {
        let steps = (0..3)
            .map(|i| Step {
                state: StateVector::new(vec![i as f64]).unwrap(),
                action: ActionVector::new(vec![0.1 * i as f64 + 1.0 / 3.0]).unwrap(),
            })
            .collect();
        let t = Trajectory::new("t0", "op", "k", steps, true, 10).unwrap();
        DemonstrationSet::new("s", "k", vec![t]).unwrap()
    }

    #[test]
    fn map_cardinality_and_csv_round_trip() {
        let e = constant_ensemble(1, &[vec![0.0], vec![0.01]]);
        let map = build_map(&e, &three_step_set(), &Thresholds::SQUARE_NUT).unwrap();
        assert_eq!(map.records.len(), 3);
        assert_eq!(map.base_policy_fingerprint, e.fingerprint());
        let text = map.to_csv().unwrap();
        assert!(text.starts_with("trajectory_id,step,novelty,likelihood,score\n"));
        let back = read_map_csv(text.as_bytes()).unwrap();
        assert_eq!(back, map.records);
    }

    #[test]
    fn empty_map_has_header_and_bad_header_is_rejected() {
        let mut buf = Vec::new();
        write_map_csv(&[], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "trajectory_id,step,novelty,likelihood,score\n"
        );
        assert!(read_map_csv("a,b\n1,2\n".as_bytes()).is_err());
    }
}
