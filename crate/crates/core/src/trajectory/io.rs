//! JSON-Lines persistence for datasets and reward sidecars.
//!
//! Dataset files start with a header line `{"n_obs":..,"n_act":..,"gamma":..}`
//! followed by one trajectory per line:
//! `{"obs":[..],"act":[..],"rew":[..]|null,"agg":..,"beta":[..]|null}`.
//! `obs` holds `len + 1` ids: the observation at each step plus the final
//! observation reached after the last action.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetError, StepRewards, Trajectory, Transition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub n_obs: usize,
    pub n_act: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub obs: Vec<usize>,
    pub act: Vec<usize>,
    pub rew: Option<Vec<f64>>,
    pub agg: f64,
    pub beta: Option<Vec<f64>>,
}

impl TrajectoryRecord {
    pub fn from_trajectory(traj: &Trajectory) -> Self {
        let mut obs: Vec<usize> = traj.observations().collect();
        if let Some(last) = traj.transitions.last() {
            obs.push(last.next_observation);
        }
        Self {
            obs,
            act: traj.actions().collect(),
            rew: traj.transitions.iter().map(|tr| tr.reward).collect(),
            agg: traj.aggregated_reward,
            beta: traj.behavior_probs.clone(),
        }
    }

    pub fn into_trajectory(self, index: usize) -> Result<Trajectory, DatasetError> {
        let len = self.act.len();
        if self.obs.len() != len + 1 {
            return Err(DatasetError::LengthMismatch {
                index,
                field: "obs",
                got: self.obs.len(),
                expected: len + 1,
            });
        }
        if let Some(rew) = &self.rew {
            if rew.len() != len {
                return Err(DatasetError::LengthMismatch {
                    index,
                    field: "rew",
                    got: rew.len(),
                    expected: len,
                });
            }
        }
        let transitions = (0..len)
            .map(|t| Transition {
                observation: self.obs[t],
                action: self.act[t],
                reward: self.rew.as_ref().map(|r| r[t]),
                next_observation: self.obs[t + 1],
            })
            .collect();
        Ok(Trajectory {
            transitions,
            aggregated_reward: self.agg,
            ground_truth_rewards: None,
            behavior_probs: self.beta,
        })
    }
}

fn write_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<(), DatasetError> {
    serde_json::to_writer(&mut *w, value).map_err(|e| DatasetError::Io(e.into()))?;
    w.write_all(b"\n")?;
    Ok(())
}

fn parse_line<T: for<'de> Deserialize<'de>>(line: &str, number: usize) -> Result<T, DatasetError> {
    serde_json::from_str(line).map_err(|source| DatasetError::Parse {
        line: number,
        source,
    })
}

impl Dataset {
    /// Writes the dataset as JSON Lines. The ground-truth sidecar is not part
    /// of this artifact; see [`Dataset::strip_rewards`].
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), DatasetError> {
        write_line(
            &mut w,
            &DatasetHeader {
                n_obs: self.n_obs,
                n_act: self.n_act,
                gamma: self.gamma,
            },
        )?;
        for traj in &self.trajectories {
            write_line(&mut w, &TrajectoryRecord::from_trajectory(traj))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, DatasetError> {
        let mut lines = r.lines().enumerate().filter_map(|(i, l)| match l {
            Ok(s) if s.trim().is_empty() => None,
            other => Some((i + 1, other)),
        });
        let (n, first) = lines.next().ok_or(DatasetError::MissingHeader)?;
        let header: DatasetHeader = parse_line(&first?, n)?;
        let mut trajectories = Vec::new();
        for (n, line) in lines {
            let record: TrajectoryRecord = parse_line(&line?, n)?;
            trajectories.push(record.into_trajectory(trajectories.len())?);
        }
        Dataset::new(trajectories, header.n_obs, header.n_act, header.gamma)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        self.write_jsonl(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        Self::read_jsonl(BufReader::new(File::open(path)?))
    }
}

/// Per-trajectory rewards removed from a dataset: the observable per-step
/// channel (`rew`) and the simulator's hidden rewards (`truth`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidecarEntry {
    pub rew: Option<Vec<f64>>,
    pub truth: Option<Vec<f64>>,
}

/// Evaluation-only artifact holding the rewards an estimator must not see.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RewardSidecar {
    pub entries: Vec<SidecarEntry>,
}

impl RewardSidecar {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), DatasetError> {
        for e in &self.entries {
            write_line(&mut w, e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, DatasetError> {
        let mut entries = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(parse_line(&line, i + 1)?);
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        self.write_jsonl(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        Self::read_jsonl(BufReader::new(File::open(path)?))
    }
}

impl StepRewards {
    /// One JSON array of per-step rewards per line, in trajectory order.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), DatasetError> {
        for row in self.rows() {
            write_line(&mut w, row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, DatasetError> {
        let mut rows = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            rows.push(parse_line(&line, i + 1)?);
        }
        Ok(Self::from_rows(rows))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        self.write_jsonl(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        Self::read_jsonl(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "{\"n_obs\":4,\"n_act\":2,\"gamma\":0.99}\n\
{\"obs\":[0,1,3],\"act\":[1,0],\"rew\":null,\"agg\":-0.99,\"beta\":[0.25,0.75]}\n\
{\"obs\":[2,2],\"act\":[0],\"rew\":[1.0],\"agg\":1.0,\"beta\":null}\n";

    #[test]
    fn parses_and_reserializes_byte_identically() {
        let ds = Dataset::read_jsonl(SAMPLE.as_bytes()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.trajectories[0].transitions[1].next_observation, 3);
        assert_eq!(ds.trajectories[1].transitions[0].reward, Some(1.0));
        let mut out = Vec::new();
        ds.write_jsonl(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), SAMPLE);
    }

    #[test]
    fn rejects_bad_lengths_and_unknown_keys() {
        let bad = "{\"n_obs\":4,\"n_act\":2,\"gamma\":1.0}\n{\"obs\":[0],\"act\":[1],\"rew\":null,\"agg\":0.0,\"beta\":null}\n";
        assert!(matches!(
            Dataset::read_jsonl(bad.as_bytes()),
            Err(DatasetError::LengthMismatch { field: "obs", .. })
        ));
        let unknown = "{\"n_obs\":4,\"n_act\":2,\"gamma\":1.0,\"x\":1}\n";
        assert!(matches!(
            Dataset::read_jsonl(unknown.as_bytes()),
            Err(DatasetError::Parse { line: 1, .. })
        ));
        assert!(matches!(Dataset::read_jsonl("".as_bytes()), Err(DatasetError::MissingHeader)));
    }

    #[test]
    fn step_rewards_round_trip() {
        let ch = StepRewards::from_rows(vec![vec![0.5, -0.25], vec![1.0 / 3.0]]);
        let mut buf = Vec::new();
        ch.write_jsonl(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().count(), 2);
        assert_eq!(StepRewards::read_jsonl(buf.as_slice()).unwrap(), ch);
    }
}
