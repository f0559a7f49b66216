//! Equal partition of the diffusion time axis into token stages.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SefiError};

pub const DEFAULT_TOTAL_STEPS: usize = 1000;
pub const DEFAULT_STAGES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSchedule {
    total_steps: usize,
    boundaries: Vec<usize>,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self::new(DEFAULT_TOTAL_STEPS, DEFAULT_STAGES).expect("default schedule is valid")
    }
}

impl StageSchedule {
    /// Splits `[0, total_steps)` into `n_stages` contiguous stages whose
    /// widths differ by at most one; the wider stages come first.
    pub fn new(total_steps: usize, n_stages: usize) -> Result<Self> {
        if total_steps == 0 || n_stages == 0 {
            return Err(SefiError::config(
                "stage schedule needs positive steps and stages",
            ));
        }
        if n_stages > total_steps {
            return Err(SefiError::config(format!(
                "{n_stages} stages cannot partition {total_steps} steps"
            )));
        }
        let base = total_steps / n_stages;
        let extra = total_steps % n_stages;
        let mut boundaries = Vec::with_capacity(n_stages + 1);
        boundaries.push(0);
        for i in 0..n_stages {
            let width = base + usize::from(i < extra);
            boundaries.push(boundaries[i] + width);
        }
        Ok(Self {
            total_steps,
            boundaries,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn n_stages(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    /// Stage containing timestep `t`; indices increase with `t`.
    pub fn stage_of(&self, t: usize) -> Result<usize> {
        if t >= self.total_steps {
            return Err(SefiError::input(format!(
                "timestep {t} outside [0, {})",
                self.total_steps
            )));
        }
        // boundaries[0] = 0 <= t, so the partition point is at least 1.
        Ok(self.boundaries.partition_point(|&b| b <= t) - 1)
    }

    /// Token pair consumed at timestep `t`. Pairs are numbered in sampling
    /// order, so pair 0 covers the noisiest stage.
    pub fn pair_index(&self, t: usize) -> Result<usize> {
        Ok(self.n_stages() - 1 - self.stage_of(t)?)
    }

    pub fn stage_of_sampling_step(
        &self,
        ddim_step: usize,
        ddim_total: usize,
        timestep_map: &[usize],
    ) -> Result<usize> {
        if timestep_map.len() != ddim_total {
            return Err(SefiError::input(format!(
                "timestep map has {} entries, expected {ddim_total}",
                timestep_map.len()
            )));
        }
        let t = *timestep_map.get(ddim_step).ok_or_else(|| {
            SefiError::input(format!(
                "sampling step {ddim_step} outside [0, {ddim_total})"
            ))
        })?;
        self.stage_of(t)
    }
}

/// Ascending timestep grid used by an `n`-step DDIM sampler: `i * (total / n)`.
pub fn uniform_timestep_map(total_steps: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > total_steps {
        return Err(SefiError::input(format!(
            "cannot place {n} sampling steps on {total_steps} timesteps"
        )));
    }
    let stride = total_steps / n;
    Ok((0..n).map(|i| i * stride).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_boundaries() {
        let s = StageSchedule::default();
        assert_eq!(s.boundaries(), &[0, 200, 400, 600, 800, 1000]);
        assert_eq!(s.stage_of(0).unwrap(), 0);
        assert_eq!(s.stage_of(999).unwrap(), 4);
        assert_eq!(s.stage_of(199).unwrap(), 0);
        assert_eq!(s.stage_of(200).unwrap(), 1);
        assert!(s.stage_of(1000).is_err());
    }

    #[test]
    fn pair_index_reverses_stage() {
        let s = StageSchedule::default();
        assert_eq!(s.pair_index(999).unwrap(), 0);
        assert_eq!(s.pair_index(0).unwrap(), 4);
    }

    #[test]
    fn sampling_step_lookup() {
        let s = StageSchedule::default();
        let map = uniform_timestep_map(1000, 50).unwrap();
        assert_eq!(map[49], 980);
        assert_eq!(s.stage_of_sampling_step(49, 50, &map).unwrap(), 4);
        assert_eq!(s.stage_of_sampling_step(0, 50, &map).unwrap(), 0);
        assert_eq!(s.stage_of_sampling_step(0, 1, &[999]).unwrap(), 4);
        assert!(s.stage_of_sampling_step(50, 50, &map).is_err());
        assert!(s.stage_of_sampling_step(0, 2, &[999]).is_err());
    }

    #[test]
    fn invalid_schedules() {
        assert!(StageSchedule::new(0, 5).is_err());
        assert!(StageSchedule::new(10, 0).is_err());
        assert!(StageSchedule::new(3, 5).is_err());
    }

    proptest! {
        #[test]
        fn partition_covers_and_is_monotone(total in 1usize..400, stages in 1usize..20) {
            prop_assume!(stages <= total);
            let s = StageSchedule::new(total, stages).unwrap();
            let mut counts = vec![0usize; stages];
            let mut prev = 0;
            for t in 0..total {
                let i = s.stage_of(t).unwrap();
                prop_assert!(i >= prev);
                prev = i;
                counts[i] += 1;
            }
            prop_assert_eq!(counts.iter().sum::<usize>(), total);
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
        }
    }
}
