//! Incremental object schedules such as `"6-1 with 4 steps"`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncrementalSchedule {
    /// Object ids trained at each step; step 0 is the base step.
    pub steps: Vec<Vec<usize>>,
    pub base_epochs: usize,
    pub incr_epochs: usize,
}

impl IncrementalSchedule {
    pub fn epochs(&self, step: usize) -> usize {
        if step == 0 {
            self.base_epochs
        } else {
            self.incr_epochs
        }
    }

    /// Objects trained at or before `step`.
    pub fn seen(&self, step: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self.steps[..=step].iter().flatten().copied().collect();
        v.sort_unstable();
        v
    }

    pub fn n_objects(&self) -> usize {
        self.steps.iter().map(Vec::len).sum()
    }
}

fn parse_setting(setting: &str) -> Option<(usize, usize, usize)> {
    let words: Vec<&str> = setting.split_whitespace().collect();
    let [bi, "with", s, unit] = words.as_slice() else {
        return None;
    };
    if !matches!(*unit, "step" | "steps") {
        return None;
    }
    let (b, i) = bi.split_once('-')?;
    Some((b.parse().ok()?, i.parse().ok()?, s.parse().ok()?))
}

/// Parses `"B-I with S steps"` (B + I·S objects, S ≥ 1) or `"B-0 with 0 step"`.
/// Steps take objects in dataset order.
pub fn build_schedule(n_objects: usize, setting: &str, base_epochs: usize, incr_epochs: usize) -> Result<IncrementalSchedule> {
    let (b, i, s) = parse_setting(setting)
        .ok_or_else(|| Error::Config(format!("setting {setting:?} is not of the form \"B-I with S steps\"")))?;
    if b == 0 {
        return Err(Error::Config(format!("setting {setting:?} has an empty base step")));
    }
    if (i == 0) != (s == 0) {
        return Err(Error::Config(format!(
            "setting {setting:?}: increment size and step count must both be zero or both positive"
        )));
    }
    if b + i * s != n_objects {
        return Err(Error::Config(format!(
            "setting {setting:?} covers {} objects but the dataset has {n_objects}",
            b + i * s
        )));
    }
    let mut steps = vec![(0..b).collect::<Vec<_>>()];
    steps.extend((0..s).map(|k| (b + k * i..b + (k + 1) * i).collect()));
    Ok(IncrementalSchedule {
        steps,
        base_epochs,
        incr_epochs,
    })
}
