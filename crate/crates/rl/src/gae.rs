//! Generalized advantage estimation over one contiguous trajectory segment.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RlError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaeConfig {
    pub gamma: f64,
    pub lambda_gae: f64,
}

impl Default for GaeConfig {
    fn default() -> Self {
        GaeConfig { gamma: 0.99, lambda_gae: 0.95 }
    }
}

impl GaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) || !(0.0..=1.0).contains(&self.lambda_gae) {
            return Err(RlError::Usage(format!("need gamma in (0, 1) and lambda_gae in [0, 1], got {self:?}")));
        }
        Ok(())
    }
}

/// One segment of transitions in time order.
///
/// After step `t` the episode either continues (the next value is `values[t + 1]`),
/// terminates (next value 0), is truncated (next value `truncation_values[t]`),
/// or, at the last step, is cut by the batch end (next value `bootstrap_value`).
#[derive(Debug, Clone, Copy)]
pub struct Segment<'a> {
    pub rewards: &'a [f64],
    pub values: &'a [f64],
    pub terminated: &'a [bool],
    pub truncated: &'a [bool],
    pub truncation_values: &'a [f64],
    pub bootstrap_value: f64,
}

/// Returns `(advantages, returns)` with `returns = advantages + values`.
pub fn compute_gae(seg: Segment<'_>, cfg: GaeConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = seg.rewards.len();
    if [seg.values.len(), seg.terminated.len(), seg.truncated.len(), seg.truncation_values.len()].iter().any(|&l| l != n) {
        return Err(RlError::Shape("GAE inputs have different lengths".into()));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let (next_value, carry) = if seg.terminated[t] {
            (0.0, 0.0)
        } else if seg.truncated[t] {
            (seg.truncation_values[t], 0.0)
        } else if t + 1 == n {
            (seg.bootstrap_value, 0.0)
        } else {
            (seg.values[t + 1], next_adv)
        };
        let delta = seg.rewards[t] + cfg.gamma * next_value - seg.values[t];
        adv[t] = delta + cfg.gamma * cfg.lambda_gae * carry;
        next_adv = adv[t];
    }
    let returns = adv.iter().zip(seg.values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg<'a>(r: &'a [f64], v: &'a [f64], term: &'a [bool], trunc: &'a [bool], tv: &'a [f64], boot: f64) -> Segment<'a> {
        Segment { rewards: r, values: v, terminated: term, truncated: trunc, truncation_values: tv, bootstrap_value: boot }
    }

    #[test]
    fn zero_values_and_unit_lambda_give_reward_to_go() {
        let r = [1.0, 2.0, 3.0];
        let z = [0.0; 3];
        let f = [false; 3];
        let (a, _) = compute_gae(seg(&r, &z, &f, &f, &z, 0.0), GaeConfig { gamma: 0.5, lambda_gae: 1.0 }).unwrap();
        assert_eq!(a, vec![1.0 + 0.5 * 2.0 + 0.25 * 3.0, 2.0 + 1.5, 3.0]);
    }

    #[test]
    fn zero_lambda_is_one_step_residual() {
        let r = [1.0, -1.0, 0.5];
        let v = [0.2, 0.4, -0.3];
        let f = [false; 3];
        let (a, _) = compute_gae(seg(&r, &v, &f, &f, &[0.0; 3], 2.0), GaeConfig { gamma: 0.9, lambda_gae: 0.0 }).unwrap();
        let expect = [1.0 + 0.9 * 0.4 - 0.2, -1.0 + 0.9 * -0.3 - 0.4, 0.5 + 0.9 * 2.0 + 0.3];
        for (x, y) in a.iter().zip(expect) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn boundaries_reset_and_bootstrap() {
        let r = [1.0, 1.0, 1.0];
        let v = [0.0; 3];
        let term = [true, false, false];
        let trunc = [false, true, false];
        let tv = [0.0, 10.0, 0.0];
        let (a, _) = compute_gae(seg(&r, &v, &term, &trunc, &tv, 100.0), GaeConfig { gamma: 0.5, lambda_gae: 1.0 }).unwrap();
        assert_eq!(a, vec![1.0, 6.0, 51.0]);
    }
}
