//! Detect, re-run once, accept.
//!
//! Each inference is checked by the detector. A flagged inference is executed
//! a second time and the second answer is accepted even if it is flagged
//! again: a transient fault is gone on the re-run, so a repeated flag points
//! at a hard input rather than an error.

use serde::{Deserialize, Serialize};

use crate::detector::{Forest, ThresholdPolicy};
use crate::error::{CcedError, Result};
use crate::fault::{faulty_forward, sample_fault, FaultSpec, RngStream};
use crate::model::{forward, InferenceResult, ModelSpec, Parameters};
use crate::signals::check_features;

/// Which fault, if any, hits each execution.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)] // lives on the stack for one input
pub enum FaultEnvironment {
    None,
    /// Hits the next execution only, then disappears.
    Transient(FaultSpec),
    /// Every execution gets a freshly sampled fault.
    Always(RngStream),
}

impl FaultEnvironment {
    fn execute(&mut self, spec: &ModelSpec, params: &Parameters, input: &[f32]) -> Result<Executed> {
        match self {
            FaultEnvironment::None => Ok(Executed {
                result: forward(spec, params, input)?,
                fault: None,
            }),
            FaultEnvironment::Transient(fault) => {
                let fault = *fault;
                *self = FaultEnvironment::None;
                Ok(Executed {
                    result: faulty_forward(spec, params, input, fault)?,
                    fault: Some(fault),
                })
            }
            FaultEnvironment::Always(rng) => {
                let fault = sample_fault(rng, params.len())?;
                Ok(Executed {
                    result: faulty_forward(spec, params, input, fault)?,
                    fault: Some(fault),
                })
            }
        }
    }
}

struct Executed {
    result: InferenceResult,
    fault: Option<FaultSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    AcceptedFirst,
    CorrectedByRerun,
    PersistentFlagIgnored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    /// `None` only if the accepted execution was itself degenerate.
    pub final_class: Option<usize>,
    pub first_class: Option<usize>,
    pub inferences_used: u8,
    pub first_flag: bool,
    pub second_flag: Option<bool>,
    pub disposition: Disposition,
    pub faults: Vec<FaultSpec>,
}

pub fn run_with_cced(
    spec: &ModelSpec,
    params: &Parameters,
    forest: &Forest,
    policy: &ThresholdPolicy,
    input: &[f32],
    env: &mut FaultEnvironment,
) -> Result<RunOutcome> {
    if !policy.is_calibrated() {
        return Err(CcedError::domain("the detector threshold has not been calibrated"));
    }
    let first = env.execute(spec, params, input)?;
    let first_flag = policy.flags(forest.score(&check_features(&first.result))?);
    let mut faults: Vec<FaultSpec> = first.fault.into_iter().collect();
    if !first_flag {
        return Ok(RunOutcome {
            final_class: first.result.predicted_class,
            first_class: first.result.predicted_class,
            inferences_used: 1,
            first_flag,
            second_flag: None,
            disposition: Disposition::AcceptedFirst,
            faults,
        });
    }
    let second = env.execute(spec, params, input)?;
    let second_flag = policy.flags(forest.score(&check_features(&second.result))?);
    faults.extend(second.fault);
    Ok(RunOutcome {
        final_class: second.result.predicted_class,
        first_class: first.result.predicted_class,
        inferences_used: 2,
        first_flag,
        second_flag: Some(second_flag),
        disposition: if second_flag {
            Disposition::PersistentFlagIgnored
        } else {
            Disposition::CorrectedByRerun
        },
        faults,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::ForestConfig;

    fn threshold_forest(feature: usize, cut: f32) -> Forest {
        // flags (score 1.0) when check_signal[feature] >= cut
        let mut x = vec![vec![0.0, 0.0], vec![cut, cut]];
        x[0][feature] = cut - 0.5;
        x[1][feature] = cut + 0.5;
        x[0][1 - feature] = 0.5;
        x[1][1 - feature] = 0.5;
        let cfg = ForestConfig {
            tree_count: 1,
            bootstrap: false,
            ..ForestConfig::default()
        };
        Forest::fit(&x, &[false, true], &cfg).unwrap()
    }

    fn calibrated(threshold: f64) -> ThresholdPolicy {
        ThresholdPolicy {
            threshold,
            fp_budget: Some(0.1),
            achieved_fp: Some(0.1),
        }
    }

    fn model() -> (ModelSpec, Parameters) {
        // logits = x, so the class follows the larger input
        let spec = ModelSpec::new(vec![2, 2]).unwrap();
        let p = Parameters::from_buffer(&spec, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        (spec, p)
    }

    #[test]
    fn silent_detector_accepts_first() {
        let (spec, p) = model();
        let forest = threshold_forest(1, 2.0); // never reached by probabilities
        let out = run_with_cced(&spec, &p, &forest, &calibrated(0.5), &[3.0, 1.0], &mut FaultEnvironment::None).unwrap();
        assert_eq!(out.disposition, Disposition::AcceptedFirst);
        assert_eq!(out.inferences_used, 1);
        assert_eq!(out.final_class, Some(0));
        assert_eq!(out.second_flag, None);
    }

    #[test]
    fn transient_fault_is_corrected() {
        let (spec, p) = model();
        // flag whenever class 1 gets more than 0.5 probability
        let forest = threshold_forest(1, 0.5);
        let input = [3.0, 1.0];
        // sign flip of W[0][0] turns logit 0 into -3
        let mut env = FaultEnvironment::Transient(FaultSpec::new(0, 31));
        let out = run_with_cced(&spec, &p, &forest, &calibrated(0.5), &input, &mut env).unwrap();
        assert_eq!(out.first_class, Some(1));
        assert_eq!(out.disposition, Disposition::CorrectedByRerun);
        assert_eq!(out.inferences_used, 2);
        assert_eq!(out.final_class, Some(0));
        assert_eq!(out.faults, vec![FaultSpec::new(0, 31)]);
        assert!(matches!(env, FaultEnvironment::None));
    }

    #[test]
    fn persistent_flag_is_ignored() {
        let (spec, p) = model();
        let forest = threshold_forest(1, 0.5);
        let input = [1.0, 3.0];
        let out = run_with_cced(&spec, &p, &forest, &calibrated(0.5), &input, &mut FaultEnvironment::None).unwrap();
        assert_eq!(out.disposition, Disposition::PersistentFlagIgnored);
        assert_eq!(out.second_flag, Some(true));
        assert_eq!(out.final_class, Some(1));
    }

    #[test]
    fn uncalibrated_policy_is_refused() {
        let (spec, p) = model();
        let forest = threshold_forest(0, 0.5);
        let r = run_with_cced(&spec, &p, &forest, &ThresholdPolicy::default_rule(), &[1.0, 0.0], &mut FaultEnvironment::None);
        assert!(r.is_err());
    }
}
