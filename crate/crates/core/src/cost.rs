//! Development-time estimates for three design-iteration strategies:
//! simulate-mostly with occasional synthesis, synthesis only, and full-system
//! simulation only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Iteration counts and per-iteration durations in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostModelParams {
    /// Simulated design iterations.
    pub num_sim: f64,
    /// Synthesized design iterations.
    pub num_synth: f64,
    /// Simulator compile time per iteration.
    pub compile_time: f64,
    /// Simulated inference time per iteration.
    pub sim_inference_time: f64,
    /// Logic synthesis time per iteration.
    pub synth_time: f64,
    /// On-hardware inference time per iteration.
    pub hw_inference_time: f64,
}

impl CostModelParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("num_sim", self.num_sim),
            ("num_synth", self.num_synth),
            ("compile_time", self.compile_time),
            ("sim_inference_time", self.sim_inference_time),
            ("synth_time", self.synth_time),
            ("hw_inference_time", self.hw_inference_time),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::param(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }

    fn sim_iteration(&self) -> f64 {
        self.compile_time + self.sim_inference_time
    }

    fn synth_iteration(&self) -> f64 {
        self.synth_time + self.hw_inference_time
    }
}

/// `#Sim * (C + IS) + #Synth * (S + I)`.
pub fn et_secda(p: &CostModelParams) -> f64 {
    p.num_sim * p.sim_iteration() + p.num_synth * p.synth_iteration()
}

/// `(#Sim + #Synth) * (S + I)`.
pub fn et_synth_only(p: &CostModelParams) -> f64 {
    (p.num_sim + p.num_synth) * p.synth_iteration()
}

/// `(#Sim + #Synth) * (C + IS)`.
pub fn et_fullsim_only(p: &CostModelParams) -> f64 {
    (p.num_sim + p.num_synth) * p.sim_iteration()
}

/// The three estimates and their ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: CostModelParams,
    pub et_secda: f64,
    pub et_synth_only: f64,
    pub et_fullsim_only: f64,
    pub synth_only_over_secda: Option<f64>,
    pub fullsim_only_over_secda: Option<f64>,
    pub synth_only_over_fullsim_only: Option<f64>,
    /// One synthesis iteration over one simulation iteration, `(S + I) / (C + IS)`.
    pub per_iteration_ratio: Option<f64>,
    /// Synthesis time over simulator compile time, `S / C`.
    pub compile_ratio: Option<f64>,
}

fn ratio(a: f64, b: f64) -> Option<f64> {
    (b != 0.0).then(|| a / b)
}

pub fn evaluate(p: &CostModelParams) -> Result<CostReport> {
    p.validate()?;
    let (s, y, f) = (et_secda(p), et_synth_only(p), et_fullsim_only(p));
    Ok(CostReport {
        params: *p,
        et_secda: s,
        et_synth_only: y,
        et_fullsim_only: f,
        synth_only_over_secda: ratio(y, s),
        fullsim_only_over_secda: ratio(f, s),
        synth_only_over_fullsim_only: ratio(y, f),
        per_iteration_ratio: ratio(p.synth_iteration(), p.sim_iteration()),
        compile_ratio: ratio(p.synth_time, p.compile_time),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> CostModelParams {
        CostModelParams {
            num_sim: 10.0,
            num_synth: 1.0,
            compile_time: 2.0,
            sim_inference_time: 1.0,
            synth_time: 50.0,
            hw_inference_time: 1.0,
        }
    }

    #[test]
    fn zeros() {
        let p = CostModelParams::default();
        assert_eq!((et_secda(&p), et_synth_only(&p), et_fullsim_only(&p)), (0.0, 0.0, 0.0));
        assert_eq!(evaluate(&p).unwrap().synth_only_over_secda, None);
    }

    #[test]
    fn substitution() {
        let p = example();
        assert_eq!(et_secda(&p), 81.0);
        assert_eq!(et_synth_only(&p), 561.0);
        assert_eq!(et_fullsim_only(&p), 33.0);
    }

    #[test]
    fn negative_rejected() {
        let mut p = example();
        p.synth_time = -1.0;
        assert!(evaluate(&p).is_err());
    }
}
