//! Finite-difference check of the full head plus multi-task loss, over a
//! sweep of random instances.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::head::{init_params, ForwardPass, HeadDims, HeadParams};
use crate::losses::{aux_cross_entropy, main_loss_logits, mtl_loss, LossConfig};
use crate::numeric::finite_difference_check;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteSpec {
    pub seeds: u64,
    pub layers: usize,
    pub dim: usize,
    pub frames: Vec<usize>,
    pub classes: Vec<usize>,
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            seeds: 20,
            layers: 12,
            dim: 16,
            frames: vec![1, 3, 7],
            classes: vec![6, 7],
            eps: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub seed: u64,
    pub frames: usize,
    pub classes: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Parameter block holding the worst coordinate.
    pub worst: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub spec: SuiteSpec,
    pub cases: Vec<CaseResult>,
    #[serde(serialize_with = "secs")]
    pub elapsed: Duration,
}

fn secs<S: serde::Serializer>(d: &Duration, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64())
}

impl SuiteReport {
    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst_case(&self) -> Option<&CaseResult> {
        self.cases
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        !self.cases.is_empty() && self.cases.iter().all(|c| c.max_rel_error < self.spec.tolerance)
    }
}

/// One random instance: hidden states, parameters, targets and loss
/// settings, all drawn from `seed`.
#[derive(Debug, Clone)]
pub struct Instance {
    pub hidden: Tensor,
    pub params: HeadParams,
    pub main_targets: Vec<bool>,
    pub aux_target: usize,
    pub loss: LossConfig,
}

impl Instance {
    pub fn random(seed: u64, layers: usize, frames: usize, dim: usize, classes: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = Tensor::from_fn(vec![layers, frames, dim], |_| rng.sample(StandardNormal))?;
        let dims = HeadDims::new(layers, dim, classes);
        let mut params = init_params(rng.gen(), dims);
        for seg in params.segments_mut() {
            for v in seg.values.iter_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        let main_targets = (0..classes).map(|_| rng.gen_bool(0.5)).collect();
        let aux_target = rng.gen_range(0..2);
        let loss = LossConfig {
            alpha: rng.gen_range(0.1..0.9),
            gamma: f64::from(rng.gen_range(0..=3u8)),
            w_main: rng.gen_range(0.0..1.0),
            ..LossConfig::default()
        };
        Ok(Self {
            hidden,
            params,
            main_targets,
            aux_target,
            loss,
        })
    }

    pub fn objective(&self, params: &HeadParams) -> Result<f64> {
        let pass = ForwardPass::run(&self.hidden, params)?;
        let out = pass.output();
        let main = main_loss_logits(&out.main_logits, &self.main_targets, None, &self.loss)?;
        let aux = aux_cross_entropy(&out.aux_logits, self.aux_target, None)?;
        Ok(mtl_loss(main.value, aux.value, self.loss.w_main))
    }

    pub fn gradient(&self) -> Result<HeadParams> {
        let pass = ForwardPass::run(&self.hidden, &self.params)?;
        let out = pass.output();
        let w = self.loss.w_main;
        let main = main_loss_logits(&out.main_logits, &self.main_targets, None, &self.loss)?;
        let aux = aux_cross_entropy(&out.aux_logits, self.aux_target, None)?;
        let d_main: Vec<f64> = main.grad.iter().map(|g| w * g).collect();
        let d_aux: Vec<f64> = aux.grad.iter().map(|g| (1.0 - w) * g).collect();
        pass.backward(&d_main, &d_aux)
    }
}

fn segment_of(params: &HeadParams, mut index: usize) -> &'static str {
    for seg in params.segments() {
        if index < seg.values.len() {
            return seg.name;
        }
        index -= seg.values.len();
    }
    "?"
}

pub fn check_instance(inst: &Instance, eps: f64) -> Result<(usize, f64, &'static str)> {
    let dims = inst.params.dims();
    let analytic = inst.gradient()?.to_flat();
    let mut failure = None;
    let check = finite_difference_check(
        |x| match HeadParams::from_flat(dims, x).and_then(|p| inst.objective(&p)) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        &inst.params.to_flat(),
        &analytic,
        eps,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let check = check?;
    Ok((
        check.coordinates,
        check.max_rel_error,
        segment_of(&inst.params, check.worst_index),
    ))
}

/// Runs every (seed, frames, classes) combination of `spec`.
pub fn run_suite(spec: &SuiteSpec) -> Result<SuiteReport> {
    if spec.seeds == 0 || spec.frames.is_empty() || spec.classes.is_empty() {
        return Err(Error::Config("gradient suite needs seeds, frame counts and class counts".into()));
    }
    let start = Instant::now();
    let mut cases = Vec::new();
    for seed in 0..spec.seeds {
        for &frames in &spec.frames {
            for &classes in &spec.classes {
                let case_seed = seed * 1000 + (frames * 10 + classes) as u64;
                let inst = Instance::random(case_seed, spec.layers, frames, spec.dim, classes)?;
                let (coordinates, max_rel_error, worst) = check_instance(&inst, spec.eps)?;
                cases.push(CaseResult {
                    seed,
                    frames,
                    classes,
                    coordinates,
                    max_rel_error,
                    worst,
                });
            }
        }
    }
    Ok(SuiteReport {
        spec: spec.clone(),
        cases,
        elapsed: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_instance_passes() {
        let inst = Instance::random(3, 12, 3, 16, 7).unwrap();
        let (n, err, _) = check_instance(&inst, 1e-5).unwrap();
        assert_eq!(n, inst.params.num_params());
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn broken_gradient_is_detected() {
        let inst = Instance::random(4, 4, 3, 5, 6).unwrap();
        let dims = inst.params.dims();
        let mut analytic = inst.gradient().unwrap().to_flat();
        analytic[0] += 0.01;
        let check = finite_difference_check(
            |x| inst.objective(&HeadParams::from_flat(dims, x).unwrap()).unwrap(),
            &inst.params.to_flat(),
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error > 1e-3);
        assert_eq!(check.worst_index, 0);
    }

    #[test]
    fn small_suite_reports_every_case() {
        let spec = SuiteSpec {
            seeds: 2,
            layers: 3,
            dim: 4,
            frames: vec![1, 2],
            classes: vec![6],
            ..SuiteSpec::default()
        };
        let report = run_suite(&spec).unwrap();
        assert_eq!(report.cases.len(), 4);
        assert!(report.passed(), "{:?}", report.worst_case());
    }

    #[test]
    fn empty_spec_is_rejected() {
        let spec = SuiteSpec { frames: vec![], ..SuiteSpec::default() };
        assert!(matches!(run_suite(&spec), Err(Error::Config(_))));
    }
}
