//! Randomised finite-difference suite for the prompt losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{finite_diff_check, GradCheckReport, Tensor};
use crate::encoders::{normal_tensor, TextConfig, TextEncoder};
use crate::tuning::{LossInputs, LossKind, PromptLossObjective};

pub const SUITE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CaseShape {
    pub d: usize,
    pub t: usize,
    pub grid: usize,
}

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub case: usize,
    pub shape: CaseShape,
    pub anomaly: GradCheckReport,
    pub divergence: GradCheckReport,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.anomaly.passed && self.divergence.passed
    }

    pub fn max_rel_error(&self) -> f64 {
        self.anomaly.max_rel_error().max(self.divergence.max_rel_error())
    }
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let mut t = normal_tensor(rng, &[n, d], 1.0);
    for i in 0..n {
        let row = t.row_mut(i);
        let norm = row.iter().map(|&x| x * x).sum::<f32>().sqrt().max(1e-6);
        row.iter_mut().for_each(|x| *x /= norm);
    }
    t
}

/// Check `L_ano` and `L_div` gradients w.r.t. both learnable prompts for one
/// random configuration (d ≤ 16, t ≤ 4, grid ≤ 6).
pub fn run_case(case: usize, seed: u64, tolerance: f64) -> CaseReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (case as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let shape = CaseShape {
        d: 4 * rng.random_range(1..=4usize),
        t: rng.random_range(1..=4usize),
        grid: rng.random_range(2..=6usize),
    };
    let text = TextEncoder::init(
        TextConfig {
            vocab: 16,
            width: shape.d,
            depth: 1,
            max_len: 4,
            mlp_hidden: 2 * shape.d,
        },
        &mut rng,
    );
    let n = shape.grid * shape.grid;
    let features = unit_rows(&mut rng, n, shape.d);
    let anomaly_mask: Vec<u8> = (0..n).map(|_| rng.random_bool(0.3) as u8).collect();
    let normal_mask: Vec<u8> = anomaly_mask.iter().map(|&a| 1 - a).collect();
    let meta_normal: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
    let meta_abnormal: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
    let tau = rng.random_range(0.1..1.0);
    let lnp = normal_tensor(&mut rng, &[shape.t, shape.d], 1.0);
    let lap = normal_tensor(&mut rng, &[shape.t, shape.d], 1.0);
    let inputs = LossInputs {
        features: &features,
        anomaly_mask: &anomaly_mask,
        normal_mask: &normal_mask,
        meta_normal: &meta_normal,
        meta_abnormal: &meta_abnormal,
        tau,
    };
    let check = |kind| {
        let obj = PromptLossObjective {
            text: &text,
            inputs: inputs.clone(),
            kind,
        };
        finite_diff_check(&obj, &[lnp.clone(), lap.clone()], tolerance)
    };
    CaseReport {
        case,
        shape,
        anomaly: check(LossKind::Anomaly),
        divergence: check(LossKind::Divergence),
    }
}

pub fn run_suite(cases: usize, seed: u64, tolerance: f64) -> Vec<CaseReport> {
    (0..cases).map(|c| run_case(c, seed, tolerance)).collect()
}
