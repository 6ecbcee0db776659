//! Central finite-difference verification of analytic gradients.
//!
//! The checker rebuilds the graph from scratch for every probe, so the
//! loss builder must be a pure function of its input tensors. Checks run
//! in f64 only; f32 cannot separate truncation error from roundoff at
//! usable step sizes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Builds a scalar loss from leaf variables, one per checked input.
pub type LossBuilder<'a> = &'a dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Central-difference half step.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Elements probed per input tensor; larger tensors are subsampled
    /// deterministically.
    pub max_probes: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-5, tol: 1e-4, max_probes: 48, seed: 0x5eed }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradOutcome {
    pub max_rel_err: f64,
    pub probes: usize,
}

impl GradCheck {
    /// Compare analytic gradients of `build` at `inputs` against central
    /// finite differences. Fails fast on any graph error; returns the
    /// worst relative error over all probed elements.
    pub fn run(&self, inputs: &[Tensor<f64>], build: LossBuilder) -> Result<GradOutcome> {
        let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> =
                tensors.iter().map(|t| g.leaf(t.clone())).collect::<Result<_>>()?;
            let loss = build(&mut g, &vars)?;
            g.value(loss).scalar_value()
        };

        // Analytic pass.
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect::<Result<_>>()?;
        let loss = build(&mut g, &vars)?;
        let grads = g.backward(loss)?;

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut outcome = GradOutcome::default();
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).expect("leaves always receive gradients");
            let numel = input.numel();
            let probes: Vec<usize> = if numel <= self.max_probes {
                (0..numel).collect()
            } else {
                // distinct deterministic subsample
                let mut picked = std::collections::BTreeSet::new();
                while picked.len() < self.max_probes {
                    picked.insert(rng.gen_range(0..numel));
                }
                picked.into_iter().collect()
            };
            for j in probes {
                let base = input.data()[j];
                work[i].data_mut()[j] = base + self.step;
                let up = eval(&work)?;
                work[i].data_mut()[j] = base - self.step;
                let down = eval(&work)?;
                work[i].data_mut()[j] = base;
                let fd = (up - down) / (2.0 * self.step);
                let an = analytic.data()[j];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                if rel > outcome.max_rel_err {
                    outcome.max_rel_err = rel;
                }
                outcome.probes += 1;
            }
        }
        Ok(outcome)
    }

    /// `run` over several random instances produced by `make_case`;
    /// returns the worst outcome.
    pub fn run_cases(
        &self,
        cases: usize,
        mut make_case: impl FnMut(usize, &mut ChaCha8Rng) -> Vec<Tensor<f64>>,
        build: LossBuilder,
    ) -> Result<GradOutcome> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut worst = GradOutcome::default();
        for c in 0..cases {
            let inputs = make_case(c, &mut rng);
            let got = self.run(&inputs, build)?;
            if got.max_rel_err > worst.max_rel_err {
                worst.max_rel_err = got.max_rel_err;
            }
            worst.probes += got.probes;
        }
        Ok(worst)
    }
}
