//! Central-difference verification of prompt gradients through the full
//! reconstruct → pool → backbone → loss chain.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::FrozenBackbone;
use crate::error::Result;
use crate::prompt::SoftPrompt;
use crate::trainer::{batch_gradients, evaluate, EncodedExample};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_COORDS: usize = 200;
/// Denominator floor of the relative error, so coordinates whose true
/// gradient is zero are judged on absolute error.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCheck {
    pub name: String,
    pub size: usize,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per group; groups with fewer entries are checked exhaustively.
    pub coords: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            coords: DEFAULT_COORDS,
            seed: 0,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

pub fn gradcheck(prompt: &SoftPrompt, bb: &FrozenBackbone, batch: &[EncodedExample], opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let (_, analytic) = batch_gradients(prompt, bb, batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let names: Vec<&str> = prompt.groups().iter().map(|g| g.0).collect();
    let mut groups = Vec::with_capacity(names.len());

    for (gi, name) in names.iter().enumerate() {
        let size = analytic[gi].len();
        let coords: Vec<usize> = if size <= opts.coords {
            (0..size).collect()
        } else {
            let mut c: Vec<usize> = index::sample(&mut rng, size, opts.coords).into_iter().collect();
            c.sort_unstable();
            c
        };
        let mut max_err: f64 = 0.0;
        for &c in &coords {
            let mut plus = prompt.clone();
            plus.groups_mut()[gi].as_mut_slice()[c] += opts.step;
            let mut minus = prompt.clone();
            minus.groups_mut()[gi].as_mut_slice()[c] -= opts.step;
            let (lp, _) = evaluate(&plus, bb, batch)?;
            let (lm, _) = evaluate(&minus, bb, batch)?;
            let numeric = (lp - lm) / (2.0 * opts.step);
            max_err = max_err.max(relative_error(analytic[gi].as_slice()[c], numeric));
        }
        groups.push(GroupCheck {
            name: name.to_string(),
            size,
            coords_checked: coords.len(),
            max_rel_error: max_err,
            passed: max_err <= opts.tolerance,
        });
    }
    Ok(GradcheckReport {
        step: opts.step,
        tolerance: opts.tolerance,
        groups,
    })
}
