use rand::seq::index;

use super::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::seq::TokenSeq;

/// Denominator floor for relative errors.
///
/// `rel = |analytic - numeric| / max(|analytic|, |numeric|, REL_ERROR_FLOOR)`
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Compares `analytic` with central differences of `f` on `coords` random coordinates.
pub fn check_gradient(
    f: impl Fn(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Precondition(format!(
            "finite-difference step must lie in [1e-7, 1e-3], got {h}"
        )));
    }
    if analytic.len() != params.len() {
        return Err(Error::Internal("gradient length mismatch".into()));
    }
    let n = coords.min(params.len());
    let mut rng = rng_from_seed(seed);
    let mut picked = index::sample(&mut rng, params.len(), n).into_vec();
    picked.sort_unstable();
    let mut x = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coord: picked.first().copied().unwrap_or(0),
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: n,
    };
    for &c in &picked {
        let orig = x[c];
        x[c] = orig + h;
        let up = f(&x);
        x[c] = orig - h;
        let down = f(&x);
        x[c] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[c];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        if rel > report.max_rel_error || !rel.is_finite() {
            report = GradCheckReport {
                max_rel_error: rel,
                worst_coord: c,
                analytic: a,
                numeric,
                coords_checked: n,
            };
        }
    }
    Ok(report)
}

/// Finite-difference check of [`ModelCheckpoint::grad_loglik`].
pub fn gradient_check(
    ckpt: &ModelCheckpoint,
    condition: &TokenSeq,
    output: &TokenSeq,
    h: f64,
    coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let analytic = ckpt.grad_loglik(condition, output)?;
    let probe = std::cell::RefCell::new(ckpt.clone());
    let f = |x: &[f64]| {
        let mut local = probe.borrow_mut();
        local.params.copy_from_slice(x);
        // inputs were validated by grad_loglik above
        local
            .sequence_logprob(condition, output)
            .map(|t| t.total())
            .unwrap_or(f64::NAN)
    };
    check_gradient(f, &ckpt.params, &analytic, h, coords, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::seq::EOS;

    fn setup(seed: u64) -> (ModelCheckpoint, TokenSeq, TokenSeq) {
        let cfg = ModelConfig {
            vocab_size: 9,
            hidden_dim: 7,
            max_len: 16,
            ..Default::default()
        };
        let mut ck = init_model(&cfg, seed).unwrap();
        // larger weights so the check is not trivially near-linear
        ck.params.iter_mut().for_each(|p| *p *= 10.0);
        (ck, TokenSeq::new(vec![4, 6, 5]), TokenSeq::new(vec![3, 8, 7, 3, EOS]))
    }

    #[test]
    fn fresh_models_pass() {
        for s in 0..20 {
            let (ck, c, o) = setup(s);
            let r = gradient_check(&ck, &c, &o, 1e-5, 50, s).unwrap();
            assert!(r.max_rel_error < 1e-4, "seed {s}: {r:?}");
            assert_eq!(r.coords_checked, 50);
        }
    }

    #[test]
    fn step_out_of_range_rejected() {
        let (ck, c, o) = setup(0);
        assert!(matches!(
            gradient_check(&ck, &c, &o, 0.0, 10, 0),
            Err(Error::Precondition(_))
        ));
        assert!(gradient_check(&ck, &c, &o, 1e-2, 10, 0).is_err());
    }

    #[test]
    fn truncation_error_scales_quadratically() {
        let (ck, c, o) = setup(3);
        let analytic = ck.grad_loglik(&c, &o).unwrap();
        let f = |x: &[f64]| {
            let mut m = ck.clone();
            m.params.copy_from_slice(x);
            m.sequence_logprob(&c, &o).unwrap().total()
        };
        // pick the coordinate with the largest gradient to stay in the smooth regime
        let coord = (0..analytic.len())
            .max_by(|&a, &b| analytic[a].abs().total_cmp(&analytic[b].abs()))
            .unwrap();
        let err = |h: f64| {
            let mut x = ck.params.clone();
            x[coord] += h;
            let up = f(&x);
            x[coord] -= 2.0 * h;
            let down = f(&x);
            ((up - down) / (2.0 * h) - analytic[coord]).abs()
        };
        let ratio = err(2e-3) / err(1e-3);
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }
}
