//! User-runnable numerical self-checks.

use nefem::driver::{gradient_check, GradCheckReport};
use nefem::quadrature::{check_monomials, embedded_degrees, reference_rule};

use crate::CliError;

/// Envelope gradient against central differences; one line per seed.
pub fn gradcheck(seeds: &[u64], step: f64, tol: f64, dims: [usize; 4], scales: [u32; 2]) -> Result<bool, CliError> {
    let mut ok = true;
    let mut worst = 0.0f64;
    for &seed in seeds {
        let r: GradCheckReport = gradient_check(seed, step, dims, scales)?;
        let pass = r.relative <= tol;
        ok &= pass;
        worst = worst.max(r.relative);
        println!(
            "seed {seed}: {} parameters, max |g - fd| {:.3e}, max |fd| {:.3e}, relative {:.3e} {}",
            r.checked,
            r.max_deviation,
            r.max_gradient,
            r.relative,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    println!("max relative gradient deviation {worst:.3e} (tolerance {tol:.1e})");
    Ok(ok)
}

/// Monomial exactness of every embedded rule. `perturb` scales the first
/// weight of each rule by `1 + perturb` before checking.
pub fn quadcheck(tol: f64, perturb: f64) -> Result<bool, CliError> {
    let mut ok = true;
    for d in embedded_degrees() {
        let mut rule = reference_rule(d)?.clone();
        rule.weights[0] *= 1.0 + perturb;
        let c = check_monomials(&rule);
        let pass = c.max_rel_err <= tol && rule.weights.iter().all(|&w| w > 0.0);
        ok &= pass;
        println!(
            "degree {d:2}: {:3} points, {:3} monomials, max relative error {:.3e} at x^{} y^{} {}",
            rule.len(),
            c.monomials,
            c.max_rel_err,
            c.worst.0,
            c.worst.1,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    Ok(ok)
}
