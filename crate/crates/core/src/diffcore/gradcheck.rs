use super::params::ParameterStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Worst disagreement found by [`finite_diff_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    /// `name[index]` of the worst scalar.
    pub worst: String,
    /// Analytic and central-difference derivative at the worst scalar.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

/// Compares tape gradients against central differences for every scalar in
/// `point`. `f` rebuilds the computation from a store and returns the tape
/// with its scalar output; it must be deterministic.
///
/// Relative error is `|analytic - central| / max(|analytic|, |central|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, point: &ParameterStore, step: f64) -> Result<f64>
where
    F: FnMut(&ParameterStore) -> Result<(Tape, Var)>,
{
    finite_diff_report(f, point, step).map(|r| r.max_rel_error)
}

pub fn finite_diff_report<F>(f: F, point: &ParameterStore, step: f64) -> Result<FiniteDiffReport>
where
    F: FnMut(&ParameterStore) -> Result<(Tape, Var)>,
{
    finite_diff_report_with(
        f,
        point,
        &FiniteDiffOptions {
            steps: vec![step],
            scale_floor: 0.0,
        },
    )
}

/// Settings for [`finite_diff_report_with`].
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDiffOptions {
    /// Each scalar is differenced at every step and scored by the closest
    /// estimate, so a ReLU kink inside one step or roundoff at the smallest
    /// step does not mask a correct gradient.
    pub steps: Vec<f64>,
    /// The error denominator is at least `scale_floor` times the largest
    /// analytic gradient magnitude (and at least 1e-8).
    pub scale_floor: f64,
}

pub fn finite_diff_report_with<F>(
    mut f: F,
    point: &ParameterStore,
    opts: &FiniteDiffOptions,
) -> Result<FiniteDiffReport>
where
    F: FnMut(&ParameterStore) -> Result<(Tape, Var)>,
{
    if opts.steps.is_empty() || opts.steps.iter().any(|&h| !(h > 0.0)) {
        return Err(Error::contract(format!(
            "finite-difference steps must be positive, got {:?}",
            opts.steps
        )));
    }
    let (tape, out) = f(point)?;
    let base = tape.value(out).item();
    if !base.is_finite() {
        return Err(Error::Numerical(format!(
            "function value {base} at the base point"
        )));
    }
    let grads = tape.backward(out)?;
    drop(tape);

    let mut eval = |store: &ParameterStore| -> Result<f64> {
        let (t, v) = f(store)?;
        let y = t.value(v).item();
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::Numerical(format!(
                "function value {y} during finite differences"
            )))
        }
    };

    let names: Vec<String> = point.params().map(|(n, _)| n.clone()).collect();
    let largest = names
        .iter()
        .filter_map(|n| grads.param(n))
        .map(|g| g.max_abs())
        .fold(0.0, f64::max);
    let floor = (opts.scale_floor * largest).max(1e-8);
    let mut work = point.clone();
    let mut report = FiniteDiffReport {
        max_rel_error: 0.0,
        worst: String::new(),
        worst_values: (0.0, 0.0),
        checked: 0,
    };
    for name in names {
        let len = point.value(&name).map_or(0, |a| a.len());
        let analytic = grads.param(&name);
        for i in 0..len {
            let orig = point.value(&name).unwrap().data()[i];
            let a = analytic.map_or(0.0, |g| g.data()[i]);
            let mut best = (f64::INFINITY, 0.0);
            for &step in &opts.steps {
                work.get_mut(&name).unwrap().value.data_mut()[i] = orig + step;
                let plus = eval(&work)?;
                work.get_mut(&name).unwrap().value.data_mut()[i] = orig - step;
                let minus = eval(&work)?;
                work.get_mut(&name).unwrap().value.data_mut()[i] = orig;
                let central = (plus - minus) / (2.0 * step);
                let rel = (a - central).abs() / a.abs().max(central.abs()).max(floor);
                if rel < best.0 {
                    best = (rel, central);
                }
            }
            report.checked += 1;
            if best.0 > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = best.0;
                report.worst = format!("{name}[{i}]");
                report.worst_values = (a, best.1);
            }
        }
    }
    Ok(report)
}
