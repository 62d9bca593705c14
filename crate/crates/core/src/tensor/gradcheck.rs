use alloc::string::String;

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{bail, Result};
use crate::math;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
    /// Largest `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, 1e-8)`
    /// over the checked tensors. Insensitive to individual entries whose
    /// true gradient is close to zero.
    pub max_tensor_relative_error: f64,
}

/// Compares tape gradients of a scalar function against central finite
/// differences over every entry of `params`.
///
/// The error per entry is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`;
/// the per-tensor error uses Euclidean norms in the same formula.
/// `f` must be deterministic: recording active dropout, or returning a
/// different value on re-evaluation, is a contract error.
pub fn grad_check<F>(store: &mut ParamStore, params: &[ParamId], step: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    if !(step > 0.0) {
        bail!(Config, "finite-difference step must be positive, got {}", step);
    }
    let eval = |store: &ParamStore, f: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(store, &mut tape)?;
        if tape.is_stochastic() {
            bail!(Contract, "gradient check needs a deterministic function (dropout is active)");
        }
        Ok(tape.scalar(out))
    };

    store.zero_grad();
    let mut tape = Tape::new();
    let out = f(store, &mut tape)?;
    if tape.is_stochastic() {
        bail!(Contract, "gradient check needs a deterministic function (dropout is active)");
    }
    let base = tape.scalar(out);
    tape.backward(out, Some(store))?;
    drop(tape);
    if eval(store, &mut f)?.to_bits() != base.to_bits() {
        bail!(Contract, "function is not deterministic across evaluations");
    }

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        entries_checked: 0,
        max_tensor_relative_error: 0.0,
    };
    for &id in params {
        let n = store.get(id).len();
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let analytic = store.get(id).grad().map_or(0.0, |g| g[i]);
            let orig = store.get(id).values()[i];
            store.get_mut(id).values_mut()[i] = orig + step;
            let plus = eval(store, &mut f)?;
            store.get_mut(id).values_mut()[i] = orig - step;
            let minus = eval(store, &mut f)?;
            store.get_mut(id).values_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let denom = math::abs(analytic).max(math::abs(numeric)).max(1e-8);
            let err = math::abs(analytic - numeric) / denom;
            diff2 += (analytic - numeric) * (analytic - numeric);
            a2 += analytic * analytic;
            n2 += numeric * numeric;
            report.entries_checked += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((String::from(store.name(id)), i));
            }
        }
        let tensor_err = math::sqrt(diff2) / math::sqrt(a2).max(math::sqrt(n2)).max(1e-8);
        report.max_tensor_relative_error = report.max_tensor_relative_error.max(tensor_err);
    }
    Ok(report)
}
