use super::{ParamStore, Tape, Var};
use crate::error::Result;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Loss evaluations that differ by fewer than this many ulps are treated as
/// equal.
const ROUNDOFF_ULPS: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of `loss` against central finite
/// differences over every scalar of every parameter in `params`.
///
/// The relative error per coordinate is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`, or zero when
/// the discrepancy is within a few ulps of the loss divided by `h` (a
/// gradient that is exactly zero otherwise reports pure rounding noise).
/// `loss` must be deterministic.
pub fn grad_check<F>(loss: F, params: &ParamStore, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = loss(&mut tape, params)?;
    let analytic = tape.backward(out)?;

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let v = loss(&mut t, p)?;
        Ok(t.value(v).item())
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name).map_or(0, |m| m.len());
        for i in 0..n {
            let orig = params.get(&name).unwrap().values()[i];
            probe.get_mut(&name).unwrap().values_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(&name).unwrap().values_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(&name).unwrap().values_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(&name).map_or(0.0, |g| g.values()[i]);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            // Differences below the loss's own rounding level carry no signal.
            let roundoff = ROUNDOFF_ULPS * f64::EPSILON * up.abs().max(down.abs()).max(1.0) / h;
            let diff = (a - numeric).abs();
            let rel = if diff <= roundoff { 0.0 } else { diff / denom };
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
