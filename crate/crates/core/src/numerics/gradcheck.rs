use serde::Serialize;

use super::{Graph, NumericsError, Tensor, Var};

/// Denominators below this are treated as cancellation: the coordinate is
/// flagged and judged on absolute error instead.
pub const CANCELLATION_FLOOR: f64 = 1e-12;

/// Rounding budget, in units of machine epsilon times `|loss|`, assumed for
/// each loss evaluation when estimating the resolution of a central difference.
pub const RESOLUTION_ULPS: f64 = 32.0;

#[derive(Clone, Debug, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub eps: f64,
    pub tol: f64,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Coordinates whose analytic and numeric gradients were both below the floor.
    pub flagged: usize,
    /// Coordinates whose gradient magnitude is below `resolution / tol`; their
    /// relative error is measured against that floor instead.
    pub below_resolution: usize,
    /// Largest central-difference resolution seen: `RESOLUTION_ULPS · ε · |loss| / (2·eps)`.
    pub resolution: f64,
    /// Coordinates where some ReLU input changed sign across `±eps`; excluded.
    pub kinks: usize,
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric values at `worst`.
    pub worst_pair: Option<(f64, f64)>,
    pub groups: Vec<GroupReport>,
    pub pass: bool,
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// finite differences, coordinate by coordinate, in float64.
///
/// The relative error is `|a − n| / max(|a|, |n|, resolution / tol)`: a central
/// difference cannot resolve a gradient smaller than the rounding noise of
/// the two loss values divided by `2·eps`, so such coordinates must agree to
/// within that noise rather than to `tol` relative. Coordinates whose `±eps`
/// evaluations straddle a ReLU kink are not differentiable there and are
/// counted in `kinks` instead of compared.
///
/// `f` receives a fresh graph and one leaf per entry of `params` (in order) and
/// returns the scalar loss.
pub fn gradcheck<F>(
    f: F,
    params: &[(String, Tensor<f64>)],
    eps: f64,
    tol: f64,
) -> Result<GradcheckReport, NumericsError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumericsError>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(NumericsError::Gradcheck(format!("invalid eps {eps}")));
    }

    let eval = |values: &[Tensor<f64>]| -> Result<(f64, Vec<bool>), NumericsError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok((g.value(loss).data()[0], g.relu_signature()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, (_, t))| grads.get_or_zeros(v, t))
        .collect();
    drop(g);

    let mut work: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradcheckReport {
        eps,
        tol,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        flagged: 0,
        below_resolution: 0,
        resolution: 0.0,
        kinks: 0,
        worst: None,
        worst_pair: None,
        groups: Vec::with_capacity(params.len()),
        pass: true,
    };

    for (p, (name, tensor)) in params.iter().enumerate() {
        let mut group = GroupReport {
            name: name.clone(),
            coords: tensor.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for i in 0..tensor.len() {
            let orig = tensor.data()[i];
            work[p].data_mut()[i] = orig + eps;
            let (plus, sig_plus) = eval(&work)?;
            work[p].data_mut()[i] = orig - eps;
            let (minus, sig_minus) = eval(&work)?;
            work[p].data_mut()[i] = orig;
            if sig_plus != sig_minus {
                report.kinks += 1;
                continue;
            }

            let numeric = (plus - minus) / (2.0 * eps);
            let resolution =
                RESOLUTION_ULPS * f64::EPSILON * plus.abs().max(minus.abs()) / (2.0 * eps);
            report.resolution = report.resolution.max(resolution);
            let a = analytic[p].data()[i];
            let abs = (a - numeric).abs();
            let denom = a.abs().max(numeric.abs());
            let rel = if denom < CANCELLATION_FLOOR {
                report.flagged += 1;
                if abs < tol {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                if denom < resolution / tol {
                    report.below_resolution += 1;
                }
                abs / denom.max(resolution / tol)
            };
            group.max_abs_err = group.max_abs_err.max(abs);
            if rel > group.max_rel_err {
                group.max_rel_err = rel;
            }
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), i));
                report.worst_pair = Some((a, numeric));
            }
        }
        report.max_abs_err = report.max_abs_err.max(group.max_abs_err);
        report.groups.push(group);
    }
    report.pass = report.max_rel_err < tol;
    Ok(report)
}
