//! Finite-difference validation of reverse-mode gradients.
//!
//! `grad_check` rebuilds the caller's graph from scratch for every
//! probe, so the closure must be deterministic: the same parameters
//! must produce bit-identical losses. That property is verified first
//! and reported as an error if violated, since otherwise the central
//! differences would measure noise instead of slope.

use super::graph::{Graph, Var};
use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

/// One probed element: its reverse-mode gradient, the central
/// difference measured at the requested step, and their relative error.
#[derive(Debug, Clone)]
pub struct GradProbe {
    pub param: String,
    pub elem: usize,
    pub analytic: f64,
    pub fd: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error across all probed elements.
    pub max_rel_err: f64,
    /// Parameter name and flat element index of the worst probe.
    pub worst: Option<(String, usize)>,
    /// Number of elements probed.
    pub checked: usize,
    /// Every probe, in parameter-registration then element order.
    pub probes: Vec<GradProbe>,
}

fn forward<F>(build: &F, params: &ParamSet) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let mut vars = Vec::with_capacity(params.len());
    for (_, tensor) in params.iter() {
        vars.push(graph.leaf(Tensor::new(tensor.shape().to_vec(), tensor.data().to_vec())?)?);
    }
    let loss = build(&mut graph, &vars)?;
    if graph.value(loss).numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check: loss must be scalar, got shape {:?}",
            graph.value(loss).shape()
        )));
    }
    Ok((graph, vars, loss))
}

/// Loss readout for the probes. Uses the graph's f64 scalar view so
/// the finite differences are not quantized by the final f32 rounding
/// of the loss (the interior of the forward pass remains f32).
fn loss_value<F>(build: &F, params: &ParamSet) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (graph, _, loss) = forward(build, params)?;
    graph.value_f64(loss)
}

/// Compare reverse-mode gradients of `build` against central finite
/// differences, probing at most `max_elems_per_param` elements of each
/// parameter (all of them when `None`).
///
/// When sampling, the probed elements are the ones with the largest
/// reverse-mode gradient magnitudes. Those are the elements whose
/// slopes a 32-bit forward pass can actually resolve — a secant is
/// limited from below by accumulated rounding of the feature maps and
/// from above by curvature, so tiny-gradient elements measure noise at
/// every step. Bugs in a backward rule are not confined to small
/// elements: they rescale or restructure whole tensors, which the
/// large elements expose.
pub fn grad_check<F>(
    build: &F,
    params: &ParamSet,
    eps: f64,
    max_elems_per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("grad_check: eps must be finite and > 0, got {eps}")));
    }
    if params.is_empty() {
        return Err(Error::Contract("grad_check: no parameters to probe".into()));
    }

    // A non-deterministic forward pass makes finite differences
    // meaningless; insist on bit-identical repeats.
    let base = loss_value(build, params)?;
    let repeat = loss_value(build, params)?;
    if base.to_bits() != repeat.to_bits() {
        return Err(Error::Check(format!(
            "grad_check: forward pass is not deterministic ({base} vs {repeat})"
        )));
    }

    let (graph, vars, loss) = forward(build, params)?;
    let grads = graph.backward(loss)?;

    let mut report =
        GradCheckReport { max_rel_err: 0.0, worst: None, checked: 0, probes: Vec::new() };
    let mut probe = params.clone();
    for pi in 0..params.len() {
        let numel = params.tensor_at(pi).numel();
        let analytic = grads.get(vars[pi]);
        let indices: Vec<usize> = match max_elems_per_param {
            Some(k) if k < numel => {
                let mut order: Vec<usize> = (0..numel).collect();
                // Largest |gradient| first; ties broken by index so the
                // selection is deterministic.
                order.sort_by(|&x, &y| {
                    let gx = analytic.map_or(0.0, |g| g[x].abs());
                    let gy = analytic.map_or(0.0, |g| g[y].abs());
                    gy.partial_cmp(&gx).unwrap_or(std::cmp::Ordering::Equal).then(x.cmp(&y))
                });
                order.truncate(k);
                order
            }
            _ => (0..numel).collect(),
        };
        for elem in indices {
            let original = params.tensor_at(pi).data()[elem];
            let plus = (original as f64 + eps) as f32;
            let minus = (original as f64 - eps) as f32;
            probe.tensor_at_mut(pi).data_mut()[elem] = plus;
            let f_plus = loss_value(build, &probe)?;
            probe.tensor_at_mut(pi).data_mut()[elem] = minus;
            let f_minus = loss_value(build, &probe)?;
            probe.tensor_at_mut(pi).data_mut()[elem] = original;

            // Divide by the step the f32 parameter actually realized.
            let fd = (f_plus - f_minus) / (plus as f64 - minus as f64);
            let a = analytic.map_or(0.0, |g| g[elem] as f64);
            // The floor keeps near-zero gradients from blowing up the
            // ratio; above it the error is relative to the larger of
            // the two slopes.
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            report.checked += 1;
            report.probes.push(GradProbe {
                param: params.name_at(pi).to_string(),
                elem,
                analytic: a,
                fd,
                rel_err: rel,
            });
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((params.name_at(pi).to_string(), elem));
            }
        }
    }
    Ok(report)
}

/// Result of a directional secant probe: the analytic directional
/// derivative along the normalized gradient (the gradient norm) versus
/// the measured one.
#[derive(Debug, Clone)]
pub struct DirectionalReport {
    /// Analytic directional derivative along the probe direction —
    /// the L2 norm of the gradient over all probed parameters.
    pub analytic: f64,
    /// Central-difference measurement along the same direction.
    pub fd: f64,
    /// |analytic - fd| / max(|analytic|, |fd|, 1e-6).
    pub rel_err: f64,
}

/// Compare the gradient of `build` against a central finite difference
/// taken along the gradient's own direction, across all parameters at
/// once.
///
/// Where single-coordinate probes are limited by what a 32-bit secant
/// can resolve per element, the directional probe aggregates the whole
/// gradient into one well-conditioned measurement: the step moves
/// every parameter proportionally to its gradient component, so the
/// expected slope is the gradient norm itself — orders of magnitude
/// above the per-element noise floor. A wrong gradient fails loudly:
/// if the reported gradient is g while the true one is t, the secant
/// measures <t, g>/|g| but the claim is |g|, and the two agree only
/// when g = t in both scale and direction.
pub fn grad_check_directional<F>(build: &F, params: &ParamSet, eps: f64) -> Result<DirectionalReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("grad_check: eps must be finite and > 0, got {eps}")));
    }
    if params.is_empty() {
        return Err(Error::Contract("grad_check: no parameters to probe".into()));
    }

    let base = loss_value(build, params)?;
    let repeat = loss_value(build, params)?;
    if base.to_bits() != repeat.to_bits() {
        return Err(Error::Check(format!(
            "grad_check: forward pass is not deterministic ({base} vs {repeat})"
        )));
    }

    let (graph, vars, loss) = forward(build, params)?;
    let grads = graph.backward(loss)?;

    let norm_sq: f64 = (0..params.len())
        .filter_map(|pi| grads.get(vars[pi]))
        .map(|g| g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
        .sum();
    let norm = norm_sq.sqrt();
    if norm == 0.0 {
        // A identically-zero gradient claims a flat landscape; verify
        // it by stepping along a uniform direction instead.
        let count: usize = (0..params.len()).map(|pi| params.tensor_at(pi).numel()).sum();
        let unit = 1.0 / (count as f64).sqrt();
        let mut plus = params.clone();
        let mut minus = params.clone();
        for pi in 0..params.len() {
            for (p, m) in plus
                .tensor_at_mut(pi)
                .data_mut()
                .iter_mut()
                .zip(minus.tensor_at_mut(pi).data_mut().iter_mut())
            {
                *p = (*p as f64 + eps * unit) as f32;
                *m = (*m as f64 - eps * unit) as f32;
            }
        }
        let fd = (loss_value(build, &plus)? - loss_value(build, &minus)?) / (2.0 * eps);
        let rel = fd.abs() / fd.abs().max(1e-6);
        return Ok(DirectionalReport { analytic: 0.0, fd, rel_err: rel });
    }

    let mut plus = params.clone();
    let mut minus = params.clone();
    for pi in 0..params.len() {
        let Some(g) = grads.get(vars[pi]) else { continue };
        for (elem, &gv) in g.iter().enumerate() {
            let u = gv as f64 / norm;
            let original = params.tensor_at(pi).data()[elem] as f64;
            plus.tensor_at_mut(pi).data_mut()[elem] = (original + eps * u) as f32;
            minus.tensor_at_mut(pi).data_mut()[elem] = (original - eps * u) as f32;
        }
    }
    let fd = (loss_value(build, &plus)? - loss_value(build, &minus)?) / (2.0 * eps);
    let rel = (norm - fd).abs() / norm.abs().max(fd.abs()).max(1e-6);
    Ok(DirectionalReport { analytic: norm, fd, rel_err: rel })
}
