use super::{Graph, NodeId, Tensor};
use crate::Result;

/// Outcome of a finite-difference gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub worst_rel: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
    /// Distance of the unperturbed forward pass to the nearest kink;
    /// callers should resample their configuration when this is tiny.
    pub kink_margin: f64,
}

/// Compare backward-pass gradients of a scalar-valued builder against
/// central finite differences.
///
/// `build` is called several times and must be deterministic: given the
/// same parameter values it must assemble the identical graph (seed any
/// internal randomness per call). `probes` selects (parameter, element)
/// pairs to difference; `None` probes every element. The relative error
/// uses a small absolute floor so near-zero gradients are compared at
/// absolute precision.
pub fn gradient_check<F>(
    build: F,
    params: &[(String, Tensor)],
    eps: f64,
    probes: Option<&[(usize, usize)]>,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|(n, t)| g.param(n, t.clone())).collect();
    let out = build(&mut g, &ids)?;
    let kink_margin = g.kink_margin();
    let grads = g.backward(out)?;

    let eval = |mutated: &[(String, Tensor)]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = mutated.iter().map(|(_, t)| g.value(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        Ok(g.value_of(out).item())
    };

    let all_probes: Vec<(usize, usize)> = match probes {
        Some(p) => p.to_vec(),
        None => params
            .iter()
            .enumerate()
            .flat_map(|(pi, (_, t))| (0..t.len()).map(move |ei| (pi, ei)))
            .collect(),
    };

    let mut report = GradCheck {
        worst_rel: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
        kink_margin,
    };
    let mut work: Vec<(String, Tensor)> = params.to_vec();
    for (pi, ei) in all_probes {
        let orig = work[pi].1.data()[ei];
        work[pi].1.data_mut()[ei] = orig + eps;
        let fp = eval(&work)?;
        work[pi].1.data_mut()[ei] = orig - eps;
        let fm = eval(&work)?;
        work[pi].1.data_mut()[ei] = orig;
        let fd = (fp - fm) / (2.0 * eps);
        let analytic = grads.get(ids[pi]).map_or(0.0, |t| t.data()[ei]);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-2);
        report.checked += 1;
        if rel > report.worst_rel {
            report.worst_rel = rel;
            report.worst_param = params[pi].0.clone();
            report.worst_index = ei;
        }
    }
    Ok(report)
}
