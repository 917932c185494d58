use super::graph::{Graph, Var};
use super::params::{BoundParams, ParamStore};
use crate::error::Result;

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// `‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖)` over every checked entry.
    pub rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Checks `d loss / d params` for the scalar built by `build`.
///
/// At most `max_per_param` entries of each tensor are probed, spread evenly.
pub fn grad_check<F>(store: &ParamStore, build: F, eps: f64, max_per_param: usize) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let b = s.bind(&mut g, false);
        let l = build(&mut g, &b)?;
        Ok(g.value(l).item())
    };
    let mut g = Graph::new();
    let bound = store.bind(&mut g, true);
    let loss = build(&mut g, &bound)?;
    let grads = g.backward(loss)?;
    let tape = bound.gradients(&grads, store);

    let mut probe = store.clone();
    let (mut diff2, mut a2, mut n2, mut max_abs, mut checked) = (0.0, 0.0, 0.0, 0.0f64, 0);
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for (k, name) in names.iter().enumerate() {
        let len = store.get(name)?.len();
        let stride = len.div_ceil(max_per_param.max(1)).max(1);
        for i in (0..len).step_by(stride) {
            let orig = probe.get(name)?.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let an = tape[k].data()[i];
            diff2 += (an - fd) * (an - fd);
            a2 += an * an;
            n2 += fd * fd;
            max_abs = max_abs.max((an - fd).abs());
            checked += 1;
        }
    }
    let denom = a2.max(n2).sqrt().max(1e-300);
    Ok(GradCheck { rel_err: diff2.sqrt() / denom, max_abs_err: max_abs, checked })
}
