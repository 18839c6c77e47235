use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use super::params::{ParamGrads, ParamStore};
use crate::error::Result;

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub checked: usize,
    /// `max |g_bp - g_fd| / max(|g_bp|, |g_fd|, 1e-8)` over the checked scalars.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_backprop: f64,
    pub worst_numeric: f64,
}

/// Compares `grads` against a fourth-order central difference of the loss on
/// up to `count` randomly chosen scalars.
///
/// `terms` returns the loss as a list of summands, without additive
/// constants. Each summand is differenced separately before summing, so
/// rounding in large parameter-independent terms does not swamp small
/// derivatives.
pub fn gradcheck<R: Rng>(
    store: &mut ParamStore,
    grads: &ParamGrads,
    count: usize,
    step: f64,
    rng: &mut R,
    mut terms: impl FnMut(&ParamStore) -> Result<Vec<f64>>,
) -> Result<GradcheckReport> {
    let total = store.scalar_count();
    let mut picks = sample(rng, total, count.min(total)).into_vec();
    picks.sort_unstable();

    let mut report = GradcheckReport {
        checked: picks.len(),
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_backprop: 0.0,
        worst_numeric: 0.0,
    };
    for flat in picks {
        let (id, off) = store.locate(flat);
        let orig = store.get(id).data()[off];
        let mut eval = |store: &mut ParamStore, delta: f64| -> Result<Vec<f64>> {
            store.get_mut(id).data_mut()[off] = orig + delta;
            terms(store)
        };
        let p1 = eval(store, step)?;
        let m1 = eval(store, -step)?;
        let p2 = eval(store, 2.0 * step)?;
        let m2 = eval(store, -2.0 * step)?;
        store.get_mut(id).data_mut()[off] = orig;

        let numeric = (0..p1.len())
            .map(|k| (8.0 * (p1[k] - m1[k]) - (p2[k] - m2[k])) / (12.0 * step))
            .sum::<f64>();
        let backprop = grads.0[id.0].data()[off];
        let rel = (backprop - numeric).abs() / backprop.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_error || report.worst_param.is_empty() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst_param = format!("{}[{off}]", store.name(id));
            report.worst_backprop = backprop;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}
