use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NumError, ParamId, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Above this many coordinates a seeded sample of this size is checked.
    pub max_coordinates: usize,
    pub seed: u64,
    /// Restrict the check to these parameters; `None` checks the whole store.
    pub params: Option<Vec<ParamId>>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { epsilon: 1e-4, max_coordinates: 10_000, seed: 0, params: None }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates_checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Relative error with the `max(|a|, |b|, 1e-8)` denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences over every parameter coordinate (or a seeded sample).
pub fn gradient_check<F, E>(store: &ParamStore, cfg: &GradCheckConfig, f: F) -> Result<GradCheckReport, E>
where
    F: for<'g> Fn(&mut Graph<'g>) -> Result<Var, E>,
    E: From<NumError>,
{
    if !(cfg.epsilon > 0.0 && cfg.epsilon <= 1e-2) {
        return Err(NumError::InvalidAttribute(format!("epsilon {} outside (0, 1e-2]", cfg.epsilon)).into());
    }
    let eval = |s: &ParamStore| -> Result<f64, E> {
        let mut g = Graph::with_params(s);
        let out = f(&mut g)?;
        let v = g.value(out);
        if !v.is_scalar() {
            return Err(NumError::NonScalarLoss(v.shape().to_vec()).into());
        }
        Ok(v.item())
    };

    let analytic = {
        let mut g = Graph::with_params(store);
        let out = f(&mut g)?;
        let base = g.value(out).item();
        let grads = g.backward(out)?;
        if eval(store)?.to_bits() != base.to_bits() {
            return Err(NumError::NonDeterministic.into());
        }
        grads.into_param_grads(store.len())
    };

    let ids: Vec<ParamId> = cfg.params.clone().unwrap_or_else(|| store.ids().collect());
    let mut coords: Vec<(ParamId, usize)> = ids
        .iter()
        .flat_map(|&id| (0..store.get(id).len()).map(move |k| (id, k)))
        .collect();
    if coords.len() > cfg.max_coordinates {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut picked: Vec<usize> = index::sample(&mut rng, coords.len(), cfg.max_coordinates).into_vec();
        picked.sort_unstable();
        coords = picked.into_iter().map(|i| coords[i]).collect();
    }

    let mut work = store.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, coordinates_checked: 0, worst: None };
    for (id, k) in coords {
        let orig = work.get(id).data()[k];
        work.get_mut(id).data_mut()[k] = orig + cfg.epsilon;
        let plus = eval(&work)?;
        work.get_mut(id).data_mut()[k] = orig - cfg.epsilon;
        let minus = eval(&work)?;
        work.get_mut(id).data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.epsilon);
        let a = analytic.get(id).map_or(0.0, |g| g[k]);
        let err = relative_error(a, numeric);
        report.coordinates_checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= report.max_rel_error {
                report.worst = Some((store.name(id).to_string(), k));
            }
        }
    }
    Ok(report)
}
