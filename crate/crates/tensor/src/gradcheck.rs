//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Lower bound on the denominator of the relative error, so that
    /// near-zero gradients are compared absolutely.
    pub floor: f64,
    /// Elements probed per parameter; `None` probes all of them.
    pub max_elements: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            max_elements: Some(16),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| !p.passed)
            .map(|p| p.name.as_str())
            .collect()
    }

    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

fn evaluate<F>(store: &ParamStore, builder: &F) -> Result<f64>
where
    F: Fn(&Graph, &ParamStore) -> Result<Var>,
{
    let g = Graph::new();
    let loss = builder(&g, store)?;
    g.item(loss)
}

/// Evenly spaced probe positions, always including the first and last element.
fn probe_indices(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len && m > 1 => (0..m).map(|i| i * (len - 1) / (m - 1)).collect(),
        Some(1) if len > 1 => vec![0],
        _ => (0..len).collect(),
    }
}

/// Compares reverse-mode gradients of `builder`'s scalar output with central
/// differences `(f(θ+eps) − f(θ−eps)) / 2eps` for the parameters in `ids`
/// (all parameters when `None`). Parameter values are restored afterwards;
/// existing gradients are cleared.
pub fn grad_check<F>(
    store: &mut ParamStore,
    ids: Option<&[ParamId]>,
    builder: F,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &ParamStore) -> Result<Var>,
{
    if !(cfg.eps > 0.0) {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            msg: format!("eps must be positive, got {}", cfg.eps),
        });
    }
    let first = evaluate(store, &builder)?;
    let second = evaluate(store, &builder)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }

    store.zero_grad();
    let g = Graph::new();
    let loss = builder(&g, store)?;
    g.backward(loss, store)?;

    let ids: Vec<ParamId> = match ids {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let len = store.get(id).value.len();
        let analytic = store.get(id).grad.clone().unwrap_or_else(|| vec![0.0; len]);
        let mut worst: f64 = 0.0;
        let probes = probe_indices(len, cfg.max_elements);
        for &i in &probes {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + cfg.eps;
            let plus = evaluate(store, &builder);
            store.get_mut(id).value.data_mut()[i] = orig - cfg.eps;
            let minus = evaluate(store, &builder);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * cfg.eps);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
        }
        params.push(ParamCheck {
            name: store.get(id).name.clone(),
            max_rel_err: worst,
            checked: probes.len(),
            passed: worst < cfg.tol,
        });
    }
    store.zero_grad();
    Ok(GradCheckReport { params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{Init, Precision};
    use crate::rng::seeded;
    use std::cell::Cell;

    #[test]
    fn square_at_three() {
        let mut rng = seeded(0, 0);
        let mut store = ParamStore::new(Precision::F64);
        let id = store.add("theta", &[1], Init::Constant(3.0), &mut rng).unwrap();
        let report = grad_check(
            &mut store,
            None,
            |g, s| {
                let t = g.param(s, id);
                let sq = g.mul(t, t)?;
                g.sum(sq)
            },
            GradCheckConfig {
                eps: 1e-5,
                tol: 1e-8,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(store.get(id).value.data()[0], 3.0);
    }

    #[test]
    fn detects_non_deterministic_builder() {
        let mut rng = seeded(0, 0);
        let mut store = ParamStore::new(Precision::F64);
        let id = store.add("theta", &[1], Init::Constant(1.0), &mut rng).unwrap();
        let calls = Cell::new(0.0);
        let err = grad_check(
            &mut store,
            None,
            |g, s| {
                calls.set(calls.get() + 1.0);
                let t = g.param(s, id);
                let c = g.scalar(calls.get());
                let y = g.mul(t, c)?;
                g.sum(y)
            },
            GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::NonDeterministic { .. }));
    }

    #[test]
    fn rejects_non_positive_eps() {
        let mut store = ParamStore::new(Precision::F64);
        let cfg = GradCheckConfig {
            eps: 0.0,
            ..Default::default()
        };
        assert!(grad_check(&mut store, None, |g, _| Ok(g.scalar(0.0)), cfg).is_err());
    }

    #[test]
    fn probe_positions() {
        assert_eq!(probe_indices(5, None), vec![0, 1, 2, 3, 4]);
        assert_eq!(probe_indices(10, Some(3)), vec![0, 4, 9]);
        assert_eq!(probe_indices(2, Some(16)), vec![0, 1]);
    }
}
