use crate::error::{Error, Result};
use crate::tensor::{softmax_slice, Tensor};

/// Experts chosen for one token, in descending-logit order, with their
/// renormalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Routing {
    pub experts: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Receives every routing decision made during a forward pass.
pub trait RoutingObserver {
    fn record(&mut self, layer: usize, routing: &Routing);

    /// Called once per token after all layers have routed it.
    fn token_processed(&mut self) {}
}

pub struct NoopObserver;

/// Reborrows an optional observer for a nested call.
pub(crate) fn reborrow<'a>(
    observer: &'a mut Option<&mut dyn RoutingObserver>,
) -> Option<&'a mut dyn RoutingObserver> {
    match observer {
        Some(o) => Some(&mut **o),
        None => None,
    }
}

impl RoutingObserver for NoopObserver {
    fn record(&mut self, _layer: usize, _routing: &Routing) {}
}

/// Top-k selection with ties resolved toward the lower index; weights are a
/// softmax over the selected logits only.
pub fn route_topk_slice(logits: &[f64], k: usize) -> Result<Routing> {
    if k == 0 || k > logits.len() {
        return Err(Error::Domain(format!(
            "top_k must be in 1..={}, got {k}",
            logits.len()
        )));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // stable sort keeps lower indices first among equal logits
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    order.truncate(k);
    let selected: Vec<f64> = order.iter().map(|&i| logits[i]).collect();
    Ok(Routing {
        weights: softmax_slice(&selected),
        experts: order,
    })
}

pub fn route_topk(logits: &Tensor, k: usize) -> Result<Routing> {
    if logits.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::Input("router logits must be finite".into()));
    }
    route_topk_slice(logits.data(), k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_largest_two() {
        let r = route_topk(&Tensor::vector(vec![2.0, 1.0, 0.0, -1.0]), 2).unwrap();
        assert_eq!(r.experts, vec![0, 1]);
        let e2 = 2f64.exp();
        let e1 = 1f64.exp();
        assert!((r.weights[0] - e2 / (e2 + e1)).abs() < 1e-15);
        assert!((r.weights[0] - 0.73106).abs() < 1e-5);
        assert!((r.weights[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn uniform_logits_tie_break_by_index() {
        let r = route_topk(&Tensor::vector(vec![0.7; 4]), 4).unwrap();
        assert_eq!(r.experts, vec![0, 1, 2, 3]);
        assert!(r.weights.iter().all(|&w| (w - 0.25).abs() < 1e-15));
    }

    #[test]
    fn k1_is_argmax_with_unit_weight() {
        let r = route_topk(&Tensor::vector(vec![0.1, 3.0, 3.0, -2.0]), 1).unwrap();
        assert_eq!(r.experts, vec![1]);
        assert_eq!(r.weights, vec![1.0]);
    }

    #[test]
    fn descending_logit_order() {
        let r = route_topk_slice(&[0.0, 5.0, 1.0, 3.0], 3).unwrap();
        assert_eq!(r.experts, vec![1, 3, 2]);
        assert!(r.weights.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn k_above_e_is_domain_error() {
        assert!(matches!(
            route_topk_slice(&[1.0, 2.0], 3),
            Err(Error::Domain(_))
        ));
        assert!(route_topk_slice(&[1.0], 0).is_err());
    }
}
