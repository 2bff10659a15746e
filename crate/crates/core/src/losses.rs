//! Training losses as graph operations.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;

/// Denominator guard for the dice loss. All-zero target channels are
/// legitimate, so the denominator must never reach zero.
pub const DICE_EPS: f64 = 1e-6;

/// `1 - (1/(B N)) sum_{b,t} 2 sum(p g) / (sum(p^2) + sum(g^2) + eps)` over
/// `[B, N, H, W]` maps. With both maps all zero a channel contributes a
/// dice of 0, so the loss of an empty/empty pair is 1.
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, pred: NodeId, target: NodeId, eps: f64) -> Result<NodeId> {
    g.dice_loss(pred, target, eps)
}

/// Mean squared error between predicted and true normalized centres.
pub fn loc_loss<T: Scalar>(g: &mut Graph<T>, pred: NodeId, target: NodeId) -> Result<NodeId> {
    g.mse(pred, target)
}

/// Dice loss evaluated directly on slices, no graph.
pub fn dice_loss_value(pred: &[f64], target: &[f64], maps: usize, eps: f64) -> f64 {
    let plane = pred.len() / maps.max(1);
    let mut total = 0.0;
    for (p, t) in pred.chunks_exact(plane).zip(target.chunks_exact(plane)) {
        let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
        let pp: f64 = p.iter().map(|a| a * a).sum();
        let tt: f64 = t.iter().map(|b| b * b).sum();
        total += 2.0 * inter / (pp + tt + eps);
    }
    1.0 - total / maps as f64
}
