// Closed-form operation counts for one attention head.
//
// Counts are multiply-adds for products and one unit per elementwise
// operation. The input projections (W_q, W_k, W_v) are reported apart from
// the attention computation proper so that the latter can be compared across
// sequence lengths.

use super::ProjectionMode;
use crate::features::FeatureKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Cost {
    pub projection_flops: u64,
    pub attention_flops: u64,
    /// Bytes of the intermediate buffers the attention computation holds.
    pub buffer_bytes: u64,
}

/// Cost of a primal head on `n` tokens of width `d`, with query width `dq`,
/// feature width `p`, `s` directions and output width `dv`.
#[allow(clippy::too_many_arguments)]
pub fn primal_cost(
    n: usize,
    d: usize,
    dq: usize,
    p: usize,
    s: usize,
    dv: usize,
    mode: ProjectionMode,
    causal: bool,
    kind: FeatureKind,
) -> Cost {
    let (n, d, dq, p, s, dv) = (n as u64, d as u64, dq as u64, p as u64, s as u64, dv as u64);
    let projection = 2 * n * d * dq;
    let features = match kind {
        FeatureKind::Identity => 0,
        // squared norm + division, for queries and keys
        FeatureKind::Cosine => 2 * (2 * n * dq),
        // directions, squared norm, exp; then the D̂ column sum, dot and rescale
        FeatureKind::RandomExponential => 2 * (n * p * dq + n * dq + n * p) + 2 * n * p + 2 * n * s,
    };
    let scores = match mode {
        ProjectionMode::DataIndependent => 2 * n * p * s,
        ProjectionMode::DataDependent { .. } if causal => 2 * (n * d * s + n * p * s),
        ProjectionMode::DataDependent { rank_multi, .. } => {
            let rows = (s * rank_multi as u64).min(n);
            2 * rows * p * s + 2 * n * p * s
        }
    };
    let output = n * 2 * s * dv;
    let buffers = 2 * n * p + 2 * p * s + 2 * n * s + n * dv;
    Cost {
        projection_flops: projection,
        attention_flops: features + scores + output,
        buffer_bytes: 8 * buffers,
    }
}

/// Cost of a canonical softmax head: scores, softmax (max, exp, normalize)
/// and aggregation, all quadratic in `n`.
pub fn canonical_cost(n: usize, d: usize, dk: usize, dv: usize) -> Cost {
    let (n, d, dk, dv) = (n as u64, d as u64, dk as u64, dv as u64);
    Cost {
        projection_flops: 2 * n * d * dk + n * d * dv,
        attention_flops: n * n * dk + 3 * n * n + n * n * dv,
        buffer_bytes: 8 * (n * n + n * dv),
    }
}
