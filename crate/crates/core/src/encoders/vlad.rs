//! NetVLAD and NeXtVLAD cluster-and-aggregate encoders.
//!
//! Both compute soft assignments `a_c(x) = softmax_c(w_c . x + b_c)` and the
//! residual descriptor `V[c, :] = sum_t a_c(x_t) (x_t - mu_c)`, normalize it
//! per cluster and then globally, and finish with an FC layer followed by
//! context gating `sigmoid(W_g h + b_g) * h`.

use super::{stack, Bound, Encoded, ModelError, ParamId, ParamStore};
use crate::autodiff::{Graph, Tensor, Var};
use crate::rng::SplitMix64;

const NORM_EPS: f64 = 1e-12;

/// `sum_m a[b, m, c] * (x[b, m, :] - mu[c, :])` as `[B, C, D']`.
fn aggregate(g: &mut Graph, assign: Var, x: Var, centers: Var) -> Result<Var, ModelError> {
    let at = g.transpose(assign)?;
    let weighted = g.matmul(at, x)?;
    let mass = g.sum_axis(assign, 1)?;
    let mass = g.transpose(mass)?;
    let shift = g.mul(mass, centers)?;
    Ok(g.sub(weighted, shift)?)
}

/// Intra (per-cluster) then global L2 normalization, flattened to `[B, C*D']`.
fn normalize(g: &mut Graph, raw: Var) -> Result<Var, ModelError> {
    let shape = g.shape(raw).to_vec();
    let intra = g.l2_normalize(raw, NORM_EPS);
    let flat = g.reshape(intra, &[shape[0], shape[1] * shape[2]])?;
    Ok(g.l2_normalize(flat, NORM_EPS))
}

#[derive(Debug, Clone)]
struct GatedFc {
    w: ParamId,
    b: ParamId,
    gate_w: ParamId,
    gate_b: ParamId,
}

impl GatedFc {
    fn new(params: &mut ParamStore, rng: &mut SplitMix64, prefix: &str, input: usize, hidden: usize) -> Self {
        Self {
            w: params.xavier(&format!("{prefix}.fc.w"), input, hidden, rng),
            b: params.zeros(&format!("{prefix}.fc.b"), &[hidden]),
            gate_w: params.xavier(&format!("{prefix}.gate.w"), hidden, hidden, rng),
            gate_b: params.zeros(&format!("{prefix}.gate.b"), &[hidden]),
        }
    }

    fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var, ModelError> {
        let h = g.matmul(x, bound.var(self.w))?;
        let h = g.add(h, bound.var(self.b))?;
        let gate = g.matmul(h, bound.var(self.gate_w))?;
        let gate = g.add(gate, bound.var(self.gate_b))?;
        let gate = g.sigmoid(gate);
        Ok(g.mul(gate, h)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct NetVlad {
    assign_w: ParamId,
    assign_b: ParamId,
    centers: ParamId,
    fc: GatedFc,
    dim: usize,
    clusters: usize,
}

impl NetVlad {
    pub(crate) fn new(
        params: &mut ParamStore,
        rng: &mut SplitMix64,
        dim: usize,
        clusters: usize,
        hidden: usize,
    ) -> Self {
        Self {
            assign_w: params.xavier("netvlad.assign.w", dim, clusters, rng),
            assign_b: params.zeros("netvlad.assign.b", &[clusters]),
            centers: params.xavier("netvlad.centers", clusters, dim, rng),
            fc: GatedFc::new(params, rng, "netvlad", clusters * dim, hidden),
            dim,
            clusters,
        }
    }

    /// Soft assignments `[B, T, C]` and raw descriptor `[B, C, D]`.
    pub(crate) fn descriptor(&self, g: &mut Graph, bound: &Bound, clips: &[Tensor]) -> Result<(Var, Var), ModelError> {
        let (b, t) = (clips.len(), clips[0].shape()[0]);
        let x = g.constant(stack(clips));
        let flat = g.reshape(x, &[b * t, self.dim])?;
        let logits = g.matmul(flat, bound.var(self.assign_w))?;
        let logits = g.add(logits, bound.var(self.assign_b))?;
        let assign = g.softmax(logits);
        let assign = g.reshape(assign, &[b, t, self.clusters])?;
        let raw = aggregate(g, assign, x, bound.var(self.centers))?;
        Ok((assign, raw))
    }

    pub(crate) fn encode(&self, g: &mut Graph, bound: &Bound, clips: &[Tensor]) -> Result<Encoded, ModelError> {
        let (_, raw) = self.descriptor(g, bound, clips)?;
        let pooled = normalize(g, raw)?;
        let embedding = self.fc.forward(g, bound, pooled)?;
        Ok(Encoded { embedding, intermediates: Vec::new() })
    }
}

/// NetVLAD over grouped, expanded frames: each frame is widened to
/// `expansion * D`, cut into `groups` vectors of width `expansion * D / groups`
/// that share one assignment matrix, and each group-vector's contribution is
/// scaled by a sigmoid attention weight computed from the expanded frame.
#[derive(Debug, Clone)]
pub(crate) struct NextVlad {
    expand_w: ParamId,
    expand_b: ParamId,
    attn_w: ParamId,
    attn_b: ParamId,
    assign_w: ParamId,
    assign_b: ParamId,
    centers: ParamId,
    fc: GatedFc,
    dim: usize,
    clusters: usize,
    groups: usize,
    wide: usize,
    dropout: f64,
}

impl NextVlad {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        params: &mut ParamStore,
        rng: &mut SplitMix64,
        dim: usize,
        clusters: usize,
        hidden: usize,
        groups: usize,
        expansion: usize,
        dropout: f64,
    ) -> Self {
        let wide = expansion * dim;
        let group_dim = wide / groups;
        Self {
            expand_w: params.xavier("nextvlad.expand.w", dim, wide, rng),
            expand_b: params.zeros("nextvlad.expand.b", &[wide]),
            attn_w: params.xavier("nextvlad.attn.w", wide, groups, rng),
            attn_b: params.zeros("nextvlad.attn.b", &[groups]),
            assign_w: params.xavier("nextvlad.assign.w", group_dim, clusters, rng),
            assign_b: params.zeros("nextvlad.assign.b", &[clusters]),
            centers: params.xavier("nextvlad.centers", clusters, group_dim, rng),
            fc: GatedFc::new(params, rng, "nextvlad", clusters * group_dim, hidden),
            dim,
            clusters,
            groups,
            wide,
            dropout,
        }
    }

    /// Attention-weighted assignments `[B, T*G, C]` and raw descriptor
    /// `[B, C, D']`.
    pub(crate) fn descriptor(&self, g: &mut Graph, bound: &Bound, clips: &[Tensor]) -> Result<(Var, Var), ModelError> {
        let (b, t) = (clips.len(), clips[0].shape()[0]);
        let group_dim = self.wide / self.groups;
        let x = g.constant(stack(clips));
        let flat = g.reshape(x, &[b * t, self.dim])?;
        let wide = g.matmul(flat, bound.var(self.expand_w))?;
        let wide = g.add(wide, bound.var(self.expand_b))?;

        let attn = g.matmul(wide, bound.var(self.attn_w))?;
        let attn = g.add(attn, bound.var(self.attn_b))?;
        let attn = g.sigmoid(attn);
        let attn = g.reshape(attn, &[b, t * self.groups, 1])?;

        let grouped = g.reshape(wide, &[b * t * self.groups, group_dim])?;
        let logits = g.matmul(grouped, bound.var(self.assign_w))?;
        let logits = g.add(logits, bound.var(self.assign_b))?;
        let assign = g.softmax(logits);
        let assign = g.reshape(assign, &[b, t * self.groups, self.clusters])?;
        let assign = g.mul(assign, attn)?;

        let grouped = g.reshape(grouped, &[b, t * self.groups, group_dim])?;
        let raw = aggregate(g, assign, grouped, bound.var(self.centers))?;
        Ok((assign, raw))
    }

    pub(crate) fn encode(
        &self,
        g: &mut Graph,
        bound: &Bound,
        clips: &[Tensor],
        train: bool,
    ) -> Result<Encoded, ModelError> {
        let (_, raw) = self.descriptor(g, bound, clips)?;
        let pooled = normalize(g, raw)?;
        let pooled = g.dropout(pooled, self.dropout, train)?;
        let embedding = self.fc.forward(g, bound, pooled)?;
        Ok(Encoded { embedding, intermediates: Vec::new() })
    }
}
