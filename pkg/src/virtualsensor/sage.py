"""GraphSAGE virtual-sensor model: four neighbor aggregators, a two-layer
sampled forward pass, teacher-forced training-row assembly, and closed-loop
autoregressive rollout for unmonitored nodes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset
from .errors import SchemaError
from .geograph import SampleBudget, SpatialGraph, sample_neighborhood
from .nncore import Var, dropout, glorot_uniform, wrap_params

_MASK_NEG = 1e30  # additive shift that excludes padded slots from max()


class AggregatorKind(enum.Enum):
    MEAN = "mean"
    MAX_POOL = "max_pool"
    MEAN_POOL = "mean_pool"
    ATTENTIONAL = "attentional"


@dataclass(frozen=True)
class SageConfig:
    aggregator: AggregatorKind = AggregatorKind.MEAN_POOL
    hidden: tuple[int, int] = (32, 32)
    budget: SampleBudget = field(default_factory=SampleBudget)
    dropout: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if any(h <= 0 for h in self.hidden):
            raise SchemaError("hidden dims must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise SchemaError("dropout must lie in [0, 1)")


@dataclass(frozen=True)
class InitScheme:
    """How the held-out node's autoregressive slot is seeded at rollout start."""

    kind: str  # actual_first | fixed | dataset_mean
    value: float | None = None

    @classmethod
    def actual_first(cls):
        return cls("actual_first")

    @classmethod
    def fixed(cls, value: float):
        return cls("fixed", float(value))

    @classmethod
    def dataset_mean(cls):
        return cls("dataset_mean")


def init_sage_params(cfg: SageConfig, in_dim: int, rng: np.random.Generator) -> dict:
    """All trainable weights, keyed by layer; every array is 2-D."""
    params = {}
    d_prev = in_dim
    for layer, h in enumerate(cfg.hidden, start=1):
        params[f"l{layer}.w_self"] = glorot_uniform(rng, d_prev, h)
        if cfg.aggregator is AggregatorKind.MEAN:
            params[f"l{layer}.w_neigh"] = glorot_uniform(rng, d_prev, h)
        elif cfg.aggregator in (AggregatorKind.MAX_POOL, AggregatorKind.MEAN_POOL):
            params[f"l{layer}.w_pool"] = glorot_uniform(rng, d_prev, h)
            params[f"l{layer}.b_pool"] = np.zeros((1, h))
            params[f"l{layer}.w_neigh"] = glorot_uniform(rng, h, h)
        elif cfg.aggregator is AggregatorKind.ATTENTIONAL:
            params[f"l{layer}.w_neigh"] = glorot_uniform(rng, d_prev, h)
            params[f"l{layer}.attn"] = glorot_uniform(rng, 1, 2 * h)
        else:  # pragma: no cover
            raise SchemaError(f"unknown aggregator {cfg.aggregator}")
        d_prev = h
    params["head.w"] = glorot_uniform(rng, d_prev, 1)
    params["head.b"] = np.zeros((1, 1))
    return params


def _masked_mean(x: Var, mask: np.ndarray) -> Var:
    """Mean over the second-to-last axis, counting only mask==1 slots."""
    count = np.maximum(mask.sum(axis=-1, keepdims=True), 1.0)
    return (x * Var(mask[..., None])).sum(axis=-2) / Var(count)


def _neighbor_term(kind: AggregatorKind, p: dict, layer: int, self_x: Var,
                   neigh_x: Var, mask: np.ndarray) -> Var:
    """The W_neigh-side contribution to a layer's pre-activation.

    `neigh_x` has shape [..., K, d_in] with `mask` [..., K]; padded slots
    contribute nothing, and an empty neighborhood yields a zero vector.
    """
    if kind is AggregatorKind.MEAN:
        return _masked_mean(neigh_x, mask) @ p[f"l{layer}.w_neigh"]
    if kind in (AggregatorKind.MAX_POOL, AggregatorKind.MEAN_POOL):
        z = (neigh_x @ p[f"l{layer}.w_pool"] + p[f"l{layer}.b_pool"]).sigmoid()
        if kind is AggregatorKind.MEAN_POOL:
            pooled = _masked_mean(z, mask)
        else:
            shifted = z * Var(mask[..., None]) + Var((mask[..., None] - 1.0) * _MASK_NEG)
            has_any = (mask.sum(axis=-1, keepdims=True) > 0).astype(np.float64)
            pooled = shifted.max(axis=-2) * Var(has_any)
        return pooled @ p[f"l{layer}.w_neigh"]
    if kind is AggregatorKind.ATTENTIONAL:
        w = p[f"l{layer}.w_neigh"]
        h = w.shape[-1]
        attn = p[f"l{layer}.attn"]
        a_self = attn.slice_axis(1, 0, h).reshape(h, 1)
        a_neigh = attn.slice_axis(1, h, 2 * h).reshape(h, 1)
        sp = self_x @ w  # [..., h]
        nj = neigh_x @ w  # [..., K, h]
        e_self = (sp @ a_self).reshape(*sp.shape[:-1], 1, 1)
        # Moderate downshift keeps padded slots out of the stabilizing max
        # without overflowing exp; the mask multiply makes them exactly zero.
        e = (e_self + nj @ a_neigh).leaky_relu(0.2) + Var((mask[..., None] - 1.0) * 50.0)
        stabilizer = np.max(e.value, axis=-2, keepdims=True)
        ex = (e - Var(stabilizer)).exp() * Var(mask[..., None])
        # Epsilon keeps empty neighborhoods at alpha=0; small enough not to
        # disturb the sum-to-one property, large enough that its square
        # stays normal in the backward divide.
        total = ex.sum(axis=-2, keepdims=True) + 1e-30
        alpha = ex / total
        return (alpha * nj).sum(axis=-2)
    raise SchemaError(f"unknown aggregator {kind}")  # pragma: no cover


def attention_weights(p: dict, layer: int, kind: AggregatorKind, self_x: np.ndarray,
                      neigh_x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Expose the attentional softmax weights for inspection/testing."""
    if kind is not AggregatorKind.ATTENTIONAL:
        raise SchemaError("attention weights only exist for the attentional aggregator")
    pv = wrap_params(p)
    w = pv[f"l{layer}.w_neigh"]
    h = w.shape[-1]
    attn = pv[f"l{layer}.attn"]
    a_self = attn.slice_axis(1, 0, h).reshape(h, 1)
    a_neigh = attn.slice_axis(1, h, 2 * h).reshape(h, 1)
    sp = Var(self_x) @ w
    nj = Var(neigh_x) @ w
    e_self = (sp @ a_self).reshape(*sp.shape[:-1], 1, 1)
    e = (e_self + nj @ a_neigh).leaky_relu(0.2)
    shifted = e.value + (mask[..., None] - 1.0) * 50.0
    stab = np.max(shifted, axis=-2, keepdims=True)
    ex = np.exp(shifted - stab) * mask[..., None]
    return (ex / (ex.sum(axis=-2, keepdims=True) + 1e-300))[..., 0]


def aggregate(kind: AggregatorKind, self_feat: np.ndarray,
              neigh_feats: list[np.ndarray] | np.ndarray, params: dict,
              layer: int = 1) -> np.ndarray:
    """Raw aggregation of a neighbor set (no self/combination step).

    Mean returns the input-dim mean; the pooling aggregators return the
    pooled transformed vector; attentional returns the softmax-weighted sum
    of projected neighbors. Empty sets yield the aggregator's zero vector.
    """
    neigh = np.asarray(neigh_feats, dtype=np.float64)
    d = self_feat.shape[-1]
    k = 0 if neigh.size == 0 else neigh.shape[0]
    if k == 0:
        if kind is AggregatorKind.MEAN:
            return np.zeros(d)
        if kind in (AggregatorKind.MAX_POOL, AggregatorKind.MEAN_POOL):
            return np.zeros(params[f"l{layer}.w_pool"].shape[1])
        return np.zeros(params[f"l{layer}.w_neigh"].shape[1])
    if neigh.shape[-1] != d:
        raise SchemaError("neighbor feature width mismatch")
    mask = np.ones((1, k))
    pv = wrap_params(params)
    if kind is AggregatorKind.MEAN:
        return _masked_mean(Var(neigh[None]), mask).value[0]
    if kind in (AggregatorKind.MAX_POOL, AggregatorKind.MEAN_POOL):
        z = (Var(neigh[None]) @ pv[f"l{layer}.w_pool"] + pv[f"l{layer}.b_pool"]).sigmoid()
        if kind is AggregatorKind.MEAN_POOL:
            return _masked_mean(z, mask).value[0]
        return z.max(axis=-2).value[0]
    return _neighbor_term(kind, pv, layer, Var(self_feat[None]), Var(neigh[None]), mask).value[0]


@dataclass(frozen=True)
class NeighborhoodBatch:
    """Padded per-hop sample indices and masks for a batch of target nodes."""

    nodes: np.ndarray  # [B]
    idx1: np.ndarray  # [B, k1]
    mask1: np.ndarray  # [B, k1]
    idx2: np.ndarray  # [B, k1, k2]
    mask2: np.ndarray  # [B, k1, k2]


def sample_batch(g: SpatialGraph, nodes, budget: SampleBudget,
                 rng: np.random.Generator) -> NeighborhoodBatch:
    nodes = np.asarray(list(nodes), dtype=int)
    b, k1, k2 = len(nodes), budget[0], budget[1]
    idx1 = np.zeros((b, k1), dtype=int)
    mask1 = np.zeros((b, k1))
    idx2 = np.zeros((b, k1, k2), dtype=int)
    mask2 = np.zeros((b, k1, k2))
    for row, v in enumerate(nodes):
        hop1, hop2 = sample_neighborhood(g, int(v), budget, rng)
        for i, u in enumerate(hop1):
            idx1[row, i] = u
            mask1[row, i] = 1.0
            for j, w in enumerate(hop2[i]):
                idx2[row, i, j] = w
                mask2[row, i, j] = 1.0
    return NeighborhoodBatch(nodes, idx1, mask1, idx2, mask2)


def sage_forward_batch(pvars: dict, cfg: SageConfig, feats: np.ndarray,
                       batch: NeighborhoodBatch, mode: str = "eval",
                       rng: np.random.Generator | None = None,
                       dropout_masks: dict | None = None) -> Var:
    """Two-layer sampled forward pass for a batch of target nodes.

    `feats` is the finite [n_nodes, d] feature matrix for one frame (or one
    assembled state); `pvars` are autodiff-wrapped parameters. Returns the
    predicted NO2 in ug/m3 as a Var of shape [B].
    """
    kind = cfg.aggregator
    if not np.all(np.isfinite(feats)):
        raise SchemaError("forward pass requires finite node features")
    xv = Var(feats[batch.nodes])  # [B, d]
    x1 = Var(feats[batch.idx1])  # [B, k1, d]
    x2 = Var(feats[batch.idx2])  # [B, k1, k2, d]

    def drop(x: Var, name: str) -> Var:
        if dropout_masks is not None:
            return dropout(x, cfg.dropout, "train", mask=dropout_masks[name])
        return dropout(x, cfg.dropout, mode, rng=rng)

    # Layer 1: refresh hop-1 nodes from their hop-2 samples, and the target
    # from its hop-1 samples.
    pre_u = x1 @ pvars["l1.w_self"] + _neighbor_term(kind, pvars, 1, x1, x2, batch.mask2)
    h1_u = drop(pre_u, "l1_u").relu()  # [B, k1, h1]
    pre_v = xv @ pvars["l1.w_self"] + _neighbor_term(kind, pvars, 1, xv, x1, batch.mask1)
    h1_v = drop(pre_v, "l1_v").relu()  # [B, h1]

    # Layer 2: combine the target's refreshed state with its refreshed hop-1
    # neighborhood.
    pre2 = h1_v @ pvars["l2.w_self"] + _neighbor_term(kind, pvars, 2, h1_v, h1_u, batch.mask1)
    h2 = drop(pre2, "l2").relu()  # [B, h2]

    out = h2 @ pvars["head.w"] + pvars["head.b"]  # [B, 1]
    return out.reshape(out.shape[0])


def sage_forward(params: dict, cfg: SageConfig, g: SpatialGraph, node_feats: np.ndarray,
                 node: int, rng: np.random.Generator, mode: str = "eval") -> float:
    """Predict NO2 at one node; convenience wrapper over the batch pass."""
    batch = sample_batch(g, [node], cfg.budget, rng)
    out = sage_forward_batch(wrap_params(params), cfg, node_feats, batch, mode=mode, rng=rng)
    return float(out.value[0])


@dataclass(frozen=True)
class TrainingRow:
    frame: int
    node: int
    features: np.ndarray
    target: float


def make_training_rows(ds: Dataset, g: SpatialGraph) -> list[TrainingRow]:
    """One teacher-forced row per (present sensor, frame t >= 1).

    The autoregressive slot already carries the actual previous NO2 (or the
    same-hour fallback) courtesy of fill_prev_no2.
    """
    if g.n_nodes != ds.n_sensors:
        raise SchemaError("graph size does not match sensor count")
    rows = []
    for t in range(1, ds.n_frames):
        for s in range(ds.n_sensors):
            if ds.present[t, s] and np.isfinite(ds.targets[t, s]):
                rows.append(TrainingRow(t, s, ds.features[t, s], float(ds.targets[t, s])))
    return rows


def frame_features(ds: Dataset, t: int) -> np.ndarray:
    """Finite feature matrix for frame t; absent entries fall back to the
    (standardized) column mean of zero."""
    return np.nan_to_num(ds.features[t], nan=0.0, posinf=0.0, neginf=0.0)


def resolve_init(init: InitScheme, ds: Dataset, target_node: int) -> float:
    if init.kind == "fixed":
        return float(init.value)
    if init.kind == "dataset_mean":
        obs = ds.targets[ds.present]
        obs = obs[np.isfinite(obs)]
        return float(obs.mean()) if obs.size else 0.0
    if init.kind == "actual_first":
        col = ds.targets[:, target_node]
        ok = np.isfinite(col) & ds.present[:, target_node]
        if not ok.any():
            raise SchemaError("actual_first init: node has no observed values")
        return float(col[np.argmax(ok)])
    raise SchemaError(f"unknown init scheme {init.kind!r}")


def rollout(params: dict, cfg: SageConfig, g: SpatialGraph, ds: Dataset,
            target_node: int, init: InitScheme,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Closed-loop prediction series for one node, frames t = 1..T-1.

    The target's autoregressive slot holds the init value at t=1 and the
    model's own previous prediction afterwards; monitored neighbors keep
    their actual readings. Predictions are in ug/m3.
    """
    if not 0 <= target_node < ds.n_sensors:
        raise SchemaError(f"unknown node index {target_node}")
    if ds.stats is None:
        raise SchemaError("rollout needs a standardized dataset")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    ar = ds.schema.prev_no2_index
    pvars = wrap_params(params)
    prev = resolve_init(init, ds, target_node)
    preds = np.empty(ds.n_frames - 1)
    for t in range(1, ds.n_frames):
        feats = frame_features(ds, t)
        feats[target_node, ar] = ds.stats.transform_column(ar, prev)
        batch = sample_batch(g, [target_node], cfg.budget, rng)
        pred = float(sage_forward_batch(pvars, cfg, feats, batch, mode="eval").value[0])
        preds[t - 1] = pred
        prev = pred
    return preds
