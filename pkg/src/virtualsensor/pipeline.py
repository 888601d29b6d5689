"""Training loops, transfer learning, leave-one-location-out evaluation,
error metrics, improvement tables, and checkpoint persistence."""

from __future__ import annotations

import copy
import hashlib
import json
import os
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .baselines import (
    CnnConfig,
    GbtConfig,
    GbtModel,
    MlpConfig,
    cnn_forward_batch,
    gbt_fit,
    gbt_predict,
    init_cnn_params,
    init_mlp_params,
    mlp_forward_batch,
)
from .dataset import (
    Dataset,
    FeatureSchema,
    StandardizationStats,
    default_schema,
    fill_prev_no2,
    standardize,
)
from .errors import CheckpointError, SchemaError
from .geograph import SampleBudget, SpatialGraph
from .nncore import AdamState, Var, adam_step, collect_grads, mse_loss, wrap_params
from .sage import (
    AggregatorKind,
    InitScheme,
    SageConfig,
    frame_features,
    init_sage_params,
    make_training_rows,
    resolve_init,
    sage_forward_batch,
    sample_batch,
)

CHECKPOINT_MAGIC = b"VSCK"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Metrics


def rmse(pred, actual) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if pred.shape != actual.shape:
        raise SchemaError("rmse: series lengths differ")
    if pred.size == 0:
        raise SchemaError("rmse: empty series")
    return float(np.sqrt(np.mean((pred - actual) ** 2)))


def nrmse(pred, actual) -> float:
    """RMSE normalized by the mean of the actual series (per location)."""
    actual = np.asarray(actual, dtype=np.float64)
    m = float(actual.mean()) if actual.size else 0.0
    if m <= 0:
        raise SchemaError("nrmse: non-positive mean of actual series")
    return rmse(pred, actual) / m


def grad_rmse(pred, actual) -> float:
    """RMSE between first differences of the two series; offset-blind."""
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if len(pred) < 2 or len(actual) < 2:
        raise SchemaError("grad_rmse: need at least 2 points")
    return rmse(np.diff(pred), np.diff(actual))


def improvement(base: float, new: float) -> float:
    """Percentage improvement of `new` over `base`: (base - new) / base * 100."""
    if base <= 0:
        raise SchemaError("improvement: base metric must be positive")
    return (base - new) / base * 100.0


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    patience: int = 10  # early stop on validation MSE
    val_fraction: float = 0.1  # chronological tail of training frames
    seed: int = 0
    model: str = "sage"  # sage | mlp | cnn | gbt

    def __post_init__(self):
        if self.epochs < 1 or self.patience < 1:
            raise SchemaError("epochs and patience must be >= 1")
        if self.model not in ("sage", "mlp", "cnn", "gbt"):
            raise SchemaError(f"unknown model kind {self.model!r}")


@dataclass(frozen=True)
class TransferConfig:
    source: TrainConfig = field(default_factory=TrainConfig)
    finetune_epochs: int = 20
    finetune_lr: float = 1e-4
    freeze: tuple[str, ...] = ()  # parameter-name prefixes left untouched

    def __post_init__(self):
        if self.finetune_lr > self.source.lr:
            raise SchemaError("fine-tune lr must not exceed pretrain lr")


DEFAULT_MODEL_CONFIGS = {
    "sage": SageConfig,
    "mlp": MlpConfig,
    "cnn": CnnConfig,
    "gbt": GbtConfig,
}


@dataclass
class TrainedModel:
    kind: str
    model_config: object
    params: dict | GbtModel
    history: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Model adapters: one uniform per-frame prediction surface


def predict_frame(trained_kind: str, model_cfg, params_or_pvars, g: SpatialGraph,
                  feats: np.ndarray, nodes, mode: str, rng: np.random.Generator):
    """Predict NO2 for `nodes` given one frame's feature matrix.

    For neural kinds `params_or_pvars` must be autodiff-wrapped; for gbt it
    is the fitted GbtModel and the return value is a plain array.
    """
    nodes = np.asarray(list(nodes), dtype=int)
    if trained_kind == "sage":
        batch = sample_batch(g, nodes, model_cfg.budget, rng)
        return sage_forward_batch(params_or_pvars, model_cfg, feats, batch, mode=mode, rng=rng)
    rows = np.nan_to_num(feats[nodes], nan=0.0)
    if trained_kind == "mlp":
        return mlp_forward_batch(params_or_pvars, model_cfg, rows, mode=mode, rng=rng)
    if trained_kind == "cnn":
        return cnn_forward_batch(params_or_pvars, model_cfg, rows, mode=mode, rng=rng)
    if trained_kind == "gbt":
        return gbt_predict(params_or_pvars, rows)
    raise SchemaError(f"unknown model kind {trained_kind!r}")


def init_model_params(kind: str, model_cfg, in_dim: int, rng: np.random.Generator) -> dict:
    if kind == "sage":
        return init_sage_params(model_cfg, in_dim, rng)
    if kind == "mlp":
        return init_mlp_params(model_cfg, in_dim, rng)
    if kind == "cnn":
        return init_cnn_params(model_cfg, in_dim, rng)
    raise SchemaError(f"no trainable parameters for model kind {kind!r}")


# ---------------------------------------------------------------------------
# Training


def _frame_groups(ds: Dataset) -> dict[int, np.ndarray]:
    """Present (finite-target) node lists per frame t >= 1."""
    groups = {}
    ok = ds.present & np.isfinite(ds.targets)
    for t in range(1, ds.n_frames):
        nodes = np.flatnonzero(ok[t])
        if nodes.size:
            groups[t] = nodes
    return groups


def train(ds: Dataset, g: SpatialGraph, cfg: TrainConfig, model_cfg=None,
          init_params: dict | None = None) -> TrainedModel:
    """Teacher-forced training on a standardized, prev-filled dataset.

    Rows are grouped by frame (all present nodes of a frame form one batch);
    frames are shuffled per epoch. Validation uses the chronological last
    `val_fraction` of frames; early stopping restores the best parameters.
    """
    if ds.stats is None:
        raise SchemaError("train expects a standardized dataset")
    if model_cfg is None:
        model_cfg = DEFAULT_MODEL_CONFIGS[cfg.model]()

    if cfg.model == "gbt":
        rows = make_training_rows(ds, g)
        if not rows:
            raise SchemaError("no training rows")
        x = np.nan_to_num(np.stack([r.features for r in rows]), nan=0.0)
        y = np.array([r.target for r in rows])
        model = gbt_fit(x, y, model_cfg)
        return TrainedModel("gbt", model_cfg, model, {"train": model.train_mse})

    rng = np.random.default_rng(cfg.seed)
    params = (
        {k: v.copy() for k, v in init_params.items()}
        if init_params is not None
        else init_model_params(cfg.model, model_cfg, ds.schema.width, rng)
    )
    adam = AdamState(lr=cfg.lr)

    groups = _frame_groups(ds)
    frames = sorted(groups)
    if not frames:
        raise SchemaError("no training frames")
    n_val = int(len(frames) * cfg.val_fraction)
    train_frames = frames[: len(frames) - n_val] if n_val else frames
    val_frames = frames[len(frames) - n_val :] if n_val else []

    feats_all = np.nan_to_num(ds.features, nan=0.0)
    targets = ds.targets

    def evaluate(frame_list) -> float:
        total, count = 0.0, 0
        for t in frame_list:
            nodes = groups[t]
            out = predict_frame(cfg.model, model_cfg, wrap_params(params), g,
                                feats_all[t], nodes, "eval", rng)
            total += float(np.sum((out.value - targets[t, nodes]) ** 2))
            count += nodes.size
        return total / max(count, 1)

    history = {"train": [], "val": []}
    best_val = np.inf
    best_params = {k: v.copy() for k, v in params.items()}
    bad_epochs = 0

    for _epoch in range(cfg.epochs):
        order = rng.permutation(train_frames)
        total, count = 0.0, 0
        for t in order:
            nodes = groups[t]
            pvars = wrap_params(params)
            pred = predict_frame(cfg.model, model_cfg, pvars, g, feats_all[t],
                                 nodes, "train", rng)
            loss = mse_loss(pred, targets[t, nodes])
            if not np.isfinite(loss.value):
                raise SchemaError(f"non-finite training loss at frame {t}")
            loss.backward()
            adam_step(params, collect_grads(pvars), adam)
            total += float(loss.value) * nodes.size
            count += nodes.size
        history["train"].append(total / max(count, 1))

        if val_frames:
            val = evaluate(val_frames)
            history["val"].append(val)
            if val < best_val - 1e-12:
                best_val = val
                best_params = {k: v.copy() for k, v in params.items()}
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= cfg.patience:
                    break
        else:
            best_params = {k: v.copy() for k, v in params.items()}

    if not val_frames:
        best_params = params
    return TrainedModel(cfg.model, model_cfg, best_params, history)


def transfer(source_ds: Dataset, target_ds: Dataset, graphs: tuple[SpatialGraph, SpatialGraph],
             tcfg: TransferConfig, model_cfg=None) -> TrainedModel:
    """Pretrain on the source city, then fine-tune every layer on the target
    at the (lower) fine-tune learning rate with a fresh optimizer."""
    if source_ds.schema.names != target_ds.schema.names:
        raise SchemaError("source/target feature schemas differ")
    g_src, g_tgt = graphs
    pretrained = train(source_ds, g_src, tcfg.source, model_cfg)
    if tcfg.finetune_epochs == 0:
        return pretrained
    ft_cfg = replace(
        tcfg.source, epochs=tcfg.finetune_epochs, lr=tcfg.finetune_lr
    )
    if tcfg.freeze:
        frozen = {
            k: v.copy()
            for k, v in pretrained.params.items()
            if any(k.startswith(p) for p in tcfg.freeze)
        }
    tuned = train(target_ds, g_tgt, ft_cfg, pretrained.model_config,
                  init_params=pretrained.params)
    if tcfg.freeze:
        tuned.params.update(frozen)
    return tuned


# ---------------------------------------------------------------------------
# Closed-loop prediction (works for every model kind)


def closed_loop_predict(trained: TrainedModel, g: SpatialGraph, ds: Dataset,
                        target_node: int, init: InitScheme,
                        rng: np.random.Generator | None = None) -> np.ndarray:
    """Autoregressive rollout for one node, frames t = 1..T-1, in ug/m3."""
    if ds.stats is None:
        raise SchemaError("closed_loop_predict needs a standardized dataset")
    if rng is None:
        rng = np.random.default_rng(0)
    ar = ds.schema.prev_no2_index
    runner = trained.params if trained.kind == "gbt" else wrap_params(trained.params)
    prev = resolve_init(init, ds, target_node)
    preds = np.empty(ds.n_frames - 1)
    for t in range(1, ds.n_frames):
        feats = frame_features(ds, t)
        feats[target_node, ar] = ds.stats.transform_column(ar, prev)
        out = predict_frame(trained.kind, trained.model_config, runner, g, feats,
                            [target_node], "eval", rng)
        value = float(out.value[0]) if isinstance(out, Var) else float(out[0])
        preds[t - 1] = value
        prev = value
    return preds


# ---------------------------------------------------------------------------
# Leave-one-location-out evaluation


@dataclass
class EvalReport:
    model: str
    per_location: dict[str, dict[str, float]]  # sensor id -> metric -> value
    averages: dict[str, float]
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "per_location": self.per_location,
            "averages": self.averages,
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        avg = self.averages
        return (
            "model,rmse,nrmse,grad_rmse\n"
            f"{self.model},{avg['rmse']:.6f},{avg['nrmse']:.6f},{avg['grad_rmse']:.6f}\n"
        )

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls(
            model=data["model"],
            per_location={k: dict(v) for k, v in data["per_location"].items()},
            averages=dict(data["averages"]),
            metadata=dict(data.get("metadata", {})),
        )


def fold_dataset(ds: Dataset, holdout: int) -> Dataset:
    """Censor one sensor: targets erased, presence cleared, features kept."""
    targets = ds.targets.copy()
    present = ds.present.copy()
    targets[:, holdout] = np.nan
    present[:, holdout] = False
    return replace(ds, targets=targets, present=present)


def _run_fold(ds_raw: Dataset, g: SpatialGraph, cfg: TrainConfig, model_cfg,
              init_params, holdout: int):
    """Train with the held-out sensor censored, then roll out on it.

    Returns (predictions over eval frames, actuals, trained model) or None
    when the sensor has no usable frames. The held-out sensor's actual
    values are touched exactly once, for the rollout init.
    """
    observed = ds_raw.present[:, holdout] & np.isfinite(ds_raw.targets[:, holdout])
    eval_frames = np.flatnonzero(observed)
    eval_frames = eval_frames[eval_frames >= 1]
    if eval_frames.size == 0:
        warnings.warn(f"holdout sensor {ds_raw.locations[holdout].id} has no present frames; skipped")
        return None
    init_value = float(ds_raw.targets[np.argmax(observed), holdout])

    censored = fold_dataset(ds_raw, holdout)
    prepared, _stats = standardize(fill_prev_no2(censored))
    trained = train(prepared, g, cfg, model_cfg, init_params=init_params)
    preds = closed_loop_predict(
        trained, g, prepared, holdout, InitScheme.fixed(init_value),
        rng=np.random.default_rng(cfg.seed + 1000 + holdout),
    )
    pred_series = np.clip(preds[eval_frames - 1], 0.0, None)
    actual = ds_raw.targets[eval_frames, holdout]
    return pred_series, actual, trained


def leave_one_out(ds_raw: Dataset, g: SpatialGraph, cfg: TrainConfig,
                  model_cfg=None, init_params: dict | None = None) -> EvalReport:
    """Train on all sensors but one, roll out on the excluded one, repeat.

    `ds_raw` must be unstandardized; each fold computes its own stats with
    the held-out sensor's targets censored. Folds may run concurrently
    (capped by VS_THREADS); results merge in ascending sensor-id order.
    """
    if ds_raw.stats is not None:
        raise SchemaError("leave_one_out expects an unstandardized dataset")
    if ds_raw.n_sensors < 2:
        raise SchemaError("leave_one_out needs at least 2 locations")
    if model_cfg is None:
        model_cfg = DEFAULT_MODEL_CONFIGS[cfg.model]()

    folds = list(range(ds_raw.n_sensors))
    max_workers = int(os.environ.get("VS_THREADS", len(folds)) or 1)

    def run(holdout):
        return _run_fold(ds_raw, g, cfg, model_cfg, init_params, holdout)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(run, folds))
    else:
        results = [run(h) for h in folds]

    per_location = {}
    for holdout, result in zip(folds, results):
        if result is None:
            continue
        pred, actual, _trained = result
        per_location[ds_raw.locations[holdout].id] = {
            "rmse": rmse(pred, actual),
            "nrmse": nrmse(pred, actual),
            "grad_rmse": grad_rmse(pred, actual),
        }
    if not per_location:
        raise SchemaError("no location produced evaluable predictions")

    ordered = dict(sorted(per_location.items()))
    averages = {
        metric: float(np.mean([entry[metric] for entry in ordered.values()]))
        for metric in ("rmse", "nrmse", "grad_rmse")
    }
    metadata = {
        "model": cfg.model,
        "seed": cfg.seed,
        "config_hash": config_hash(cfg, model_cfg),
        "n_locations": len(ordered),
        "transfer": init_params is not None,
    }
    return EvalReport(cfg.model, ordered, averages, metadata)


def improvement_table(base: EvalReport, new: EvalReport) -> dict[str, float]:
    return {
        metric: improvement(base.averages[metric], new.averages[metric])
        for metric in ("rmse", "nrmse", "grad_rmse")
    }


# ---------------------------------------------------------------------------
# Config (de)serialization and checkpoints


def model_config_to_dict(kind: str, model_cfg) -> dict:
    if kind == "sage":
        return {
            "aggregator": model_cfg.aggregator.value,
            "hidden": list(model_cfg.hidden),
            "budget": list(model_cfg.budget.per_hop),
            "dropout": model_cfg.dropout,
            "seed": model_cfg.seed,
        }
    return asdict(model_cfg)


def model_config_from_dict(kind: str, data: dict):
    if kind == "sage":
        return SageConfig(
            aggregator=AggregatorKind(data["aggregator"]),
            hidden=tuple(data["hidden"]),
            budget=SampleBudget(tuple(data["budget"])),
            dropout=data["dropout"],
            seed=data["seed"],
        )
    cls = {"mlp": MlpConfig, "cnn": CnnConfig, "gbt": GbtConfig}[kind]
    data = dict(data)
    for key in ("hidden", "freeze"):
        if isinstance(data.get(key), list):
            data[key] = tuple(data[key])
    return cls(**data)


def config_hash(cfg: TrainConfig, model_cfg) -> str:
    blob = json.dumps(
        {"train": asdict(cfg), "model": model_config_to_dict(cfg.model, model_cfg)},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def schema_hash(schema: FeatureSchema) -> int:
    digest = hashlib.sha256("|".join(",".join(c) for c in schema.columns).encode()).digest()
    return struct.unpack("<Q", digest[:8])[0]


def save_checkpoint(path, params: dict, stats: StandardizationStats,
                    train_cfg: TrainConfig, model_cfg,
                    schema: FeatureSchema | None = None) -> None:
    """Binary checkpoint: magic, version, schema hash, canonical-JSON config,
    then named little-endian float64 parameter blocks."""
    schema = schema or default_schema()
    blocks = dict(params)
    blocks["stats.mean"] = stats.mean.reshape(1, -1)
    blocks["stats.std"] = stats.std.reshape(1, -1)
    for name, arr in blocks.items():
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"refusing to save non-finite parameter {name!r}")
    config = {
        "model": train_cfg.model,
        "train": asdict(train_cfg),
        "model_config": model_config_to_dict(train_cfg.model, model_cfg),
    }
    config_bytes = json.dumps(config, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", schema_hash(schema)))
        fh.write(struct.pack("<I", len(config_bytes)))
        fh.write(config_bytes)
        fh.write(struct.pack("<I", len(blocks)))
        for name in sorted(blocks):
            arr = np.ascontiguousarray(np.atleast_2d(blocks[name]), dtype="<f8")
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            fh.write(arr.tobytes())


def load_checkpoint(path, schema: FeatureSchema | None = None):
    """Returns (params, stats, train_cfg, model_cfg); refuses mismatched
    versions or schema hashes."""
    schema = schema or default_schema()
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError("bad checkpoint magic")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (stored_hash,) = struct.unpack("<Q", fh.read(8))
        if stored_hash != schema_hash(schema):
            raise CheckpointError("checkpoint schema hash does not match")
        (config_len,) = struct.unpack("<I", fh.read(4))
        config = json.loads(fh.read(config_len).decode())
        (n_blocks,) = struct.unpack("<I", fh.read(4))
        blocks = {}
        for _ in range(n_blocks):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            rows, cols = struct.unpack("<II", fh.read(8))
            data = np.frombuffer(fh.read(rows * cols * 8), dtype="<f8")
            blocks[name] = data.reshape(rows, cols).copy()
    stats = StandardizationStats(
        mean=blocks.pop("stats.mean")[0], std=blocks.pop("stats.std")[0]
    )
    train_cfg = TrainConfig(**config["train"])
    model_cfg = model_config_from_dict(config["model"], config["model_config"])
    return blocks, stats, train_cfg, model_cfg
