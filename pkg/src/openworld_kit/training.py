"""Desk-scale optimization: binary cross-entropy over cosine logits for the
class embeddings, joint contrastive anchor training, decoupled weight decay,
and the per-task driver with threshold calibration and checkpointing.

Training is single-threaded and fully deterministic per seed: batch
composition, negative subsampling, and module initialization all draw from
labeled streams of the run seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedding_space import ClassEmbeddingRegistry, ClassEntry
from .errors import MissingCheckpoint, NoSamples, ShapeMismatch
from .mscal import (
    MscalModule,
    SampleAssignment,
    _ownership_masks,
    calibrate_threshold,
    init_module,
    module_from_payload,
    module_to_payload,
    mscal_loss,
    mscal_loss_gradients,
    ood_score_map,
    project,
)
from .pyramid import PyramidGeometry
from .seeding import derive_rng


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.0125
    batch_size: int = 16
    steps_per_task: int = 500
    tau: float = 0.1
    alpha: float = 0.4
    neg_cap: int = 10
    logit_scale: float = 10.0
    quantile: float = 0.95
    seed: int = 0
    det_weight: float = 1.0
    mscal_weight: float = 1.0
    bn_momentum: float = 0.1
    hidden_dim: int | None = None
    proj_dim: int | None = None
    normalize_projection: bool = True
    share_anchor: bool = False

    def __post_init__(self):
        for name in ("learning_rate", "weight_decay", "batch_size", "tau",
                     "logit_scale", "quantile"):
            if getattr(self, name) <= 0 and name != "weight_decay":
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.steps_per_task < 0 or self.neg_cap < 0:
            raise ValueError("steps_per_task and neg_cap must be nonnegative")


# ---------------------------------------------------------------------------
# AdamW

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class OptimizerState:
    """First/second moment accumulators plus the shared step counter."""

    step: int
    exp_avg: dict[str, np.ndarray]
    exp_avg_sq: dict[str, np.ndarray]


def init_optimizer_state(params: dict[str, np.ndarray]) -> OptimizerState:
    return OptimizerState(
        step=0,
        exp_avg={k: np.zeros_like(v) for k, v in params.items()},
        exp_avg_sq={k: np.zeros_like(v) for k, v in params.items()},
    )


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    learning_rate: float,
    weight_decay: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One bias-corrected moment update with decoupled weight decay.

    The decay term `-lr * wd * theta` is applied separately from the
    gradient step, so zero gradients still shrink parameters by exactly
    (1 - lr * wd) per step.
    """
    step = state.step + 1
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    bias1 = 1.0 - beta1 ** step
    bias2 = 1.0 - beta2 ** step
    for key, theta in params.items():
        g = grads[key]
        if g.shape != theta.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != parameter {theta.shape} [{key}]")
        m = beta1 * state.exp_avg[key] + (1.0 - beta1) * g
        v = beta2 * state.exp_avg_sq[key] + (1.0 - beta2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        # factored decay so zero-gradient steps scale by exactly (1 - lr*wd)
        new_params[key] = (theta * (1.0 - learning_rate * weight_decay)
                           - learning_rate * m_hat / (np.sqrt(v_hat) + eps))
        new_m[key] = m
        new_v[key] = v
    return new_params, OptimizerState(step=step, exp_avg=new_m, exp_avg_sq=new_v)


# ---------------------------------------------------------------------------
# detection loss (classification pathway only)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x + np.log1p(np.exp(-x)), np.log1p(np.exp(x)))


def detection_loss(
    layer_grids: list[np.ndarray],
    embeddings: np.ndarray,
    trainable: np.ndarray,
    assignments: list[SampleAssignment],
    logit_scale: float,
) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy over (sampled location, known class) pairs.

    For class i the sampled locations are its assigned positives (target 1)
    and negatives (target 0); the logit is `logit_scale * cos(w_i, f)`.
    Returns the loss and gradients shaped like `embeddings`, zeroed for
    rows where `trainable` is False.
    """
    n_classes = embeddings.shape[0]
    if len(assignments) != n_classes:
        raise ShapeMismatch("one sample assignment per class is required")
    flat = [g.reshape(-1, g.shape[-1]) for g in layer_grids]
    feat_hat = []
    for f in flat:
        norms = np.linalg.norm(f, axis=1, keepdims=True)
        feat_hat.append(f / np.where(norms < 1e-12, 1.0, norms))

    total_pairs = 0
    raw_losses = []
    per_class_rows = []
    for i in range(n_classes):
        a = assignments[i]
        rows = []
        targets = []
        for j, f in enumerate(feat_hat):
            pos_idx = np.flatnonzero(a.positive[j].ravel())
            neg_idx = np.flatnonzero(a.negative[j].ravel())
            if pos_idx.size:
                rows.append(f[pos_idx])
                targets.append(np.ones(pos_idx.size))
            if neg_idx.size:
                rows.append(f[neg_idx])
                targets.append(np.zeros(neg_idx.size))
        if rows:
            rows = np.concatenate(rows)
            targets = np.concatenate(targets)
        else:
            rows = np.zeros((0, embeddings.shape[1]))
            targets = np.zeros(0)
        per_class_rows.append((rows, targets))
        total_pairs += rows.shape[0]
    if total_pairs == 0:
        raise NoSamples("detection loss has no assigned locations")

    loss = 0.0
    grads = np.zeros_like(embeddings)
    for i, (rows, targets) in enumerate(per_class_rows):
        if rows.shape[0] == 0:
            continue
        w = embeddings[i]
        w_norm = float(np.linalg.norm(w))
        w_hat = w / w_norm
        logits = logit_scale * (rows @ w_hat)
        # bce(target, logit) = softplus(logit) - target * logit
        raw_losses.append(float(np.sum(_softplus(logits) - targets * logits)))
        if trainable[i]:
            d_logit = (_sigmoid(logits) - targets) / total_pairs
            d_w_hat = logit_scale * (d_logit @ rows)
            grads[i] = (d_w_hat - float(w_hat @ d_w_hat) * w_hat) / w_norm
    loss = sum(raw_losses) / total_pairs
    return loss, grads


# ---------------------------------------------------------------------------
# assignment assembly from precomputed ownership


def _assignment_for_class(
    owners_per_scene: list[list[dict[int, np.ndarray]]],
    layer_shapes: list[tuple[int, int]],
    class_id: int,
    neg_cap: int,
    rng: np.random.Generator,
) -> SampleAssignment:
    """Batched assignment built from cached per-scene ownership masks."""
    batch = len(owners_per_scene)
    pos, other, bg = [], [], []
    for h, w in layer_shapes:
        pos.append(np.zeros((batch, h, w), dtype=bool))
        other.append(np.zeros((batch, h, w), dtype=bool))
        bg.append(np.zeros((batch, h, w), dtype=bool))
    for b, owners in enumerate(owners_per_scene):
        for j, by_class in enumerate(owners):
            any_fg = np.zeros_like(pos[j][b])
            for cls, mask in by_class.items():
                any_fg |= mask
                if cls == class_id:
                    pos[j][b] |= mask
                else:
                    other[j][b] |= mask
            bg[j][b] = ~any_fg
    for j in range(len(layer_shapes)):
        other[j] &= ~pos[j]

    n_pos = int(sum(m.sum() for m in pos))
    cap = int(neg_cap) * max(1, n_pos)
    flat_other = np.concatenate([m.ravel() for m in other])
    flat_bg = np.concatenate([m.ravel() for m in bg])
    keep = np.zeros(flat_other.size, dtype=bool)
    other_idx = np.flatnonzero(flat_other)
    if other_idx.size > cap:
        other_idx = other_idx[rng.choice(other_idx.size, size=cap, replace=False)]
    keep[other_idx] = True
    quota = cap - other_idx.size
    bg_idx = np.flatnonzero(flat_bg)
    if quota > 0 and bg_idx.size > 0:
        if bg_idx.size > quota:
            bg_idx = bg_idx[rng.choice(bg_idx.size, size=quota, replace=False)]
        keep[bg_idx] = True
    negatives = []
    offset = 0
    for m in other:
        negatives.append(keep[offset:offset + m.size].reshape(m.shape))
        offset += m.size
    return SampleAssignment(positive=pos, negative=negatives)


# ---------------------------------------------------------------------------
# task training


@dataclass
class TrainLog:
    """Per-step losses plus the calibrated OOD threshold."""

    rows: list[tuple[int, float, float, float]] = field(default_factory=list)
    theta: float = float("inf")


TRAIN_LOG_HEADER = "step,det_loss,mscal_loss,total"


def write_train_log_csv(path, log: TrainLog) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(TRAIN_LOG_HEADER + "\n")
        for step, det, con, total in log.rows:
            fh.write(f"{step},{det!r},{con!r},{total!r}\n")


def _module_param_keys(class_id: int, layer: int) -> list[tuple[str, str]]:
    names = ("w1", "b1", "gamma", "beta", "w2", "b2", "anchor")
    return [(f"mod/{class_id}/{layer}/{n}", n) for n in names]


def _init_modules_for_task(
    registry: ClassEmbeddingRegistry,
    modules: list[MscalModule],
    scenes,
    geometry: PyramidGeometry,
    config: TrainConfig,
    task_id: int,
) -> list[MscalModule]:
    """Create modules for classes that lack one, with data-dependent init.

    Running batchnorm statistics start at the statistics of an init batch
    and each layer anchor starts at the projected class embedding, so a
    fresh module is already roughly centered on its class before training.
    """
    have = {m.class_id for m in modules}
    init_scenes = scenes[: min(config.batch_size, len(scenes))]
    stacked = None
    if init_scenes:
        stacked = [np.stack([s.pyramid.layers[j] for s in init_scenes])
                   for j in range(geometry.num_layers)]
    out = list(modules)
    for class_id, entry in enumerate(registry.entries):
        if class_id in have:
            continue
        rng = derive_rng(config.seed, "module", class_id)
        module = init_module(
            class_id=class_id, task_id=task_id, dim=registry.dim,
            num_layers=geometry.num_layers, rng=rng,
            hidden_dim=config.hidden_dim, proj_dim=config.proj_dim,
            tau=config.tau, normalize=config.normalize_projection,
            share_anchor=config.share_anchor, bn_momentum=config.bn_momentum,
        )
        if stacked is not None:
            for j, params in enumerate(module.layers):
                h = stacked[j].reshape(-1, registry.dim) @ params.w1 + params.b1
                params.running_mean = h.mean(axis=0)
                params.running_var = h.var(axis=0)
        emb_grid = [entry.embedding[None, None, :] for _ in range(geometry.num_layers)]
        projected = project(module, emb_grid, mode="infer")
        for j, params in enumerate(module.layers):
            params.anchor = projected[j][0, 0].copy()
        out.append(module)
    return out


def _gather_trainable(registry, modules) -> tuple[dict[str, np.ndarray], list]:
    params: dict[str, np.ndarray] = {}
    for entry in registry.entries:
        if not entry.frozen:
            params[f"emb/{entry.name}"] = entry.embedding.copy()
    for module in modules:
        if module.frozen:
            continue
        for layer_idx, layer in enumerate(module.layers):
            for key, name in _module_param_keys(module.class_id, layer_idx):
                params[key] = getattr(layer, name).copy()
    return params, list(params.keys())


def _write_back(params: dict[str, np.ndarray], registry, modules) -> ClassEmbeddingRegistry:
    emb_updates = {}
    for entry in registry.entries:
        key = f"emb/{entry.name}"
        if key in params:
            emb_updates[entry.name] = params[key]
    registry = registry.with_embeddings(emb_updates)
    for module in modules:
        if module.frozen:
            continue
        for layer_idx, layer in enumerate(module.layers):
            for key, name in _module_param_keys(module.class_id, layer_idx):
                setattr(layer, name, params[key])
        if module.normalize:
            for layer in module.layers:
                layer.anchor = layer.anchor / np.linalg.norm(layer.anchor)
    return registry


def train_task(
    world_data,
    registry: ClassEmbeddingRegistry,
    modules: list[MscalModule],
    config: TrainConfig,
    task_id: int,
) -> tuple[ClassEmbeddingRegistry, list[MscalModule], TrainLog]:
    """Run one task's optimization and calibrate the OOD threshold.

    `world_data` provides `geometry`, `train_scenes`, and `cal_scenes`;
    scenes expose a pyramid and ground-truth boxes with class names.
    Ground truth for classes missing from the registry (future tasks,
    never-introduced classes) is ignored, leaving their locations as
    anonymous foreground. Only unfrozen embeddings and modules receive
    updates; the loss is `det_weight * detection + mscal_weight * anchor
    loss`, logged per step.
    """
    geometry = world_data.geometry
    train_scenes = list(world_data.train_scenes)
    cal_scenes = list(world_data.cal_scenes)
    if registry.current_task != task_id:
        raise ValueError(f"registry is at task {registry.current_task}, expected {task_id}")

    modules = _init_modules_for_task(registry, modules, train_scenes, geometry,
                                     config, task_id)
    modules = sorted(modules, key=lambda m: m.class_id)
    name_to_id = {e.name: i for i, e in enumerate(registry.entries)}

    # static per-scene ownership over registry classes; other names are background
    owners_cache = []
    for scene in train_scenes:
        labeled = [(sb.box, name_to_id[sb.class_name]) for sb in scene.gt
                   if sb.class_name in name_to_id]
        owners_cache.append(_ownership_masks(geometry, labeled))
    layer_shapes = [(g.height, g.width) for g in geometry.layers]

    params, _ = _gather_trainable(registry, modules)
    state = init_optimizer_state(params)
    n_classes = registry.num_known
    trainable_rows = np.array([not e.frozen for e in registry.entries])
    log = TrainLog()

    for step in range(config.steps_per_task):
        batch_rng = derive_rng(config.seed, "batch", task_id, step)
        idx = batch_rng.integers(0, len(train_scenes), size=config.batch_size)
        batch_scenes = [train_scenes[i] for i in idx]
        grids = [np.stack([s.pyramid.layers[j] for s in batch_scenes])
                 for j in range(geometry.num_layers)]
        batch_owners = [owners_cache[i] for i in idx]

        assignments = []
        for class_id in range(n_classes):
            rng = derive_rng(config.seed, "assign", task_id, step, class_id)
            assignments.append(_assignment_for_class(
                batch_owners, layer_shapes, class_id, config.neg_cap, rng))

        embeddings = np.stack([params.get(f"emb/{e.name}", e.embedding)
                               for e in registry.entries])
        det_value, det_grads = detection_loss(
            grids, embeddings, trainable_rows, assignments, config.logit_scale)

        con_value = 0.0
        grad_map: dict[str, np.ndarray] = {
            f"emb/{e.name}": config.det_weight * det_grads[i]
            for i, e in enumerate(registry.entries) if not e.frozen
        }
        for module in modules:
            assignment = assignments[module.class_id]
            if assignment.num_positive == 0:
                continue
            if module.frozen:
                projected = project(module, grids, mode="infer")
                con_value += mscal_loss(module, projected, assignment)
                continue
            _, traces = project(module, grids, mode="train", update_stats=True,
                                with_trace=True)
            value, layer_grads = mscal_loss_gradients(module, traces, assignment)
            con_value += value
            scale = config.mscal_weight / n_classes
            for layer_idx, g in enumerate(layer_grads):
                for key, name in _module_param_keys(module.class_id, layer_idx):
                    grad_map[key] = scale * g[name]
        con_value /= n_classes

        grads = {k: grad_map.get(k, np.zeros_like(v)) for k, v in params.items()}
        params, state = adamw_step(params, grads, state,
                                   config.learning_rate, config.weight_decay)
        registry = _write_back(params, registry, modules)
        params, _ = _gather_trainable(registry, modules)

        total = config.det_weight * det_value + config.mscal_weight * con_value
        log.rows.append((step, det_value, con_value, total))

    registry = _write_back(params, registry, modules)
    scores = known_positive_scores_for_registry(modules, cal_scenes, geometry, name_to_id)
    log.theta = calibrate_threshold(scores, config.quantile) if scores else float("inf")
    return registry, modules, log


def known_positive_scores_for_registry(modules, scenes, geometry, name_to_id) -> list[float]:
    scores: list[float] = []
    if not modules:
        return scores
    for scene in scenes:
        labeled = [(sb.box, name_to_id[sb.class_name]) for sb in scene.gt
                   if sb.class_name in name_to_id]
        if not labeled:
            continue
        smap = ood_score_map(modules, scene.pyramid)
        owners = _ownership_masks(geometry, labeled)
        for j, by_class in enumerate(owners):
            for _, mask in by_class.items():
                scores.extend(smap.layers[j][mask].tolist())
    return scores


def finalize_task(registry: ClassEmbeddingRegistry, modules: list[MscalModule],
                  task_id: int) -> tuple[ClassEmbeddingRegistry, list[MscalModule]]:
    """Freeze everything a finished task produced.

    Checkpoints are immutable task-boundary artifacts, so entries and
    modules are stored frozen; this keeps a class's checkpoint file
    byte-identical across all later tasks.
    """
    from dataclasses import replace as dc_replace
    from .mscal import freeze_class_modules
    entries = tuple(dc_replace(e, frozen=True) for e in registry.entries)
    registry = dc_replace(registry, entries=entries)
    freeze_class_modules(modules, task_id)
    return registry, modules


# ---------------------------------------------------------------------------
# checkpoints

REGISTRY_FILE = "registry.json"
THETA_FILE = "theta.json"
CONFIG_FILE = "config.json"
LOG_FILE = "train_log.csv"
MODULE_DIR = "modules"


def registry_to_payload(registry: ClassEmbeddingRegistry) -> dict:
    return {
        "format": 1,
        "alpha": registry.alpha,
        "generic_object": registry.generic_object.tolist(),
        "entries": [
            {"name": e.name, "task_id": e.task_id, "frozen": e.frozen,
             "embedding": e.embedding.tolist()}
            for e in registry.entries
        ],
    }


def registry_from_payload(payload: dict) -> ClassEmbeddingRegistry:
    entries = tuple(
        ClassEntry(name=e["name"], task_id=int(e["task_id"]), frozen=bool(e["frozen"]),
                   embedding=np.asarray(e["embedding"], dtype=np.float64))
        for e in payload["entries"]
    )
    return ClassEmbeddingRegistry(
        entries=entries,
        generic_object=np.asarray(payload["generic_object"], dtype=np.float64),
        alpha=float(payload["alpha"]),
    )


def _dump_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def save_checkpoint(directory, registry, modules, theta: float,
                    config: TrainConfig, log: TrainLog | None = None) -> None:
    base = Path(directory)
    (base / MODULE_DIR).mkdir(parents=True, exist_ok=True)
    _dump_json(base / REGISTRY_FILE, registry_to_payload(registry))
    _dump_json(base / THETA_FILE, {"theta": theta})
    _dump_json(base / CONFIG_FILE, vars(config) | {"format": 1})
    for module in modules:
        name = f"class_{module.class_id:03d}.json"
        _dump_json(base / MODULE_DIR / name, module_to_payload(module))
    if log is not None:
        write_train_log_csv(base / LOG_FILE, log)


def load_checkpoint(directory) -> tuple[ClassEmbeddingRegistry, list[MscalModule], float]:
    base = Path(directory)
    if not (base / REGISTRY_FILE).exists():
        raise MissingCheckpoint(f"no checkpoint at {base}")
    with open(base / REGISTRY_FILE, "r", encoding="utf-8") as fh:
        registry = registry_from_payload(json.load(fh))
    with open(base / THETA_FILE, "r", encoding="utf-8") as fh:
        theta = float(json.load(fh)["theta"])
    modules = []
    for path in sorted((base / MODULE_DIR).glob("class_*.json")):
        with open(path, "r", encoding="utf-8") as fh:
            modules.append(module_from_payload(json.load(fh)))
    return registry, modules, theta
