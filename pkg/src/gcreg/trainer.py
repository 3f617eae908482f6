"""Optimisation loop: Adam with per-group learning rates, warm-up + cosine decay,
KNN refresh and adaptive densification (clone high-gradient points, prune
low-gradient ones).

Position and translation learning rates are expressed in normalised domain
units: they are multiplied by half the largest extent of the initial grid
bounds, so a preset behaves the same on a 64 mm phantom and a 300 mm CT.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .control_points import DofConfig, GaussianSet, clone_points, init_grid, prune_points
from .errors import NumericalError, ValidationError
from .objective import evaluate, sample_batch
from .spatial_index import SpatialIndex
from .volume import MaskVolume, Volume3

log = logging.getLogger(__name__)

LR_GROUPS = {
    "positions": "position",
    "log_scales": "scale",
    "translations": "translation",
    "rotations": "rotation",
    "transform_rotations": "rotation",
}
_QUATERNIONS = ("rotations", "transform_rotations")
_LENGTH_GROUPS = ("position", "translation")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 10_000
    k: int = 10
    grid_shape: tuple = (10, 10, 10)
    dof: str = "I"
    lr_position: float = 0.005
    lr_scale: float = 0.002
    lr_translation: float = 0.002
    lr_rotation: float = 0.001
    normalized_lr: bool = True
    warmup_fraction: float = 0.05
    lr_min_ratio: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    densify: bool = True
    densify_interval: int = 100
    densify_start_fraction: float = 0.05
    densify_stop_fraction: float = 0.8
    tau_max: float | None = None
    tau_min: float | None = None
    tau_max_factor: float = 4.0
    tau_min_factor: float = 0.05
    n_min: int = 64
    n_max: int = 100_000
    inherit_adam_moments: bool = False
    knn_refresh_interval: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "grid_shape", tuple(int(s) for s in self.grid_shape))
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2")
        if not 1 <= self.k <= 64:
            raise ValidationError(f"k must be in 1..64, got {self.k}")
        if not 0 <= self.warmup_fraction < 1:
            raise ValidationError("warmup_fraction must be in [0, 1)")
        dof = DofConfig.parse(self.dof)
        lrs = {"lr_position": self.lr_position, "lr_scale": self.lr_scale}
        if dof.translation:
            lrs["lr_translation"] = self.lr_translation
        if dof.shape_rotation or dof.transform_rotation:
            lrs["lr_rotation"] = self.lr_rotation
        for name, lr in lrs.items():
            if not lr > 0:
                raise ValidationError(f"{name} must be > 0")
        if self.densify_interval < 1 or self.knn_refresh_interval < 1:
            raise ValidationError("densify_interval and knn_refresh_interval must be >= 1")
        if not 0 <= self.densify_start_fraction <= self.densify_stop_fraction <= 1:
            raise ValidationError("need 0 <= densify_start_fraction <= densify_stop_fraction <= 1")
        if self.tau_max is not None and self.tau_min is not None and not self.tau_min < self.tau_max:
            raise ValidationError("tau_min must be < tau_max")
        if not self.tau_min_factor < self.tau_max_factor:
            raise ValidationError("tau_min_factor must be < tau_max_factor")
        if not 1 <= self.n_min <= self.n_max:
            raise ValidationError("need 1 <= n_min <= n_max")

    @property
    def dof_config(self) -> DofConfig:
        return DofConfig.parse(self.dof)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ValidationError(f"unknown config key {key!r}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ValidationError(str(e)) from None

    def updated(self, **changes) -> "TrainConfig":
        return TrainConfig.from_dict(asdict(self) | changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid_shape"] = list(self.grid_shape)
        return d


# the two experiment recipes; everything else stays at the defaults
PRESETS = {
    "dirlab": dict(iterations=2000, batch_size=10_000, grid_shape=(10, 10, 10), k=10,
                   lr_position=0.005, lr_scale=0.002, lr_translation=0.002),
    "acdc": dict(iterations=2000, batch_size=10_000, grid_shape=(10, 10, 10), k=10,
                 lr_position=0.003, lr_scale=0.001, lr_translation=0.001),
}


def preset(name: str, **overrides) -> TrainConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValidationError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None
    return TrainConfig.from_dict(dict(base) | overrides)


# ---------------------------------------------------------------------------

def lr_schedule(step: int, total: int, warmup_fraction: float, base_lr: float,
                min_ratio: float = 0.01) -> float:
    """Linear warm-up from 0, then cosine decay reaching ``min_ratio * base_lr`` at the last step."""
    warm = math.ceil(warmup_fraction * total)
    if step < warm:
        return base_lr * step / warm
    span = total - 1 - warm
    if span <= 0:
        return base_lr
    progress = min((step - warm) / span, 1.0)
    lr_min = min_ratio * base_lr
    return lr_min + (base_lr - lr_min) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    skipped: int = 0

    def ensure(self, params: dict):
        for k, p in params.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)

    def append(self, parents, inherit: bool = False):
        for k in self.m:
            for buf in (self.m, self.v):
                extra = buf[k][parents] if inherit else np.zeros((len(parents),) + buf[k].shape[1:])
                buf[k] = np.concatenate([buf[k], extra])

    def keep(self, mask):
        for k in self.m:
            self.m[k] = self.m[k][mask]
            self.v[k] = self.v[k][mask]


def adam_step(params: dict, grads: dict, state: AdamState, lrs: dict,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> list[str]:
    """In-place bias-corrected Adam update; ``lrs`` maps parameter name to learning rate.

    Groups with a non-finite gradient are left untouched. Quaternion groups are
    renormalised after the update. Returns the names of skipped groups.
    """
    state.ensure(params)
    state.step += 1
    t = state.step
    skipped = []
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            skipped.append(name)
            continue
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p -= lrs[name] * m_hat / (np.sqrt(v_hat) + eps)
        if name in _QUATERNIONS:
            p /= np.linalg.norm(p, axis=1, keepdims=True)
    if skipped:
        state.skipped += 1
        log.warning("non-finite gradient in %s; step skipped for those groups", ", ".join(skipped))
    return skipped


@dataclass
class DensifyStats:
    grad_norm_sum: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(np.zeros(n), np.zeros(n, dtype=np.int64))

    def update(self, position_grad, contributed):
        self.grad_norm_sum += np.where(contributed, np.linalg.norm(position_grad, axis=1), 0.0)
        self.count += contributed

    def mean(self) -> np.ndarray:
        return self.grad_norm_sum / np.maximum(self.count, 1)


def densify(g: GaussianSet, stats: DensifyStats, cfg: TrainConfig, rng: np.random.Generator,
            adam: AdamState):
    """Clone points whose mean gradient norm exceeds tau_max, prune those below tau_min.

    Returns ``(new_set, new_stats, info)``; ``adam`` is resized in place.
    """
    norms = stats.mean()
    median = float(np.median(norms))
    tau_max = cfg.tau_max if cfg.tau_max is not None else cfg.tau_max_factor * median
    tau_min = cfg.tau_min if cfg.tau_min is not None else cfg.tau_min_factor * median
    info = {"tau_max": tau_max, "tau_min": tau_min, "cloned": 0, "pruned": 0}
    if not tau_max > 0:
        return g, DensifyStats.zeros(g.n), info

    clone = np.flatnonzero(norms > tau_max)
    clone = clone[np.argsort(-norms[clone], kind="stable")][:max(cfg.n_max - g.n, 0)]
    clone.sort()
    prune = np.flatnonzero(norms < tau_min)
    room = g.n + len(clone) - cfg.n_min
    prune = np.sort(prune[np.argsort(norms[prune], kind="stable")][:max(room, 0)])

    if len(clone):
        g = clone_points(g, clone, rng)
        adam.append(clone, inherit=cfg.inherit_adam_moments)
    if len(prune):
        keep = np.ones(g.n, dtype=bool)
        keep[prune] = False
        g = prune_points(g, prune, n_min=cfg.n_min)
        adam.keep(keep)
    info.update(cloned=len(clone), pruned=len(prune))
    return g, DensifyStats.zeros(g.n), info


# ---------------------------------------------------------------------------

@dataclass
class StepLog:
    step: int
    loss: float
    n: int
    lr_position: float
    lr_scale: float
    lr_translation: float
    ms: float
    underflow: int = 0


@dataclass
class TrainResult:
    gaussians: GaussianSet
    log: list
    config: TrainConfig
    length_scale: float
    wall_clock_s: float
    densify_events: list = field(default_factory=list)


def init_bounds(fixed: Volume3, mask: MaskVolume | None = None):
    if mask is None:
        return fixed.geometry.bounds()
    idx = fixed.geometry.voxel_indices(np.flatnonzero(mask.data > 0))
    if len(idx) == 0:
        raise ValidationError("mask selects no voxels")
    lo, hi = fixed.geometry.to_world(idx.min(0)), fixed.geometry.to_world(idx.max(0))
    # a flat mask still needs a non-degenerate lattice
    pad = np.where(hi - lo > 0, 0.0, np.asarray(fixed.spacing))
    return lo - pad, hi + pad


def train(fixed: Volume3, moving: Volume3, cfg: TrainConfig, mask: MaskVolume | None = None,
          init: GaussianSet | None = None,
          on_step: Callable[[int, GaussianSet], None] | None = None) -> TrainResult:
    rng = np.random.default_rng(cfg.seed)
    lo, hi = init_bounds(fixed, mask)
    g = init.copy() if init is not None else init_grid((lo, hi), cfg.grid_shape, cfg.dof_config)
    length = 0.5 * float((hi - lo).max()) if cfg.normalized_lr else 1.0
    base = {"position": cfg.lr_position, "scale": cfg.lr_scale,
            "translation": cfg.lr_translation, "rotation": cfg.lr_rotation}
    for grp in _LENGTH_GROUPS:
        base[grp] *= length

    adam = AdamState()
    stats = DensifyStats.zeros(g.n)
    start = math.floor(cfg.densify_start_fraction * cfg.iterations)
    stop = math.floor(cfg.densify_stop_fraction * cfg.iterations)
    index = None
    history, events = [], []
    t_start = time.perf_counter()
    for step in range(cfg.iterations):
        t0 = time.perf_counter()
        if index is None or step % cfg.knn_refresh_interval == 0:
            index = SpatialIndex(g.positions)
        lr = {grp: lr_schedule(step, cfg.iterations, cfg.warmup_fraction, b, cfg.lr_min_ratio)
              for grp, b in base.items()}
        points = sample_batch(fixed, cfg.batch_size, rng, mask)
        report, grads, batch = evaluate(g, fixed, moving, points, index, cfg.k)
        if not math.isfinite(report.ncc):
            raise NumericalError(f"non-finite loss at step {step}")
        params = g.params()
        adam_step(params, grads, adam, {k: lr[LR_GROUPS[k]] for k in params},
                  cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        contributed = np.bincount(batch.neighbors.indices.ravel(), minlength=g.n) > 0
        stats.update(grads["positions"], contributed)

        n_eval = g.n
        if cfg.densify and start <= step < stop and (step + 1) % cfg.densify_interval == 0:
            g, stats, info = densify(g, stats, cfg, rng, adam)
            info["step"] = step
            events.append(info)
            index = None
            log.debug("densify at step %d: %s", step, info)
        history.append(StepLog(step, report.ncc, n_eval, lr["position"], lr["scale"],
                               lr["translation"], 1e3 * (time.perf_counter() - t0),
                               report.underflow_count))
        if on_step is not None:
            on_step(step, g)
    return TrainResult(g, history, cfg, length, time.perf_counter() - t_start, events)


LOG_COLUMNS = ("step", "loss", "n", "lr_pos", "lr_scale", "lr_trans", "ms")


def write_log_csv(history, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in history:
            w.writerow([r.step, repr(r.loss), r.n, repr(r.lr_position), repr(r.lr_scale),
                        repr(r.lr_translation), f"{r.ms:.3f}"])
