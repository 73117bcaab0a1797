"""Losses, Adam, the learning-rate schedule, the epoch loop and checkpoints."""

from __future__ import annotations

import hashlib
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from . import tensor as T
from .blocks import EyeNet, ModelConfig, NetworkInput, prepare_input
from .errors import CorruptCheckpoint, DegenerateBatch, InvalidArgument, IoError, MissingGradient
from .geometry import (
    SpatialIndex,
    grid_subsample,
    init_potentials,
    plan_downsampling,
    sample_human_vision_batch,
    select_inference_center,
    update_potentials,
)
from .pcio import RawPointCloud
from .tensor import ParamRegistry, Tensor

# --------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: Tensor, labels, ignore_label: int | None = None) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    n, C = logits.shape
    if labels.shape != (n,):
        raise InvalidArgument(f"{len(labels)} labels for {n} logit rows")
    keep = np.ones(n, dtype=bool) if ignore_label is None else labels != ignore_label
    if not keep.any():
        raise DegenerateBatch("every point carries the ignore label")
    if labels[keep].min() < 0 or labels[keep].max() >= C:
        raise InvalidArgument(f"labels must lie in [0, {C})")
    pick = np.zeros((n, C))
    pick[np.flatnonzero(keep), labels[keep]] = 1.0 / keep.sum()
    return -T.sum(T.log_softmax(logits, axis=-1) * Tensor(pick))


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Jaccard-loss increments along a descending-error ordering."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probs: Tensor, labels) -> Tensor:
    """Lovász extension of the Jaccard loss, averaged over classes present in ``labels``."""
    return T.sum(lovasz_softmax_terms(probs, labels))


def lovasz_softmax_terms(probs: Tensor, labels) -> Tensor:
    """Per-(point, class) contributions whose sum is ``lovasz_softmax``.

    The descending sort of errors is piecewise constant, so the loss equals
    sum(errors * weights) with the weights held fixed for differentiation.
    """
    P = probs.data
    labels = np.asarray(labels, dtype=np.int64)
    if P.ndim != 2 or P.shape[0] < 1:
        raise InvalidArgument(f"probs must be (n, C) with n >= 1, got {P.shape}")
    n, C = P.shape
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= C:
        raise InvalidArgument("labels must be one class id in [0, C) per row")
    if P.min() < 0 or P.max() > 1 or np.abs(P.sum(axis=1) - 1).max() > 1e-6:
        raise InvalidArgument("probability rows must be non-negative and sum to 1")
    fg = (labels[:, None] == np.arange(C)).astype(np.float64)
    present = np.flatnonzero(fg.sum(axis=0) > 0)
    weights = np.zeros((n, C))
    errors = np.abs(fg - P)
    for c in present:
        order = np.lexsort((np.arange(n), -errors[:, c]))
        T.note_branch(order)
        weights[order, c] = lovasz_grad(fg[order, c])
    E = Tensor(fg) + probs * Tensor(1.0 - 2.0 * fg)
    return E * Tensor(weights / len(present))


def segmentation_loss(logits: Tensor, labels, kind: str = "lovasz") -> Tensor:
    if kind == "lovasz":
        return lovasz_softmax(T.softmax(logits, axis=-1), labels)
    if kind == "xent":
        return softmax_cross_entropy(logits, labels)
    raise InvalidArgument(f"loss must be 'lovasz' or 'xent', got {kind!r}")


# --------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_registry(cls, registry: ParamRegistry) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in registry.items()},
                   {k: np.zeros_like(p.data) for k, p in registry.items()})


def adam_step(registry: ParamRegistry, state: AdamState, lr: float) -> None:
    missing = [k for k, p in registry.items() if p.grad is None]
    if missing:
        raise MissingGradient(f"no gradient for {missing[:5]}{'...' if len(missing) > 5 else ''}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.t, 1.0 - b2 ** state.t
    for k, p in registry.items():
        g = p.grad
        m = state.m.setdefault(k, np.zeros_like(p.data))
        v = state.v.setdefault(k, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    registry.zero_grad()


def clip_gradients(registry: ParamRegistry, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in registry.values() if p.grad is not None)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for p in registry.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


@dataclass
class TrainConfig:
    initial_lr: float = 0.005
    decay: float = 0.95
    batch_size: int = 16
    batches_per_epoch: int = 8
    epochs: int = 100
    seed: int = 0
    loss: str = "lovasz"
    N: int = 28672
    voxel_size: float = 0.2
    clip_norm: float = 10.0
    workers: int = 1

    def validate(self, model: ModelConfig | None = None) -> None:
        if not self.initial_lr > 0:
            raise InvalidArgument("initial_lr must be positive")
        if not 0 < self.decay <= 1:
            raise InvalidArgument("decay must lie in (0, 1]")
        if self.batch_size < 1 or self.batches_per_epoch < 1:
            raise InvalidArgument("batch_size and batches_per_epoch must be positive")
        if self.loss not in ("lovasz", "xent"):
            raise InvalidArgument(f"loss must be 'lovasz' or 'xent', got {self.loss!r}")
        if model is not None:
            plan = plan_downsampling(self.N, model.layers, model.ratios)
            for l, k in enumerate(model.k_schedule):
                if k > plan.counts[l]:
                    raise InvalidArgument(f"K={k} at layer {l} exceeds the {plan.counts[l]} points there")


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise InvalidArgument("epoch must be non-negative")
    return config.initial_lr * config.decay ** epoch


# --------------------------------------------------------------------------
# data


@dataclass
class Scene:
    """A grid-subsampled cloud with its spatial index; the unit batches are cut from."""

    full: RawPointCloud
    grid: object
    index: SpatialIndex

    @property
    def sampled(self) -> RawPointCloud:
        return self.grid.sampled

    @classmethod
    def from_cloud(cls, cloud: RawPointCloud, voxel_size: float) -> "Scene":
        grid = grid_subsample(cloud, voxel_size)
        return cls(cloud, grid, SpatialIndex(grid.sampled.positions))


def derived_rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


class SceneSampler:
    """Deterministic per-epoch stream of training inputs.

    Centers follow the potential scheme, reset each epoch from
    (seed, epoch, scene); each sample uses rngs derived from
    (seed, epoch, ordinal), so results do not depend on ``workers``.
    """

    def __init__(self, scenes: list[Scene], model_config: ModelConfig, config: TrainConfig):
        if not scenes:
            raise DegenerateBatch("no training scenes")
        self.scenes = scenes
        self.model_config = model_config
        self.config = config

    def batches(self, epoch: int) -> Iterator[list[NetworkInput]]:
        cfg = self.config
        pots = [init_potentials(len(s.sampled), derived_rng(cfg.seed, epoch, j, 0))
                for j, s in enumerate(self.scenes)]
        order = derived_rng(cfg.seed, epoch, 1).permutation(
            np.arange(cfg.batches_per_epoch * cfg.batch_size) % len(self.scenes)
        )
        pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
        try:
            for step in range(cfg.batches_per_epoch):
                jobs = []
                for i in range(step * cfg.batch_size, (step + 1) * cfg.batch_size):
                    scene = self.scenes[order[i]]
                    pot = pots[order[i]]
                    center = select_inference_center(pot)
                    batch = sample_human_vision_batch(scene.sampled, scene.index, center, cfg.N,
                                                      derived_rng(cfg.seed, epoch, i, 2))
                    update_potentials(pot, scene.sampled.positions, center,
                                      _covered(batch, self.model_config), batch.radius)
                    jobs.append((scene, batch, derived_rng(cfg.seed, epoch, i, 3)))
                build = lambda job: prepare_input(job[0].sampled, job[1], self.model_config, job[2])  # noqa: E731
                yield list(pool.map(build, jobs)) if pool else [build(j) for j in jobs]
        finally:
            if pool:
                pool.shutdown()


def _covered(batch, model_config: ModelConfig) -> np.ndarray:
    return batch.output_ids() if model_config.variant.startswith("parallel") else batch.central


# --------------------------------------------------------------------------
# epoch loop


@dataclass
class EpochReport:
    epoch: int
    lr: float
    mean_loss: float
    batches: int

    def to_line(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainState:
    adam: AdamState
    epoch: int = 0  # next epoch to run


def train_step(model: EyeNet, inputs: list[NetworkInput], config: TrainConfig, lr: float,
               state: TrainState, rng: np.random.Generator | None = None) -> float:
    reg = model.registry
    reg.zero_grad()
    losses = []
    for inp in inputs:
        if inp.labels is None:
            raise DegenerateBatch("training batch has no labels")
        loss = segmentation_loss(model.forward(inp, rng), inp.labels, config.loss)
        T.backward(loss * (1.0 / len(inputs)), reg)
        losses.append(loss.item())
    clip_gradients(reg, config.clip_norm)
    adam_step(reg, state.adam, lr)
    return float(np.mean(losses))


def train_epoch(model: EyeNet, batches: Iterable[list[NetworkInput]], config: TrainConfig,
                state: TrainState) -> EpochReport:
    epoch = state.epoch
    lr = lr_at_epoch(config, epoch)
    dropout_rng = derived_rng(config.seed, epoch, 4) if model.config.dropout > 0 else None
    losses = []
    for inputs in batches:
        losses.append(train_step(model, inputs, config, lr, state, dropout_rng))
    if not losses:
        raise DegenerateBatch("epoch produced no batches")
    mean = float(np.mean(losses))
    if not np.isfinite(mean):
        raise DegenerateBatch("non-finite epoch loss")
    state.epoch += 1
    return EpochReport(epoch, lr, mean, len(losses))


def train(model: EyeNet, scenes: list[Scene], config: TrainConfig, state: TrainState | None = None,
          epochs: int | None = None, on_epoch=None) -> tuple[TrainState, list[EpochReport]]:
    """Run epochs ``state.epoch .. epochs-1``; ``on_epoch(report, state)`` fires after each."""
    config.validate(model.config)
    state = state or TrainState(AdamState.for_registry(model.registry))
    sampler = SceneSampler(scenes, model.config, config)
    reports = []
    while state.epoch < (config.epochs if epochs is None else epochs):
        report = train_epoch(model, sampler.batches(state.epoch), config, state)
        reports.append(report)
        if on_epoch:
            on_epoch(report, state)
    return state, reports


# --------------------------------------------------------------------------
# checkpoints

_MAGIC = b"EYENETCK"
_PREAMBLE = struct.Struct("<8sIQ")


def _sha(buf: bytes) -> str:
    return hashlib.sha256(buf).hexdigest()


def save_checkpoint(path, model: EyeNet, state: TrainState, config: TrainConfig) -> None:
    """Header JSON (configs, Adam scalars, name table) then float64 LE payloads.

    A text manifest ``<path>.manifest`` lists name, shape and checksum per payload.
    """
    arrays = [(f"param/{k}", p.data) for k, p in model.registry.items()]
    arrays += [(f"adam.m/{k}", state.adam.m[k]) for k in model.registry.names()]
    arrays += [(f"adam.v/{k}", state.adam.v[k]) for k in model.registry.names()]
    table, payloads, offset = [], [], 0
    for name, arr in arrays:
        buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(buf), "sha256": _sha(buf)})
        payloads.append(buf)
        offset += len(buf)
    header = {
        "model": model.config.to_dict(),
        "train": asdict(replace(config, workers=1)),  # parallelism never changes results
        "epoch": state.epoch,
        "adam": {"t": state.adam.t, "beta1": state.adam.beta1, "beta2": state.adam.beta2, "eps": state.adam.eps},
        "tensors": table,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    manifest = "".join(f"{e['name']}\t{'x'.join(map(str, e['shape'])) or 'scalar'}\t{e['sha256']}\n" for e in table)
    try:
        with open(path, "wb") as fh:
            fh.write(_PREAMBLE.pack(_MAGIC, 1, len(head)))
            fh.write(head)
            fh.write(_sha(head).encode("ascii"))
            for buf in payloads:
                fh.write(buf)
        Path(f"{path}.manifest").write_text(manifest)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[EyeNet, TrainState, TrainConfig]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _PREAMBLE.size:
        raise CorruptCheckpoint("file shorter than the checkpoint preamble")
    magic, version, hlen = _PREAMBLE.unpack_from(raw)
    if magic != _MAGIC or version != 1:
        raise CorruptCheckpoint("not an EyeNet checkpoint")
    start = _PREAMBLE.size
    head = raw[start:start + hlen]
    digest = raw[start + hlen:start + hlen + 64]
    if len(head) != hlen or digest != _sha(head).encode("ascii"):
        raise CorruptCheckpoint("header checksum mismatch")
    header = json.loads(head)
    body = raw[start + hlen + 64:]
    arrays = {}
    for e in header["tensors"]:
        buf = body[e["offset"]:e["offset"] + e["nbytes"]]
        if len(buf) != e["nbytes"] or _sha(buf) != e["sha256"]:
            raise CorruptCheckpoint(f"payload {e['name']} is truncated or corrupt")
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    mcfg = ModelConfig.from_dict(header["model"])
    model = EyeNet.create(mcfg)
    model.registry.load_state({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    a = header["adam"]
    adam = AdamState(
        {k[len("adam.m/"):]: v for k, v in arrays.items() if k.startswith("adam.m/")},
        {k[len("adam.v/"):]: v for k, v in arrays.items() if k.startswith("adam.v/")},
        a["t"], a["beta1"], a["beta2"], a["eps"],
    )
    return model, TrainState(adam, header["epoch"]), TrainConfig(**header["train"])
