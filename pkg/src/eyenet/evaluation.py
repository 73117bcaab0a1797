"""Voting inference, segmentation metrics, the point-budget benchmark and ablations."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .blocks import EyeNet, ModelConfig, prepare_input
from .errors import CoverageError, DegenerateBatch, InvalidArgument, ShapeError
from .geometry import (
    HumanVisionBatch,
    SpatialIndex,
    init_potentials,
    sample_human_vision_batch,
    select_inference_center,
    update_potentials,
)
from .pcio import RawPointCloud
from .training import Scene, TrainConfig, derived_rng, train

# --------------------------------------------------------------------------
# metrics


@dataclass
class ConfusionMatrix:
    """Counts with rows = ground truth, columns = prediction."""

    counts: np.ndarray

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @classmethod
    def from_labels(cls, truth, pred, num_classes: int) -> "ConfusionMatrix":
        cm = cls.empty(num_classes)
        cm.add(truth, pred)
        return cm

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def add(self, truth, pred) -> None:
        truth = np.asarray(truth, dtype=np.int64)
        pred = np.asarray(pred, dtype=np.int64)
        if truth.shape != pred.shape:
            raise ShapeError(f"{truth.shape} labels vs {pred.shape} predictions")
        C = self.num_classes
        if len(truth) and (min(truth.min(), pred.min()) < 0 or max(truth.max(), pred.max()) >= C):
            raise InvalidArgument(f"labels must lie in [0, {C})")
        self.counts += np.bincount(truth * C + pred, minlength=C * C).reshape(C, C)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


@dataclass
class Metrics:
    oa: float
    iou: np.ndarray  # NaN for classes absent from truth and prediction
    miou: float

    def to_record(self, **extra) -> dict:
        rec = dict(extra)
        rec.update(oa=self.oa, miou=self.miou,
                   iou=[None if np.isnan(v) else float(v) for v in self.iou])
        return rec


def compute_metrics(cm: ConfusionMatrix) -> Metrics:
    """Overall accuracy, per-class IoU and their mean over classes that occur.

    A class seen in neither truth nor prediction is left out of the mean.
    """
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise DegenerateBatch("confusion matrix is empty")
    tp = np.diag(counts)
    in_truth = counts.sum(axis=1)
    in_pred = counts.sum(axis=0)
    denom = in_truth + in_pred - tp
    iou = np.full(len(counts), np.nan)
    seen = (in_truth + in_pred) > 0
    iou[seen] = np.where(denom[seen] > 0, tp[seen] / np.where(denom[seen] > 0, denom[seen], 1), 0.0)
    return Metrics(float(tp.sum() / total), iou, float(np.mean(iou[seen])))


def metrics_table(rows: list[tuple[str, Metrics]], class_names) -> str:
    head = f"{'':<16}{'OA':>8}{'mIoU':>8}" + "".join(f"{n[:9]:>10}" for n in class_names)
    lines = [head]
    for name, m in rows:
        cells = "".join(f"{'-':>10}" if np.isnan(v) else f"{v:>10.4f}" for v in m.iou)
        lines.append(f"{name:<16}{m.oa:>8.4f}{m.miou:>8.4f}{cells}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# voting


@dataclass
class VotingState:
    sums: np.ndarray  # (n, C) accumulated class probabilities
    counts: np.ndarray  # (n,) votes per sampled point
    potentials: np.ndarray

    @classmethod
    def create(cls, n: int, num_classes: int, rng: np.random.Generator) -> "VotingState":
        return cls(np.zeros((n, num_classes)), np.zeros(n, dtype=np.int64), init_potentials(n, rng))


def accumulate_votes(state: VotingState, batch, probs, hard: bool = False) -> None:
    """Add each output row's probabilities to its cloud point's accumulator.

    ``batch`` is a HumanVisionBatch (rows in merged output order) or an array
    of cloud ids, one per row. ``hard`` votes a one-hot argmax instead.
    """
    ids = batch.output_ids() if isinstance(batch, HumanVisionBatch) else np.asarray(batch, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or len(probs) != len(ids) or probs.shape[1] != state.sums.shape[1]:
        raise ShapeError(f"probs {probs.shape} do not match {len(ids)} rows x {state.sums.shape[1]} classes")
    if len(probs) and (probs.min() < 0 or np.abs(probs.sum(axis=1) - 1.0).max() > 1e-6):
        raise InvalidArgument("probability rows must be non-negative and sum to 1")
    if hard:
        probs = np.eye(probs.shape[1])[probs.argmax(axis=1)]
    np.add.at(state.sums, ids, probs)
    np.add.at(state.counts, ids, 1)


def finalize_labels(state: VotingState, full_cloud: RawPointCloud, sampled_cloud: RawPointCloud) -> np.ndarray:
    """Label every full-resolution point with its nearest sampled point's vote."""
    if len(state.counts) != len(sampled_cloud):
        raise ShapeError(f"{len(state.counts)} accumulators for {len(sampled_cloud)} sampled points")
    uncovered = np.flatnonzero(state.counts < 1)
    if len(uncovered):
        raise CoverageError(uncovered)
    sampled_labels = np.argmax(state.sums, axis=1)
    nearest = SpatialIndex(sampled_cloud.positions).knn_batch(full_cloud.positions, 1)[:, 0]
    return sampled_labels[nearest]


# --------------------------------------------------------------------------
# inference


def covered_ids(batch: HumanVisionBatch, config: ModelConfig) -> np.ndarray:
    return batch.output_ids() if config.variant.startswith("parallel") else batch.central


def output_rows(batch: HumanVisionBatch, config: ModelConfig) -> np.ndarray:
    """Cloud id of each logit row the model produces for ``batch``."""
    return covered_ids(batch, config)


@dataclass
class InferenceResult:
    labels: np.ndarray  # per full-resolution point
    state: VotingState
    batches: int


def infer_scene(model: EyeNet, scene: Scene, N: int, seed: int = 0, workers: int = 1,
                max_batches: int | None = None, chunk: int = 8) -> InferenceResult:
    """Vote over potential-selected batches until every sampled point is covered."""
    cfg = model.config
    cloud = scene.sampled
    state = VotingState.create(len(cloud), cfg.num_classes, derived_rng(seed, 0))
    limit = max_batches if max_batches is not None else 4 * len(cloud) // N + 64
    pool = ThreadPoolExecutor(workers) if workers > 1 else None

    def run(job):
        batch, rng = job
        inp = prepare_input(cloud, batch, cfg, rng)
        with T.no_grad():
            return T.softmax(model.forward(inp), axis=-1).data

    planned = np.zeros(len(cloud), dtype=bool)
    done = 0
    try:
        while not planned.all():
            if done >= limit:
                raise CoverageError(np.flatnonzero(~planned))
            # centers depend only on potentials, so a chunk is planned up front
            jobs = []
            while len(jobs) < chunk and done + len(jobs) < limit and not planned.all():
                i = done + len(jobs)
                center = select_inference_center(state.potentials)
                batch = sample_human_vision_batch(cloud, scene.index, center, N, derived_rng(seed, i, 1))
                ids = covered_ids(batch, cfg)
                update_potentials(state.potentials, cloud.positions, center, ids, batch.radius)
                planned[ids] = True
                jobs.append((batch, derived_rng(seed, i, 2)))
            results = pool.map(run, jobs) if pool else map(run, jobs)
            for (batch, _), probs in zip(jobs, results):
                accumulate_votes(state, output_rows(batch, cfg), probs)
            done += len(jobs)
    finally:
        if pool:
            pool.shutdown()
    return InferenceResult(finalize_labels(state, scene.full, cloud), state, done)


def evaluate_scenes(model: EyeNet, scenes: list[Scene], N: int, seed: int = 0,
                    workers: int = 1) -> tuple[ConfusionMatrix, list[InferenceResult]]:
    cm = ConfusionMatrix.empty(model.config.num_classes)
    results = []
    for j, scene in enumerate(scenes):
        if scene.full.labels is None:
            raise InvalidArgument("evaluation scenes need ground-truth labels")
        res = infer_scene(model, scene, N, seed=int(derived_rng(seed, j).integers(2**31)), workers=workers)
        cm.add(scene.full.labels, res.labels)
        results.append(res)
    return cm, results


# --------------------------------------------------------------------------
# point-budget benchmark


@dataclass
class CoverageReport:
    N: int
    radius: float
    eyenet_points: int
    fixed_density_points: int
    savings: float
    duplicated: bool

    def to_table(self) -> str:
        rows = [("N", str(self.N)), ("central radius R", f"{self.radius:.4f}"),
                ("human-vision points", str(self.eyenet_points)),
                ("full density within 2R", str(self.fixed_density_points)),
                ("savings", f"{self.savings:.4f}"), ("duplicated", str(self.duplicated).lower())]
        return "\n".join(f"{k:<26}{v:>12}" for k, v in rows)

    def to_record(self) -> dict:
        return {"N": self.N, "radius": self.radius, "eyenet_points": self.eyenet_points,
                "fixed_density_points": self.fixed_density_points, "savings": self.savings,
                "duplicated": self.duplicated}


def planar_uniform_cloud(density: float, N: int, seed: int = 0, jitter: float = 0.15,
                         margin: float = 1.5) -> RawPointCloud:
    """Jittered square grid (in-plane) big enough to hold the 2R disc around its middle."""
    if not density > 0:
        raise InvalidArgument("density must be positive")
    step = 1.0 / np.sqrt(density)
    radius = np.sqrt(N / (np.pi * density))
    side = int(np.ceil(2 * 2 * radius * margin / step)) + 2
    g = np.stack(np.meshgrid(np.arange(side), np.arange(side), indexing="ij"), -1).reshape(-1, 2) * step
    rng = np.random.default_rng(seed)
    pos = np.c_[g + rng.uniform(-jitter, jitter, g.shape) * step, np.zeros(len(g))]
    return RawPointCloud(pos)


def coverage_benchmark(density: float | None, N: int, seed: int = 0,
                       cloud: RawPointCloud | None = None) -> CoverageReport:
    """Unique points in one human-vision batch vs. all points inside its 2R disc."""
    if cloud is None:
        cloud = planar_uniform_cloud(density, N, seed)
    pos = cloud.positions
    if len(pos) < N:
        raise InvalidArgument(f"cloud has {len(pos)} points, fewer than N={N}")
    middle = (pos.min(axis=0) + pos.max(axis=0)) / 2
    index = SpatialIndex(pos)
    center = int(index.knn(middle, 1)[0])
    batch = sample_human_vision_batch(cloud, index, center, N, derived_rng(seed, 1))
    r2 = batch.radius ** 2
    if not batch.duplicated:
        lo, hi = pos.min(axis=0)[:2], pos.max(axis=0)[:2]
        c = pos[center, :2]
        if (c - 2 * batch.radius < lo).any() or (c + 2 * batch.radius > hi).any():
            raise InvalidArgument("cloud too small to contain the 2R disc around its middle")
    d2 = np.einsum("ij,ij->i", pos - pos[center], pos - pos[center])
    fixed = int(np.count_nonzero(d2 <= 4.0 * r2))
    unique = len(np.unique(np.concatenate([batch.central, batch.peripheral])))
    return CoverageReport(N, batch.radius, unique, fixed, 1.0 - unique / fixed, batch.duplicated)


# --------------------------------------------------------------------------
# ablation


VARIANTS = ("baseline", "sequential", "parallel-no-cb", "parallel-cb")


@dataclass
class AblationResult:
    records: list[dict] = field(default_factory=list)
    param_counts: dict[str, int] = field(default_factory=dict)

    def median(self, variant: str, key: str = "miou") -> float:
        vals = [r[key] for r in self.records if r["variant"] == variant]
        if not vals:
            raise InvalidArgument(f"no runs recorded for {variant!r}")
        return float(np.median(vals))

    def variants(self) -> list[str]:
        return list(dict.fromkeys(r["variant"] for r in self.records))

    def to_table(self) -> str:
        lines = [f"{'variant':<16}{'params':>10}{'OA':>9}{'mIoU':>9}  seeds"]
        for v in self.variants():
            seeds = ",".join(str(r["seed"]) for r in self.records if r["variant"] == v)
            lines.append(f"{v:<16}{self.param_counts.get(v, 0):>10d}{self.median(v, 'oa'):>9.4f}"
                         f"{self.median(v):>9.4f}  {seeds}")
        return "\n".join(lines)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def ablation_run(train_clouds: list[RawPointCloud], test_clouds: list[RawPointCloud],
                 variants, seeds, model_config: ModelConfig, train_config: TrainConfig,
                 log=None) -> AblationResult:
    """Train and evaluate every (variant, seed); report medians over seeds."""
    for v in variants:
        if v not in VARIANTS:
            raise InvalidArgument(f"unknown variant {v!r}; choose from {VARIANTS}")
    train_scenes = [Scene.from_cloud(c, train_config.voxel_size) for c in train_clouds]
    test_scenes = [Scene.from_cloud(c, train_config.voxel_size) for c in test_clouds]
    result = AblationResult()
    for v in variants:
        mcfg = replace(model_config, variant=v)
        for seed in seeds:
            model = EyeNet.create(mcfg, seed)
            result.param_counts[v] = model.num_parameters()
            tcfg = replace(train_config, seed=seed)
            _, reports = train(model, train_scenes, tcfg)
            cm, _ = evaluate_scenes(model, test_scenes, tcfg.N, seed=seed, workers=tcfg.workers)
            rec = compute_metrics(cm).to_record(variant=v, seed=seed, params=model.num_parameters(),
                                                final_loss=reports[-1].mean_loss if reports else None)
            result.records.append(rec)
            if log:
                log(rec)
    return result
