"""Network blocks and the two-stream segmentation model.

All features are (points, channels) tensors; neighbor tensors are
(points, K, channels). Weights live in a :class:`ParamRegistry` and the block
parameter objects below hold references into it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import InvalidArgument, InvariantViolation, ShapeError
from .geometry import (
    HumanVisionBatch,
    SpatialIndex,
    StreamPyramid,
    build_pyramid,
    draw_messenger_ordinals,
    plan_downsampling,
    upsample_indices,
)
from .pcio import RawPointCloud
from .tensor import ParamRegistry, Tensor

VARIANTS = ("parallel-cb", "parallel-no-cb", "baseline", "sequential")
STREAMS = ("central", "peripheral")


def glorot(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, size=(d_in, d_out))


@dataclass
class SharedMlp:
    W: Tensor
    b: Tensor

    @classmethod
    def create(cls, reg: ParamRegistry, name: str, d_in: int, d_out: int, rng) -> "SharedMlp":
        return cls(reg.add(f"{name}.W", glorot(rng, d_in, d_out)), reg.add(f"{name}.b", np.zeros(d_out)))

    @property
    def d_in(self) -> int:
        return self.W.shape[0]

    @property
    def d_out(self) -> int:
        return self.W.shape[1]


def shared_mlp(F: Tensor, p: SharedMlp, activation: str = "relu") -> Tensor:
    """F·W + b applied to every point row, optionally followed by ReLU."""
    F = T.as_tensor(F)
    if F.shape[-1] != p.d_in:
        raise ShapeError(f"shared_mlp: input width {F.shape[-1]} != {p.d_in}")
    y = T.matmul(F, p.W) + p.b
    if activation == "relu":
        return T.relu(y)
    if activation == "none":
        return y
    raise InvalidArgument(f"unknown activation {activation!r}")


# --------------------------------------------------------------------------
# local feature aggregation


@dataclass
class LfaParams:
    pos: SharedMlp  # 10 -> d/2
    mix: SharedMlp  # d_in + d/2 -> d
    att: SharedMlp  # d -> d
    out: SharedMlp  # d -> d_out
    res: SharedMlp  # d_in -> d_out

    @classmethod
    def create(cls, reg, name, d_in, d_out, rng) -> "LfaParams":
        d = d_out
        return cls(
            SharedMlp.create(reg, f"{name}.pos", 10, d // 2, rng),
            SharedMlp.create(reg, f"{name}.mix", d_in + d // 2, d, rng),
            SharedMlp.create(reg, f"{name}.att", d, d, rng),
            SharedMlp.create(reg, f"{name}.out", d, d_out, rng),
            SharedMlp.create(reg, f"{name}.res", d_in, d_out, rng),
        )


def relative_position_encoding(points: np.ndarray, neighbor_idx: np.ndarray) -> np.ndarray:
    """(n, K, 10) rows [p_i, p_k, p_i - p_k, |p_i - p_k|]."""
    center = np.broadcast_to(points[:, None, :], neighbor_idx.shape + (3,))
    nbr = points[neighbor_idx]
    rel = center - nbr
    dist = np.sqrt(np.einsum("ijk,ijk->ij", rel, rel))[..., None]
    return np.concatenate([center, nbr, rel, dist], axis=-1)


def lfa(points, F: Tensor, neighbor_idx, p: LfaParams) -> Tensor:
    points = np.asarray(points, dtype=np.float64)
    idx = np.asarray(neighbor_idx)
    if idx.ndim != 2 or idx.shape[0] != len(points) or F.shape[0] != len(points):
        raise ShapeError(f"lfa: {len(points)} points, features {F.shape}, neighbors {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= len(points)):
        raise IndexError("lfa: neighbor index out of range")
    enc = shared_mlp(Tensor(relative_position_encoding(points, idx)), p.pos)
    nbr_feat = T.gather_rows(F, idx)
    values = shared_mlp(T.concat([nbr_feat, enc], axis=-1), p.mix)
    scores = T.softmax(shared_mlp(values, p.att, "none"), axis=1)
    agg = T.sum(scores * values, axis=1)
    return T.relu(shared_mlp(agg, p.out, "none") + shared_mlp(F, p.res, "none"))


# --------------------------------------------------------------------------
# connection block


@dataclass
class BranchParams:
    W_a: SharedMlp  # d -> d
    W_ce: SharedMlp  # 2d + 1 -> d
    W_fc: SharedMlp  # 1 -> d

    @classmethod
    def create(cls, reg, name, d, rng) -> "BranchParams":
        return cls(
            SharedMlp.create(reg, f"{name}.W_a", d, d, rng),
            SharedMlp.create(reg, f"{name}.W_ce", 2 * d + 1, d, rng),
            SharedMlp.create(reg, f"{name}.W_fc", 1, d, rng),
        )


@dataclass
class ConnectionBlockParams:
    m1: SharedMlp
    m2: SharedMlp
    m3: SharedMlp
    central: BranchParams
    peripheral: BranchParams

    @classmethod
    def create(cls, reg, name, d, rng) -> "ConnectionBlockParams":
        return cls(
            SharedMlp.create(reg, f"{name}.m1", 2 * d, d, rng),
            SharedMlp.create(reg, f"{name}.m2", d, d, rng),
            SharedMlp.create(reg, f"{name}.m3", d, d, rng),
            BranchParams.create(reg, f"{name}.central", d, rng),
            BranchParams.create(reg, f"{name}.peripheral", d, rng),
        )


def attentive_pool(F: Tensor, W_a: SharedMlp) -> tuple[Tensor, Tensor]:
    """Channel attention: returns (ReLU(F W_a), per-point softmax-weighted channel sum)."""
    if F.ndim != 2 or F.shape[0] < 1:
        raise ShapeError(f"attentive_pool: expected (m, d) with m >= 1, got {F.shape}")
    F_ap = shared_mlp(F, W_a, "relu")
    s = T.softmax(F_ap, axis=-1)
    return F_ap, T.sum(F_ap * s, axis=-1, keepdims=True)


def channel_enhance(F: Tensor, F_ap: Tensor, f_prime: Tensor, W_ce: SharedMlp,
                    W_fc: SharedMlp) -> Tensor:
    """Sigmoid channel gate from a pooled scalar; returns F * gate + F."""
    if F.shape != F_ap.shape or f_prime.shape != (F.shape[0], 1):
        raise ShapeError(f"channel_enhance: shapes {F.shape}, {F_ap.shape}, {f_prime.shape}")
    F_ce = shared_mlp(T.concat([F, f_prime, F_ap], axis=-1), W_ce, "relu")
    s_ce = T.softmax(F_ce, axis=-1)
    f_ceat = T.sum(F_ce * s_ce, axis=-1, keepdims=True)
    gate = T.sigmoid(shared_mlp(f_ceat, W_fc, "none"))
    return F * gate + F


def replace_rows(F: Tensor, positions, rows: Tensor) -> Tensor:
    """Copy of F with ``rows[j]`` at ``positions[j]``; other rows copied bit-exactly."""
    n = F.shape[0]
    perm = np.arange(n)
    perm[np.asarray(positions, dtype=np.intp)] = n + np.arange(len(positions))
    return T.gather_rows(T.concat([F, rows], axis=0), perm)


def _check_messengers(F_c, F_ph, msg_c, msg_ph, ids_c, ids_ph):
    msg_c = np.asarray(msg_c, dtype=np.intp)
    msg_ph = np.asarray(msg_ph, dtype=np.intp)
    if len(msg_c) != len(msg_ph):
        raise InvariantViolation(f"messenger maps differ in length: {len(msg_c)} vs {len(msg_ph)}")
    for F, msg, name in ((F_c, msg_c, "central"), (F_ph, msg_ph, "peripheral")):
        if 4 * len(msg) != F.shape[0]:
            raise InvariantViolation(f"{name}: {len(msg)} messengers for {F.shape[0]} points")
        if len(np.unique(msg)) != len(msg):
            raise InvariantViolation(f"{name}: repeated messenger positions")
    if ids_c is not None and ids_ph is not None:
        if not np.array_equal(np.asarray(ids_c)[msg_c], np.asarray(ids_ph)[msg_ph]):
            raise InvariantViolation("messenger maps point at different cloud points")
    return msg_c, msg_ph


def connection_block(F_c: Tensor, F_ph: Tensor, msg_c, msg_ph, p: ConnectionBlockParams,
                     ids_c=None, ids_ph=None) -> tuple[Tensor, Tensor]:
    """Exchange information between streams through the messenger rows only."""
    msg_c, msg_ph = _check_messengers(F_c, F_ph, msg_c, msg_ph, ids_c, ids_ph)
    F_m = T.concat([T.gather_rows(F_c, msg_c), T.gather_rows(F_ph, msg_ph)], axis=-1)
    r = shared_mlp(F_m, p.m1, "relu")
    F_l = shared_mlp(shared_mlp(r, p.m2, "relu"), p.m3, "none")
    outputs = []
    for F, msg, branch in ((F_c, msg_c, p.central), (F_ph, msg_ph, p.peripheral)):
        F_ap, f_prime = attentive_pool(F_l, branch.W_a)
        enhanced = channel_enhance(F_l, F_ap, f_prime, branch.W_ce, branch.W_fc)
        outputs.append(replace_rows(F, msg, enhanced + r))
    return outputs[0], outputs[1]


# --------------------------------------------------------------------------
# decoder, merging and head


def upsample(F: Tensor, idx: np.ndarray, weights: np.ndarray) -> Tensor:
    if idx.shape[1] == 1:
        return T.gather_rows(F, idx[:, 0])
    return T.sum(T.gather_rows(F, idx) * Tensor(weights[..., None]), axis=1)


def decoder_upsample(coarse_points, coarse_F: Tensor, fine_points, mode: str = "nearest") -> Tensor:
    idx, w = upsample_indices(coarse_points, fine_points, mode)
    return upsample(coarse_F, idx, w)


@dataclass
class MergeParams:
    smooth_m: SharedMlp  # 2d -> d
    smooth_c: SharedMlp  # d -> d
    smooth_ph: SharedMlp  # d -> d
    se_reduce: SharedMlp  # d -> d/r
    se_expand: SharedMlp  # d/r -> d

    @classmethod
    def create(cls, reg, name, d, ratio, rng) -> "MergeParams":
        if d % ratio:
            raise InvalidArgument(f"squeeze ratio {ratio} must divide width {d}")
        return cls(
            SharedMlp.create(reg, f"{name}.smooth_m", 2 * d, d, rng),
            SharedMlp.create(reg, f"{name}.smooth_c", d, d, rng),
            SharedMlp.create(reg, f"{name}.smooth_ph", d, d, rng),
            SharedMlp.create(reg, f"{name}.se_reduce", d, d // ratio, rng),
            SharedMlp.create(reg, f"{name}.se_expand", d // ratio, d, rng),
        )


def squeeze_excitation(F: Tensor, p: MergeParams) -> Tensor:
    if F.ndim != 2 or F.shape[1] != p.se_reduce.d_in:
        raise ShapeError(f"squeeze_excitation: expected (n, {p.se_reduce.d_in}), got {F.shape}")
    z = T.mean(F, axis=0, keepdims=True)
    gate = T.sigmoid(shared_mlp(shared_mlp(z, p.se_reduce, "relu"), p.se_expand, "none"))
    return F * gate


def feature_merge(F_c: Tensor, F_ph: Tensor, msg_c, msg_ph, p: MergeParams,
                  ids_c=None, ids_ph=None) -> Tensor:
    """Rows ordered [central-only; messengers; peripheral-only] -> (7N/4, d)."""
    msg_c, msg_ph = _check_messengers(F_c, F_ph, msg_c, msg_ph, ids_c, ids_ph)
    only_c = np.setdiff1d(np.arange(F_c.shape[0]), msg_c)
    only_ph = np.setdiff1d(np.arange(F_ph.shape[0]), msg_ph)
    F_m = T.concat([T.gather_rows(F_c, msg_c), T.gather_rows(F_ph, msg_ph)], axis=-1)
    merged = T.concat([
        shared_mlp(T.gather_rows(F_c, only_c), p.smooth_c),
        shared_mlp(F_m, p.smooth_m),
        shared_mlp(T.gather_rows(F_ph, only_ph), p.smooth_ph),
    ], axis=0)
    return squeeze_excitation(merged, p)


@dataclass
class HeadParams:
    fc1: SharedMlp
    fc2: SharedMlp

    @classmethod
    def create(cls, reg, name, d, hidden, num_classes, rng) -> "HeadParams":
        return cls(SharedMlp.create(reg, f"{name}.fc1", d, hidden, rng),
                   SharedMlp.create(reg, f"{name}.fc2", hidden, num_classes, rng))


def head(F: Tensor, p: HeadParams, dropout: float = 0.0, rng=None) -> Tensor:
    h = shared_mlp(F, p.fc1, "relu")
    if dropout > 0 and rng is not None:
        keep = (rng.random(h.shape) >= dropout) / (1.0 - dropout)
        h = h * Tensor(keep)
    return shared_mlp(h, p.fc2, "none")


# --------------------------------------------------------------------------
# configuration and inputs


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 4
    num_classes: int = 5
    widths: tuple[int, ...] = (8, 32, 64, 128, 256)
    k_schedule: tuple[int, ...] = (16, 21, 21, 21, 16)
    ratios: tuple[int, ...] = (4, 4, 4, 4, 4)
    decoder_mode: str = "nearest"
    decoder_width: int | None = None
    se_ratio: int = 4
    head_hidden: int = 64
    dropout: float = 0.0
    variant: str = "parallel-cb"
    features: tuple[str, ...] = ("xyz", "intensity")

    def __post_init__(self):
        for name in ("widths", "k_schedule", "ratios", "features"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.decoder_width is None:
            object.__setattr__(self, "decoder_width", self.widths[1] if len(self.widths) > 1 else self.widths[0])

    @property
    def layers(self) -> int:
        return len(self.widths)

    def validate(self) -> None:
        if not (len(self.widths) == len(self.k_schedule) == len(self.ratios)) or not self.widths:
            raise InvalidArgument("widths, k_schedule and ratios need one entry per layer")
        if any(w <= 0 or w % 2 for w in self.widths):
            raise InvalidArgument(f"layer widths must be positive and even, got {self.widths}")
        if self.variant not in VARIANTS:
            raise InvalidArgument(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.decoder_mode not in ("nearest", "idw3"):
            raise InvalidArgument(f"decoder_mode must be 'nearest' or 'idw3', got {self.decoder_mode!r}")
        if self.decoder_width % self.se_ratio:
            raise InvalidArgument(f"se_ratio {self.se_ratio} must divide decoder width {self.decoder_width}")
        if not 0 <= self.dropout < 1:
            raise InvalidArgument(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.in_channels != feature_width(self.features):
            raise InvalidArgument(
                f"in_channels={self.in_channels} but features {self.features} give {feature_width(self.features)}"
            )

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels, "num_classes": self.num_classes,
            "widths": list(self.widths), "k_schedule": list(self.k_schedule),
            "ratios": list(self.ratios), "decoder_mode": self.decoder_mode,
            "decoder_width": self.decoder_width, "se_ratio": self.se_ratio,
            "head_hidden": self.head_hidden, "dropout": self.dropout,
            "variant": self.variant, "features": list(self.features),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


_FEATURE_WIDTHS = {"xyz": 3, "intensity": 1, "rgb": 3}


def feature_width(columns: Sequence[str]) -> int:
    try:
        return sum(_FEATURE_WIDTHS[c] for c in columns)
    except KeyError as exc:
        raise InvalidArgument(f"unknown feature column {exc.args[0]!r}") from None


def point_features(cloud: RawPointCloud, ids: np.ndarray, center, columns: Sequence[str]) -> np.ndarray:
    """Per-point network inputs; coordinates are taken relative to the batch center."""
    parts = []
    for c in columns:
        if c == "xyz":
            parts.append(cloud.positions[ids] - center)
        elif c == "intensity":
            if cloud.intensity is None:
                raise InvalidArgument("feature 'intensity' requested but the cloud has none")
            parts.append(cloud.intensity[ids][:, None])
        elif c == "rgb":
            if cloud.color is None:
                raise InvalidArgument("feature 'rgb' requested but the cloud has no color")
            parts.append(cloud.color[ids])
        else:
            raise InvalidArgument(f"unknown feature column {c!r}")
    return np.concatenate(parts, axis=1)


@dataclass
class NetworkInput:
    batch: HumanVisionBatch
    pyramids: dict[str, StreamPyramid]
    features: dict[str, np.ndarray]
    output_ids: np.ndarray
    labels: np.ndarray | None = None


def prepare_input(cloud: RawPointCloud, batch: HumanVisionBatch, config: ModelConfig,
                  rng: np.random.Generator) -> NetworkInput:
    """Level graphs, decimation and input features for one batch.

    Single-stream variants consume only the N central points.
    """
    plan = plan_downsampling(batch.n, config.layers, config.ratios)
    center = cloud.positions[batch.center_index]
    ordinals = draw_messenger_ordinals(plan, rng)
    streams = STREAMS if config.variant.startswith("parallel") else STREAMS[:1]
    members = {
        "central": (batch.central, batch.messenger_in_central),
        "peripheral": (batch.peripheral, batch.messenger_in_peripheral),
    }
    pyramids, features = {}, {}
    for s in streams:
        ids, msg = members[s]
        pyramids[s] = build_pyramid(cloud.positions[ids] - center, ids, msg, plan,
                                    config.k_schedule, ordinals, rng, config.decoder_mode)
        features[s] = point_features(cloud, ids, center, config.features)
    out_ids = batch.output_ids() if len(streams) == 2 else batch.central.copy()
    labels = None if cloud.labels is None else cloud.labels[out_ids]
    return NetworkInput(batch, pyramids, features, out_ids, labels)


# --------------------------------------------------------------------------
# model


@dataclass
class StreamParams:
    enc: list[LfaParams]
    mid: SharedMlp
    dec: list[SharedMlp]

    @classmethod
    def create(cls, reg, name, config: ModelConfig, in_channels: int, rng) -> "StreamParams":
        w = config.widths
        enc, d_in = [], in_channels
        for l, width in enumerate(w):
            enc.append(LfaParams.create(reg, f"{name}.enc{l}", d_in, width, rng))
            d_in = width
        mid = SharedMlp.create(reg, f"{name}.mid", w[-1], w[-1], rng)
        skip = [w[0]] + list(w[:-1])  # skip width at level l
        out = [config.decoder_width] + list(w[:-1])  # decoder output width at level l
        dec = [None] * len(w)
        below = w[-1]
        for l in reversed(range(len(w))):
            dec[l] = SharedMlp.create(reg, f"{name}.dec{l}", skip[l] + below, out[l], rng)
            below = out[l]
        return cls(enc, mid, dec)


@dataclass
class EyeNet:
    """Parameters and forward pass for one architecture variant."""

    config: ModelConfig
    registry: ParamRegistry
    streams: dict[str, StreamParams] = field(default_factory=dict)
    cb: list[ConnectionBlockParams] = field(default_factory=list)
    merge: MergeParams | None = None
    heads: dict[str, HeadParams] = field(default_factory=dict)

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "EyeNet":
        config.validate()
        rng = np.random.default_rng(seed)
        reg = ParamRegistry()
        model = cls(config, reg)
        c = config
        if c.variant in ("parallel-cb", "parallel-no-cb"):
            for s in STREAMS:
                model.streams[s] = StreamParams.create(reg, s, c, c.in_channels, rng)
            if c.variant == "parallel-cb":
                model.cb = [ConnectionBlockParams.create(reg, f"cb{l}", w, rng) for l, w in enumerate(c.widths)]
            model.merge = MergeParams.create(reg, "merge", c.decoder_width, c.se_ratio, rng)
            model.heads["out"] = HeadParams.create(reg, "head", c.decoder_width, c.head_hidden, c.num_classes, rng)
        elif c.variant == "baseline":
            model.streams["central"] = StreamParams.create(reg, "central", c, c.in_channels, rng)
            model.heads["out"] = HeadParams.create(reg, "head", c.decoder_width, c.head_hidden, c.num_classes, rng)
        else:
            model.streams["stage1"] = StreamParams.create(reg, "stage1", c, c.in_channels, rng)
            model.heads["stage1"] = HeadParams.create(reg, "head1", c.decoder_width, c.head_hidden, c.num_classes, rng)
            model.streams["stage2"] = StreamParams.create(reg, "stage2", c, c.in_channels + c.num_classes, rng)
            model.heads["out"] = HeadParams.create(reg, "head", c.decoder_width, c.head_hidden, c.num_classes, rng)
        return model

    def with_variant(self, variant: str, seed: int = 0) -> "EyeNet":
        return EyeNet.create(replace(self.config, variant=variant), seed)

    # -- passes ---------------------------------------------------------

    def _encode(self, names, pyrs, feats, use_cb: bool):
        x = dict(zip(names, feats))
        skips = {s: [] for s in names}
        for l in range(self.config.layers):
            for s, pyr in zip(names, pyrs):
                y = lfa(pyr.points[l], x[s], pyr.neighbors[l], self.streams[s].enc[l])
                if l == 0:
                    skips[s].append(y)
                x[s] = T.gather_rows(y, pyr.sub[l])
            if use_cb:
                pc, pp = pyrs
                x[names[0]], x[names[1]] = connection_block(
                    x[names[0]], x[names[1]], pc.messengers[l + 1], pp.messengers[l + 1],
                    self.cb[l], pc.ids[l + 1], pp.ids[l + 1],
                )
            for s in names:
                skips[s].append(x[s])
        return skips

    def _decode(self, s: str, pyr: StreamPyramid, skips: list[Tensor]) -> Tensor:
        p = self.streams[s]
        f = shared_mlp(skips[-1], p.mid)
        for l in reversed(range(self.config.layers)):
            up = upsample(f, pyr.up_idx[l], pyr.up_w[l])
            f = shared_mlp(T.concat([skips[l], up], axis=-1), p.dec[l])
        return f

    def forward(self, inp: NetworkInput, rng: np.random.Generator | None = None) -> Tensor:
        """Per-output-row class logits. ``rng`` enables head dropout (training)."""
        c = self.config
        if c.variant.startswith("parallel"):
            names = STREAMS
            pyrs = [inp.pyramids[s] for s in names]
            feats = [Tensor(inp.features[s]) for s in names]
            skips = self._encode(names, pyrs, feats, c.variant == "parallel-cb")
            dec = {s: self._decode(s, inp.pyramids[s], skips[s]) for s in names}
            pc, pp = pyrs
            merged = feature_merge(dec["central"], dec["peripheral"], pc.messengers[0], pp.messengers[0],
                                   self.merge, pc.ids[0], pp.ids[0])
            return head(merged, self.heads["out"], c.dropout, rng)
        pyr = inp.pyramids["central"]
        feats = Tensor(inp.features["central"])
        if c.variant == "baseline":
            skips = self._encode(["central"], [pyr], [feats], False)["central"]
            return head(self._decode("central", pyr, skips), self.heads["out"], c.dropout, rng)
        skips = self._encode(["stage1"], [pyr], [feats], False)["stage1"]
        first = head(self._decode("stage1", pyr, skips), self.heads["stage1"], c.dropout, rng)
        feats2 = T.concat([feats, first], axis=-1)
        skips = self._encode(["stage2"], [pyr], [feats2], False)["stage2"]
        return head(self._decode("stage2", pyr, skips), self.heads["out"], c.dropout, rng)

    def num_parameters(self) -> int:
        return self.registry.num_parameters()


def eyenet_forward(inp: NetworkInput, model: EyeNet, rng=None) -> Tensor:
    return model.forward(inp, rng)


def index_for(cloud: RawPointCloud) -> SpatialIndex:
    return SpatialIndex(cloud.positions)
