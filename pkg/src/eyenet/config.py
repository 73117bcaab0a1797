"""JSON run configuration with validation that names the offending field."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .blocks import ModelConfig
from .errors import ConfigError, EyeNetError
from .geometry import plan_downsampling
from .selfcheck import GradcheckConfig
from .synth import SceneSpec
from .training import TrainConfig

_SECTIONS = {
    "io": {"data", "out"},
    "model": {"layer_widths", "K", "ratios", "decoder_mode", "decoder_width", "se_ratio",
              "head_hidden", "dropout", "variant", "features", "num_classes", "in_channels"},
    "sampling": {"N", "voxel_size"},
    "train": {"lr", "decay", "batch_size", "batches_per_epoch", "epochs", "seed", "loss", "clip_norm"},
    "eval": {"seeds", "variants", "hard_votes"},
    "synth": {"seed", "n_train", "n_test", "scene"},
    "coverage": {"density", "N"},
    "gradcheck": {"N", "layer_widths", "K", "ratios", "num_classes", "seed", "eps", "tolerance"},
}


def _get(d: dict, section: str, key: str, kind, default):
    value = d.get(key, default)
    name = f"{section}.{key}"
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(name, "must be an integer")
    if kind is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise ConfigError(name, "must be a number")
    if kind is str and not isinstance(value, str):
        raise ConfigError(name, "must be a string")
    if kind is bool and not isinstance(value, bool):
        raise ConfigError(name, "must be true or false")
    if kind is list and not isinstance(value, list):
        raise ConfigError(name, "must be a list")
    return float(value) if kind is float else value


def _int_list(d: dict, section: str, key: str, default) -> tuple[int, ...]:
    value = _get(d, section, key, list, list(default))
    if not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise ConfigError(f"{section}.{key}", "must be a list of integers")
    return tuple(value)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: str | None = None
    out: str | None = None
    eval_seeds: tuple[int, ...] = (0,)
    eval_variants: tuple[str, ...] = ("parallel-cb",)
    hard_votes: bool = False
    synth_seed: int = 0
    n_train: int = 8
    n_test: int = 2
    scene: SceneSpec = field(default_factory=SceneSpec)
    coverage_density: float = 25.0
    coverage_N: tuple[int, ...] = (256, 1024, 4096)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)

    @property
    def N(self) -> int:
        return self.train.N

    @property
    def seed(self) -> int:
        return self.train.seed


def parse_config(doc: dict, env: dict | None = None) -> RunConfig:
    """Build and validate a RunConfig; unknown or malformed fields raise ConfigError."""
    env = os.environ if env is None else env
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "must be a JSON object")
    for section, value in doc.items():
        if section not in _SECTIONS:
            raise ConfigError(section, "unknown section")
        if not isinstance(value, dict):
            raise ConfigError(section, "must be an object")
        for key in value:
            if key not in _SECTIONS[section]:
                raise ConfigError(f"{section}.{key}", "unknown field")
    io, m, s = doc.get("io", {}), doc.get("model", {}), doc.get("sampling", {})
    t, e, sy = doc.get("train", {}), doc.get("eval", {}), doc.get("synth", {})
    cov, gc = doc.get("coverage", {}), doc.get("gradcheck", {})

    base = ModelConfig()
    model_kwargs = dict(
        widths=_int_list(m, "model", "layer_widths", base.widths),
        k_schedule=_int_list(m, "model", "K", base.k_schedule),
        ratios=_int_list(m, "model", "ratios", base.ratios),
        decoder_mode=_get(m, "model", "decoder_mode", str, base.decoder_mode),
        decoder_width=m.get("decoder_width"),
        se_ratio=_get(m, "model", "se_ratio", int, base.se_ratio),
        head_hidden=_get(m, "model", "head_hidden", int, base.head_hidden),
        dropout=_get(m, "model", "dropout", float, base.dropout),
        variant=_get(m, "model", "variant", str, base.variant),
        features=tuple(_get(m, "model", "features", list, list(base.features))),
        num_classes=_get(m, "model", "num_classes", int, base.num_classes),
        in_channels=_get(m, "model", "in_channels", int, base.in_channels),
    )
    try:
        model = ModelConfig(**model_kwargs)
        model.validate()
    except EyeNetError as exc:
        raise ConfigError("model", str(exc)) from exc

    seed = _get(t, "train", "seed", int, 0)
    if env.get("EYENET_SEED"):
        try:
            seed = int(env["EYENET_SEED"])
        except ValueError as exc:
            raise ConfigError("EYENET_SEED", "must be an integer") from exc
    base_t = TrainConfig()
    train = TrainConfig(
        initial_lr=_get(t, "train", "lr", float, base_t.initial_lr),
        decay=_get(t, "train", "decay", float, base_t.decay),
        batch_size=_get(t, "train", "batch_size", int, base_t.batch_size),
        batches_per_epoch=_get(t, "train", "batches_per_epoch", int, base_t.batches_per_epoch),
        epochs=_get(t, "train", "epochs", int, base_t.epochs),
        seed=seed,
        loss=_get(t, "train", "loss", str, base_t.loss),
        N=_get(s, "sampling", "N", int, base_t.N),
        voxel_size=_get(s, "sampling", "voxel_size", float, base_t.voxel_size),
        clip_norm=_get(t, "train", "clip_norm", float, base_t.clip_norm),
    )
    try:
        plan_downsampling(train.N, model.layers, model.ratios)
    except EyeNetError as exc:
        raise ConfigError("sampling.N", str(exc)) from exc
    if not train.voxel_size > 0:
        raise ConfigError("sampling.voxel_size", "must be positive")
    for key, ok, rule in (("lr", train.initial_lr > 0, "must be positive"),
                          ("decay", 0 < train.decay <= 1, "must lie in (0, 1]"),
                          ("batch_size", train.batch_size >= 1, "must be at least 1"),
                          ("batches_per_epoch", train.batches_per_epoch >= 1, "must be at least 1"),
                          ("epochs", train.epochs >= 0, "must be non-negative"),
                          ("loss", train.loss in ("lovasz", "xent"), "must be 'lovasz' or 'xent'")):
        if not ok:
            raise ConfigError(f"train.{key}", rule)
    try:
        train.validate(model)
    except EyeNetError as exc:
        raise ConfigError("model.K", str(exc)) from exc

    scene_doc = sy.get("scene", {})
    if not isinstance(scene_doc, dict):
        raise ConfigError("synth.scene", "must be an object")
    try:
        scene = SceneSpec.from_dict(scene_doc)
        scene.validate()
    except TypeError as exc:
        raise ConfigError("synth.scene", f"unknown scene field ({exc})") from exc
    except EyeNetError as exc:
        raise ConfigError("synth.scene", str(exc)) from exc

    g = GradcheckConfig(
        N=_get(gc, "gradcheck", "N", int, GradcheckConfig.N),
        widths=_int_list(gc, "gradcheck", "layer_widths", GradcheckConfig.widths),
        k_schedule=_int_list(gc, "gradcheck", "K", GradcheckConfig.k_schedule),
        ratios=_int_list(gc, "gradcheck", "ratios", GradcheckConfig.ratios),
        num_classes=_get(gc, "gradcheck", "num_classes", int, GradcheckConfig.num_classes),
        seed=_get(gc, "gradcheck", "seed", int, GradcheckConfig.seed),
        eps=_get(gc, "gradcheck", "eps", float, GradcheckConfig.eps),
        tolerance=_get(gc, "gradcheck", "tolerance", float, GradcheckConfig.tolerance),
    )
    try:
        plan_downsampling(g.N, len(g.ratios), g.ratios)
    except EyeNetError as exc:
        raise ConfigError("gradcheck.N", str(exc)) from exc

    variants = tuple(_get(e, "eval", "variants", list, ["parallel-cb"]))
    for v in variants:
        if v not in ("baseline", "sequential", "parallel-no-cb", "parallel-cb"):
            raise ConfigError("eval.variants", f"unknown variant {v!r}")
    cov_N = _int_list(cov, "coverage", "N", (256, 1024, 4096))
    for n in cov_N:
        if n <= 0 or n % 4:
            raise ConfigError("coverage.N", "entries must be positive multiples of 4")
    density = _get(cov, "coverage", "density", float, 25.0)
    if not density > 0:
        raise ConfigError("coverage.density", "must be positive")

    return RunConfig(
        model=model, train=train,
        data=io.get("data"), out=io.get("out"),
        eval_seeds=_int_list(e, "eval", "seeds", (0,)),
        eval_variants=variants,
        hard_votes=_get(e, "eval", "hard_votes", bool, False),
        synth_seed=_get(sy, "synth", "seed", int, 0),
        n_train=_get(sy, "synth", "n_train", int, 8),
        n_test=_get(sy, "synth", "n_test", int, 2),
        scene=scene,
        coverage_density=density, coverage_N=cov_N,
        gradcheck=g,
    )


def load_config(path, env: dict | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot be read ({exc.strerror})") from exc
    try:
        doc: Any = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"is not valid JSON (line {exc.lineno}, column {exc.colno})") from exc
    return parse_config(doc, env)
