"""Point-cloud containers and PLY / XYZ interchange.

Coordinates cross the file boundary as 32-bit floats and are promoted to
float64 in memory, so a save/load round trip is exact for any cloud whose
coordinates are float32-representable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    InvalidArgument,
    IoError,
    ParseError,
    ShapeError,
    TruncatedData,
    UnsupportedFormat,
)

PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
LABEL_PROPERTIES = ("class", "label", "scalar_Label")
INTENSITY_PROPERTIES = ("scalar_intensity", "intensity")


@dataclass(frozen=True)
class ClassTable:
    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if not self.names:
            raise InvalidArgument("class table needs at least one class")
        if len(set(self.names)) != len(self.names):
            raise InvalidArgument(f"class names must be unique: {self.names}")

    @property
    def count(self) -> int:
        return len(self.names)


DEFAULT_CLASSES = ClassTable(("ground", "building", "pole", "car", "vegetation"))


def _frozen(arr):
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RawPointCloud:
    """Immutable point cloud with optional per-point attributes."""

    positions: np.ndarray
    color: np.ndarray | None = None
    intensity: np.ndarray | None = None
    labels: np.ndarray | None = None
    num_classes: int | None = field(default=None)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(pos).all():
            raise InvalidArgument("point coordinates must be finite")
        n = len(pos)
        object.__setattr__(self, "positions", _frozen(pos))
        if self.color is not None:
            color = np.asarray(self.color, dtype=np.float64)
            if color.shape != (n, 3):
                raise ShapeError(f"color has shape {color.shape}, expected ({n}, 3)")
            if color.size and (color.min() < 0 or color.max() > 1):
                raise InvalidArgument("color values must lie in [0, 1]")
            object.__setattr__(self, "color", _frozen(color))
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64)
            if inten.shape != (n,):
                raise ShapeError(f"intensity has shape {inten.shape}, expected ({n},)")
            if not np.isfinite(inten).all():
                raise InvalidArgument("intensity must be finite")
            object.__setattr__(self, "intensity", _frozen(inten))
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (n,):
                raise ShapeError(f"labels have shape {labels.shape}, expected ({n},)")
            labels = labels.astype(np.int64)
            if n and labels.min() < 0:
                raise InvalidArgument("labels must be non-negative")
            if self.num_classes is not None and n and labels.max() >= self.num_classes:
                raise InvalidArgument(
                    f"label {labels.max()} out of range for {self.num_classes} classes"
                )
            object.__setattr__(self, "labels", _frozen(labels))

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, indices) -> "RawPointCloud":
        idx = np.asarray(indices, dtype=np.intp)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return RawPointCloud(
            self.positions[idx], pick(self.color), pick(self.intensity),
            pick(self.labels), self.num_classes,
        )

    def equals(self, other: "RawPointCloud") -> bool:
        """Exact (bitwise) equality of every attribute."""
        for name in ("positions", "color", "intensity", "labels"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return True


# --------------------------------------------------------------------------
# PLY


@dataclass
class _Element:
    name: str
    count: int
    properties: list = field(default_factory=list)  # (name, dtype) or (name, count_t, item_t)
    has_list: bool = False


def _parse_header(raw: bytes):
    end = raw.find(b"end_header")
    if end < 0:
        nlines = raw.count(b"\n") + 1
        raise ParseError("missing end_header", line=nlines)
    nl = raw.find(b"\n", end)
    body_start = len(raw) if nl < 0 else nl + 1
    text = raw[:end].decode("ascii", errors="replace").splitlines()
    if not text or text[0].strip() != "ply":
        raise ParseError("file does not start with 'ply'", line=1)
    fmt = None
    elements: list[_Element] = []
    for lineno, line in enumerate(text[1:], start=2):
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        key = parts[0]
        if key == "format":
            if len(parts) != 3 or parts[2] != "1.0":
                raise ParseError(f"malformed format line {line!r}", line=lineno)
            if parts[1] == "binary_big_endian":
                raise UnsupportedFormat("big-endian PLY is not supported")
            if parts[1] not in ("ascii", "binary_little_endian"):
                raise UnsupportedFormat(f"unknown PLY format {parts[1]!r}")
            fmt = parts[1]
        elif key == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise ParseError(f"malformed element line {line!r}", line=lineno)
            elements.append(_Element(parts[1], int(parts[2])))
        elif key == "property":
            if not elements:
                raise ParseError("property before any element", line=lineno)
            el = elements[-1]
            if len(parts) == 5 and parts[1] == "list":
                if parts[2] not in PLY_TYPES or parts[3] not in PLY_TYPES:
                    raise ParseError(f"unknown list type in {line!r}", line=lineno)
                el.properties.append((parts[4], PLY_TYPES[parts[2]], PLY_TYPES[parts[3]]))
                el.has_list = True
            elif len(parts) == 3 and parts[1] in PLY_TYPES:
                el.properties.append((parts[2], PLY_TYPES[parts[1]]))
            else:
                raise ParseError(f"malformed property line {line!r}", line=lineno)
        else:
            raise ParseError(f"unexpected header keyword {key!r}", line=lineno)
    if fmt is None:
        raise ParseError("header has no format line", line=len(text) + 1)
    header_lines = len(text) + 1
    return fmt, elements, body_start, header_lines


def _read_ascii(body: bytes, elements, first_line: int):
    lines = body.decode("ascii", errors="replace").splitlines()
    cursor = 0
    out = {}
    for el in elements:
        if el.has_list and el.name == "vertex":
            raise UnsupportedFormat("list properties on vertex elements are not supported")
        rows = []
        for _ in range(el.count):
            while cursor < len(lines) and not lines[cursor].strip():
                cursor += 1
            if cursor >= len(lines):
                raise TruncatedData(f"element {el.name!r}: expected {el.count} rows, got {len(rows)}")
            tokens = lines[cursor].split()
            lineno = first_line + cursor
            cursor += 1
            if el.has_list:
                continue
            if len(tokens) < len(el.properties):
                raise TruncatedData(f"row at line {lineno} has {len(tokens)} of {len(el.properties)} values")
            try:
                rows.append([float(t) for t in tokens[: len(el.properties)]])
            except ValueError:
                raise ParseError("non-numeric value", line=lineno) from None
        if not el.has_list:
            arr = np.array(rows, dtype=np.float64).reshape(el.count, len(el.properties))
            out[el.name] = {
                p[0]: arr[:, j].astype(p[1]) for j, p in enumerate(el.properties)
            }
    return out


def _read_binary(body: bytes, elements):
    offset = 0
    out = {}
    for el in elements:
        if el.has_list:
            if el.name == "vertex":
                raise UnsupportedFormat("list properties on vertex elements are not supported")
            # list elements after the vertex block are irrelevant here
            if "vertex" in out:
                break
            raise UnsupportedFormat(f"binary list element {el.name!r} before vertex data")
        dtype = np.dtype([(p[0], "<" + p[1]) for p in el.properties])
        need = el.count * dtype.itemsize
        if len(body) - offset < need:
            raise TruncatedData(
                f"element {el.name!r}: need {need} bytes, {len(body) - offset} available"
            )
        arr = np.frombuffer(body, dtype=dtype, count=el.count, offset=offset)
        offset += need
        out[el.name] = {p[0]: arr[p[0]].astype(p[1]) for p in el.properties}
    return out


def read_ply_properties(path) -> dict[str, np.ndarray]:
    """All vertex properties of a PLY file, keyed by property name."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    fmt, elements, body_start, header_lines = _parse_header(raw)
    if not any(el.name == "vertex" for el in elements):
        raise ParseError("no vertex element", line=header_lines)
    body = raw[body_start:]
    if fmt == "ascii":
        data = _read_ascii(body, elements, header_lines + 1)
    else:
        data = _read_binary(body, elements)
    return data["vertex"]


def _as_labels(values: np.ndarray, name: str) -> np.ndarray:
    if np.issubdtype(values.dtype, np.floating):
        if not np.all(np.isfinite(values)) or np.any(values != np.round(values)):
            raise ParseError(f"property {name!r} holds non-integer labels")
    return values.astype(np.int64)


def load_ply(path, num_classes: int | None = None) -> RawPointCloud:
    props = read_ply_properties(path)
    for axis in "xyz":
        if axis not in props:
            raise ParseError(f"vertex element lacks property {axis!r}", line=None)
        if not np.issubdtype(props[axis].dtype, np.floating):
            raise ParseError(f"property {axis!r} must be a float type")
    pos = np.stack([props[a].astype(np.float32) for a in "xyz"], axis=1).astype(np.float64)
    color = None
    if all(c in props for c in ("red", "green", "blue")):
        color = np.stack([props[c] for c in ("red", "green", "blue")], axis=1).astype(np.float64) / 255.0
    intensity = next(
        (props[k].astype(np.float32).astype(np.float64) for k in INTENSITY_PROPERTIES if k in props),
        None,
    )
    labels = next((_as_labels(props[k], k) for k in LABEL_PROPERTIES if k in props), None)
    return RawPointCloud(pos, color, intensity, labels, num_classes)


def _ply_columns(cloud: RawPointCloud, extra: dict[str, np.ndarray] | None = None):
    cols = [(a, "float", "f4", cloud.positions[:, j]) for j, a in enumerate("xyz")]
    if cloud.color is not None:
        q = np.round(cloud.color * 255.0).astype(np.uint8)
        cols += [(c, "uchar", "u1", q[:, j]) for j, c in enumerate(("red", "green", "blue"))]
    if cloud.intensity is not None:
        cols.append(("scalar_intensity", "float", "f4", cloud.intensity))
    if cloud.labels is not None:
        cols.append(("class", "int", "i4", cloud.labels))
    for name, values in (extra or {}).items():
        cols.append((name, "int", "i4", values))
    return cols


def _write_ply(path, n: int, cols, fmt: str) -> None:
    if fmt not in ("ascii", "binary"):
        raise InvalidArgument(f"format must be 'ascii' or 'binary', got {fmt!r}")
    ply_fmt = "ascii" if fmt == "ascii" else "binary_little_endian"
    header = ["ply", f"format {ply_fmt} 1.0", f"element vertex {n}"]
    header += [f"property {ply_t} {name}" for name, ply_t, _, _ in cols]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    if fmt == "binary":
        dtype = np.dtype([(name, "<" + code) for name, _, code, _ in cols])
        rec = np.empty(n, dtype=dtype)
        for name, _, code, values in cols:
            rec[name] = np.asarray(values).astype(code)
        body = rec.tobytes()
    else:
        fmts = ["%.9g" if code.startswith("f") else "%d" for _, _, code, _ in cols]
        lines = []
        arrays = [np.asarray(values).astype(code) for _, _, code, values in cols]
        for i in range(n):
            lines.append(" ".join(f % a[i] for f, a in zip(fmts, arrays)))
        body = ("\n".join(lines) + ("\n" if lines else "")).encode("ascii")
    try:
        with open(path, "wb") as fh:
            fh.write(head)
            fh.write(body)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def save_ply(cloud: RawPointCloud, path, format: str = "binary") -> None:  # noqa: A002
    _write_ply(path, len(cloud), _ply_columns(cloud), format)


def save_predictions(cloud: RawPointCloud, predicted_labels, path, format: str = "binary") -> None:  # noqa: A002
    pred = np.asarray(predicted_labels)
    if pred.shape != (len(cloud),):
        raise ShapeError(f"{len(pred)} predictions for {len(cloud)} points")
    _write_ply(path, len(cloud), _ply_columns(cloud, {"pred": pred.astype(np.int64)}), format)


def load_predictions(path, num_classes: int | None = None) -> tuple[RawPointCloud, np.ndarray]:
    props = read_ply_properties(path)
    if "pred" not in props:
        raise ParseError("file carries no 'pred' property")
    return load_ply(path, num_classes), _as_labels(props["pred"], "pred")


# --------------------------------------------------------------------------
# XYZ


def load_xyz(path, num_classes: int | None = None) -> RawPointCloud:
    """Whitespace-separated rows ``x y z [intensity] [label]``."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    rows = []
    ncols = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens or tokens[0].startswith("#"):
            continue
        if len(tokens) not in (3, 4, 5):
            raise ParseError(f"expected 3, 4 or 5 columns, got {len(tokens)}", line=lineno)
        if ncols is None:
            ncols = len(tokens)
        elif len(tokens) != ncols:
            raise ParseError(f"row has {len(tokens)} columns, earlier rows have {ncols}", line=lineno)
        values = []
        for col, tok in enumerate(tokens, start=1):
            try:
                values.append(float(tok))
            except ValueError:
                raise ParseError(f"non-numeric token {tok!r}", line=lineno, column=col) from None
        rows.append(values)
    if not rows:
        return RawPointCloud(np.zeros((0, 3)), num_classes=num_classes)
    arr = np.array(rows, dtype=np.float64)
    pos = arr[:, :3].astype(np.float32).astype(np.float64)
    intensity = arr[:, 3].astype(np.float32).astype(np.float64) if ncols >= 4 else None
    labels = None
    if ncols == 5:
        lab = arr[:, 4]
        if np.any(lab != np.round(lab)):
            bad = int(np.flatnonzero(lab != np.round(lab))[0])
            raise ParseError("label must be an integer", line=bad + 1, column=5)
        labels = lab.astype(np.int64)
    return RawPointCloud(pos, None, intensity, labels, num_classes)


def save_xyz(cloud: RawPointCloud, path) -> None:
    cols = [cloud.positions.astype(np.float32)]
    fmt = ["%.9g"] * 3
    if cloud.intensity is not None:
        cols.append(cloud.intensity.astype(np.float32)[:, None])
        fmt.append("%.9g")
    if cloud.labels is not None:
        if cloud.intensity is None:
            raise InvalidArgument("XYZ rows carry labels only after an intensity column")
        cols.append(cloud.labels[:, None])
        fmt.append("%d")
    try:
        np.savetxt(path, np.hstack([c.astype(np.float64) for c in cols]), fmt=fmt)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_cloud(path, num_classes: int | None = None) -> RawPointCloud:
    suffix = os.path.splitext(str(path))[1].lower()
    if suffix == ".ply":
        return load_ply(path, num_classes)
    if suffix in (".xyz", ".txt"):
        return load_xyz(path, num_classes)
    raise InvalidArgument(f"unrecognised point-cloud extension {suffix!r}")

