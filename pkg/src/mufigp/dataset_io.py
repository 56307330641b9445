"""Multi-fidelity datasets and model files.

On disk a dataset is a JSON manifest plus one CSV per fidelity level::

    {
      "format_version": 1,
      "domain": [[0.0, 1.0]],
      "tau": 0.01,                       # optional, delay used by delay columns
      "levels": [
        {"name": "low", "file": "level1.csv", "cost": 1.0},
        {"name": "high", "file": "level2.csv", "cost": 100.0}
      ]
    }

Each CSV has a header ``x1,...,xd,y`` optionally followed by
``delay1,...,delayd``: the next-lower fidelity evaluated at ``x + tau*e_i``.
Levels are ordered from lowest to highest fidelity.

Model files are single JSON documents ``{"format_version": 1, "model": ...}``.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .exceptions import NestingError, ParseError, SchemaError, ShapeError, VersionError

FORMAT_VERSION = 1
NEST_TOL = 1e-12

__all__ = [
    "FidelityLevel",
    "FidelityDataset",
    "load_dataset",
    "save_dataset",
    "save_model",
    "load_model",
    "atomic_write_text",
]


@dataclass(frozen=True)
class FidelityLevel:
    X: np.ndarray
    y: np.ndarray
    cost: float | None = None
    name: str | None = None
    delay: np.ndarray | None = None  # (n, d) lower-fidelity values at x + tau e_i

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.y, dtype=float).ravel()
        if X.ndim != 2 or X.shape[0] != y.size:
            raise SchemaError(f"level inputs {X.shape} and outputs {y.shape} disagree")
        if X.shape[0] == 0:
            raise SchemaError("empty fidelity level")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if self.delay is not None:
            D = np.asarray(self.delay, dtype=float)
            if D.ndim == 1:
                D = D[:, None]
            if D.shape != X.shape:
                raise SchemaError(f"delay values {D.shape} do not match inputs {X.shape}")
            object.__setattr__(self, "delay", D)
        if self.cost is not None and not self.cost > 0:
            raise SchemaError("cost_per_eval must be positive")

    def __len__(self):
        return self.X.shape[0]


@dataclass(frozen=True)
class FidelityDataset:
    """Training corpus ordered from lowest to highest fidelity."""

    levels: tuple[FidelityLevel, ...]
    domain: np.ndarray | None = None  # (d, 2) box
    tau: float | None = None
    units: dict = field(default_factory=dict)

    def __post_init__(self):
        levels = tuple(self.levels)
        if not levels:
            raise SchemaError("dataset has no levels")
        dims = {lev.X.shape[1] for lev in levels}
        if len(dims) != 1:
            raise SchemaError(f"inconsistent input dimension across levels: {sorted(dims)}")
        object.__setattr__(self, "levels", levels)
        if self.domain is not None:
            box = np.asarray(self.domain, dtype=float).reshape(-1, 2)
            if box.shape[0] != self.dim or np.any(box[:, 0] >= box[:, 1]):
                raise SchemaError("domain must give lo < hi for every input dimension")
            object.__setattr__(self, "domain", box)

    @classmethod
    def from_arrays(cls, Xs, ys, domain=None, **kw):
        return cls(tuple(FidelityLevel(X, y) for X, y in zip(Xs, ys)), domain=domain, **kw)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def dim(self) -> int:
        return self.levels[0].X.shape[1]

    @property
    def box(self) -> np.ndarray:
        """Declared domain, or the bounding box of all inputs."""
        if self.domain is not None:
            return self.domain
        allX = np.vstack([lev.X for lev in self.levels])
        lo, hi = allX.min(0), allX.max(0)
        hi = np.where(hi > lo, hi, lo + 1.0)
        return np.column_stack([lo, hi])

    def nesting_map(self, level: int) -> np.ndarray:
        """Row indices into level ``level-1`` matching each row of ``level``.

        ``level`` is 0-based and must be >= 1.  Raises NestingError naming
        the unmatched rows.
        """
        idx, missing = _match_rows(self.levels[level].X, self.levels[level - 1].X)
        if missing:
            raise NestingError(
                f"level {level + 1} rows {missing} have no match in level {level}",
                level=level, rows=missing)
        return idx

    def is_nested(self, level: int) -> bool:
        return not _match_rows(self.levels[level].X, self.levels[level - 1].X)[1]

    def nesting_status(self) -> list[bool]:
        return [self.is_nested(l) for l in range(1, self.n_levels)]

    def replace_level(self, level: int, new: FidelityLevel) -> "FidelityDataset":
        levels = list(self.levels)
        levels[level] = new
        return replace(self, levels=tuple(levels))

    def append_point(self, level: int, x, y, delay=None) -> "FidelityDataset":
        lev = self.levels[level]
        x = np.asarray(x, dtype=float).reshape(1, -1)
        X = np.vstack([lev.X, x])
        Y = np.append(lev.y, float(y))
        D = None
        if lev.delay is not None:
            if delay is None:
                raise SchemaError("level carries delay values; new point needs them too")
            D = np.vstack([lev.delay, np.asarray(delay, dtype=float).reshape(1, -1)])
        return self.replace_level(level, replace(lev, X=X, y=Y, delay=D))


def _match_rows(A, B, tol=NEST_TOL):
    """For each row of A, index of an equal row of B (within tol)."""
    idx = np.empty(A.shape[0], dtype=int)
    missing = []
    for i, row in enumerate(A):
        hits = np.flatnonzero(np.all(np.abs(B - row) <= tol, axis=1))
        if hits.size == 0:
            missing.append(i)
            idx[i] = -1
        else:
            idx[i] = hits[0]
    return idx, missing


# --------------------------------------------------------------------------
# files


def atomic_write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fmt(v: float) -> str:
    return format(float(v), ".17g")


def _read_json(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read: {exc.strerror}", path=path) from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path=path, line=exc.lineno) from exc


def _check_version(doc, path):
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise SchemaError(f"{path}: missing format_version")
    if doc["format_version"] != FORMAT_VERSION:
        raise VersionError(
            f"{path}: format_version {doc['format_version']!r} unsupported (expected {FORMAT_VERSION})")


def read_level_csv(path, cost=None, name=None) -> FidelityLevel:
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ParseError(f"cannot read: {exc.strerror}", path=path) from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file (no header)") from None
        header = [h.strip() for h in header]
        if "y" not in header:
            raise SchemaError(f"{path}: header must contain a 'y' column")
        xcols = [i for i, h in enumerate(header) if h.startswith("x")]
        dcols = [i for i, h in enumerate(header) if h.startswith("delay")]
        ycol = header.index("y")
        if not xcols:
            raise SchemaError(f"{path}: no x columns")
        if dcols and len(dcols) != len(xcols):
            raise SchemaError(f"{path}: need one delay column per input dimension")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", path=path, line=lineno)
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise ParseError(str(exc), path=path, line=lineno) from None
    if not rows:
        raise SchemaError(f"{path}: empty fidelity level")
    data = np.asarray(rows)
    delay = data[:, dcols] if dcols else None
    return FidelityLevel(data[:, xcols], data[:, ycol], cost=cost, name=name, delay=delay)


def level_csv_text(level: FidelityLevel) -> str:
    d = level.X.shape[1]
    header = [f"x{i + 1}" for i in range(d)] + ["y"]
    if level.delay is not None:
        header += [f"delay{i + 1}" for i in range(d)]
    lines = [",".join(header)]
    for i in range(len(level)):
        vals = list(level.X[i]) + [level.y[i]]
        if level.delay is not None:
            vals += list(level.delay[i])
        lines.append(",".join(fmt(v) for v in vals))
    return "\n".join(lines) + "\n"


def load_dataset(path) -> FidelityDataset:
    """Read a manifest and its per-level CSV files."""
    path = Path(path)
    doc = _read_json(path)
    _check_version(doc, path)
    try:
        entries = doc["levels"]
    except KeyError:
        raise SchemaError(f"{path}: manifest lists no levels") from None
    if not entries:
        raise SchemaError(f"{path}: manifest lists no levels")
    levels = []
    for entry in entries:
        if "file" not in entry:
            raise SchemaError(f"{path}: level entry without 'file'")
        levels.append(read_level_csv(path.parent / entry["file"], cost=entry.get("cost"),
                                     name=entry.get("name")))
    return FidelityDataset(tuple(levels), domain=doc.get("domain"), tau=doc.get("tau"),
                           units=doc.get("units", {}))


def save_dataset(ds: FidelityDataset, path) -> None:
    path = Path(path)
    entries = []
    for i, lev in enumerate(ds.levels):
        fname = f"{path.stem}_level{i + 1}.csv"
        atomic_write_text(path.parent / fname, level_csv_text(lev))
        entry = {"file": fname}
        if lev.name is not None:
            entry["name"] = lev.name
        if lev.cost is not None:
            entry["cost"] = lev.cost
        entries.append(entry)
    doc = {"format_version": FORMAT_VERSION}
    if ds.domain is not None:
        doc["domain"] = ds.domain.tolist()
    if ds.tau is not None:
        doc["tau"] = ds.tau
    if ds.units:
        doc["units"] = ds.units
    doc["levels"] = entries
    atomic_write_text(path, json.dumps(doc, indent=2) + "\n")


def dataset_to_dict(ds: FidelityDataset) -> dict:
    return {
        "domain": None if ds.domain is None else ds.domain.tolist(),
        "tau": ds.tau,
        "levels": [
            {"X": lev.X.tolist(), "y": lev.y.tolist(), "cost": lev.cost, "name": lev.name,
             "delay": None if lev.delay is None else lev.delay.tolist()}
            for lev in ds.levels
        ],
    }


def dataset_from_dict(doc: dict) -> FidelityDataset:
    levels = tuple(FidelityLevel(np.asarray(l["X"], dtype=float), np.asarray(l["y"], dtype=float),
                                 cost=l.get("cost"), name=l.get("name"), delay=l.get("delay"))
                   for l in doc["levels"])
    return FidelityDataset(levels, domain=doc.get("domain"), tau=doc.get("tau"))


# --------------------------------------------------------------------------
# models


def model_to_dict(model) -> dict:
    return {"format_version": FORMAT_VERSION, "model": model.to_dict()}


def model_from_dict(doc: dict, path="<memory>"):
    from .ar1 import Ar1Chain
    from .calibration import CalibratedModel
    from .dgp import DeepGpStack
    from .gp import GpModel
    from .stack import NonlinearStack

    _check_version(doc, path)
    try:
        body = doc["model"]
        kind = body["kind"]
    except (KeyError, TypeError):
        raise SchemaError(f"{path}: no model body") from None
    classes = {"gp": GpModel, "ar1": Ar1Chain, "stack": NonlinearStack, "dgp": DeepGpStack,
               "calibrated": CalibratedModel}
    if kind not in classes:
        raise SchemaError(f"{path}: unknown model kind {kind!r}")
    try:
        return classes[kind].from_dict(body)
    except (KeyError, TypeError, ValueError, ShapeError) as exc:
        if isinstance(exc, (SchemaError, VersionError)):
            raise
        raise SchemaError(f"{path}: malformed {kind} model: {exc!r}") from exc


def save_model(model, path) -> None:
    atomic_write_text(path, json.dumps(model_to_dict(model)) + "\n")


def load_model(path):
    return model_from_dict(_read_json(path), path=path)
