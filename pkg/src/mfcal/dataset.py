"""Multi-source data model, file ingestion, standardization and input encoding.

A dataset concatenates records from ``ds`` sources. Source 0 is the
high-fidelity (HF) source and owns no calibration parameters; every other
source owns a subset of the global calibration-parameter union. Absent
calibration entries are stored as NaN.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from mfcal.errors import (
    ConsistencyError,
    ContractError,
    DataError,
    DegenerateColumnError,
    EncodingError,
    SchemaError,
    SplitError,
)


@dataclass(frozen=True)
class SourceSpec:
    source_id: int
    name: str
    is_hf: bool = False
    calib_param_names: tuple[str, ...] = ()
    n_samples: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "calib_param_names", tuple(self.calib_param_names))

    def to_dict(self):
        return {
            "source_id": self.source_id,
            "name": self.name,
            "is_hf": self.is_hf,
            "calib_param_names": list(self.calib_param_names),
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            source_id=int(d["source_id"]),
            name=str(d["name"]),
            is_hf=bool(d.get("is_hf", False)),
            calib_param_names=tuple(d.get("calib_param_names", ())),
            n_samples=d.get("n_samples"),
        )


def validate_schema(schema: Sequence[SourceSpec]) -> tuple[str, ...]:
    """Check source-list invariants and return the ordered parameter union."""
    if not schema:
        raise SchemaError("schema must list at least one source")
    ids = [s.source_id for s in schema]
    if ids != list(range(len(schema))):
        raise SchemaError(f"source ids must be contiguous 0..{len(schema) - 1}, got {ids}")
    hf = [s for s in schema if s.is_hf]
    if len(hf) != 1 or hf[0].source_id != 0:
        raise SchemaError("exactly one HF source is required and it must be source 0")
    if hf[0].calib_param_names:
        raise SchemaError("the HF source cannot own calibration parameters")
    union: list[str] = []
    for s in schema:
        if len(set(s.calib_param_names)) != len(s.calib_param_names):
            raise SchemaError(f"source {s.name!r} lists a calibration parameter twice")
        for name in s.calib_param_names:
            if name not in union:
                union.append(name)
    return tuple(union)


@dataclass(frozen=True)
class CalibDomain:
    """Lower/upper bounds (raw units) for each global calibration parameter."""

    bounds: dict[str, tuple[float, float]]

    def __post_init__(self):
        for name, (lo, hi) in self.bounds.items():
            if not lo < hi:
                raise ContractError(f"empty domain for {name!r}: [{lo}, {hi}]")

    def lower(self, names):
        return np.array([self.bounds[n][0] for n in names], dtype=float)

    def upper(self, names):
        return np.array([self.bounds[n][1] for n in names], dtype=float)

    def covers(self, dataset: MultiSourceDataset) -> bool:
        theta = dataset.raw_theta()
        for k, name in enumerate(dataset.param_names):
            col = theta[:, k]
            col = col[~np.isnan(col)]
            lo, hi = self.bounds[name]
            if col.size and (col.min() < lo or col.max() > hi):
                return False
        return True

    @classmethod
    def from_data(cls, dataset: MultiSourceDataset):
        theta = dataset.raw_theta()
        bounds = {}
        for k, name in enumerate(dataset.param_names):
            col = theta[:, k]
            col = col[~np.isnan(col)]
            if col.size == 0:
                raise DataError(f"no observed values for calibration parameter {name!r}")
            bounds[name] = (float(col.min()), float(col.max()))
        return cls(bounds)

    def to_dict(self):
        return {k: list(v) for k, v in self.bounds.items()}

    @classmethod
    def from_dict(cls, d):
        return cls({k: (float(v[0]), float(v[1])) for k, v in d.items()})


@dataclass(frozen=True)
class Standardizer:
    """Per-column mean/std for x, theta and y (population std)."""

    x_mean: np.ndarray
    x_std: np.ndarray
    theta_mean: np.ndarray
    theta_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    @classmethod
    def fit(cls, dataset: MultiSourceDataset):
        def stats(values, names, skip_nan=False):
            means, stds = [], []
            for k, name in enumerate(names):
                col = values[:, k]
                if skip_nan:
                    col = col[~np.isnan(col)]
                if col.size == 0:
                    raise DegenerateColumnError(name)
                m, s = float(col.mean()), float(col.std())
                if not s > 0 or s < 1e-12 * max(1.0, abs(m)):
                    raise DegenerateColumnError(name)
                means.append(m)
                stds.append(s)
            return np.array(means, dtype=float), np.array(stds, dtype=float)

        xm, xs = stats(dataset.x, dataset.x_names)
        tm, ts = stats(dataset.theta, dataset.theta_columns(), skip_nan=True)
        ym, ys = stats(dataset.y, dataset.y_names)
        return cls(xm, xs, tm, ts, ym, ys)

    def transform_x(self, x):
        return (x - self.x_mean) / self.x_std

    def inverse_x(self, x):
        return x * self.x_std + self.x_mean

    def transform_theta(self, theta, index=None):
        if index is None:
            return (theta - self.theta_mean) / self.theta_std
        return (theta - self.theta_mean[index]) / self.theta_std[index]

    def inverse_theta(self, theta, index=None):
        if index is None:
            return theta * self.theta_std + self.theta_mean
        return theta * self.theta_std[index] + self.theta_mean[index]

    def transform_y(self, y):
        return (y - self.y_mean) / self.y_std

    def inverse_y(self, y):
        return y * self.y_std + self.y_mean

    def inverse_y_std(self, s):
        return s * self.y_std

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in
                ("x_mean", "x_std", "theta_mean", "theta_std", "y_mean", "y_std")}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(v, dtype=float) for k, v in d.items()})


@dataclass(frozen=True, eq=False)
class MultiSourceDataset:
    sources: tuple[SourceSpec, ...]
    param_names: tuple[str, ...]
    x_names: tuple[str, ...]
    y_names: tuple[str, ...]
    source: np.ndarray
    x: np.ndarray
    theta: np.ndarray
    y: np.ndarray
    tc_names: tuple[str, ...] = ()
    tc: np.ndarray | None = None
    tc_cardinalities: tuple[int, ...] = ()
    standardizer: Standardizer | None = None

    def __post_init__(self):
        n = len(self.source)
        if self.tc is None:
            object.__setattr__(self, "tc", np.zeros((n, 0), dtype=np.int64))
        for name, arr, width in (
            ("x", self.x, len(self.x_names)),
            ("theta", self.theta, len(self.param_names)),
            ("y", self.y, len(self.y_names)),
            ("tc", self.tc, len(self.tc_names)),
        ):
            if arr.shape != (n, width):
                raise ContractError(f"{name} has shape {arr.shape}, expected {(n, width)}")

    def __len__(self):
        return len(self.source)

    @property
    def ds(self):
        return len(self.sources)

    @property
    def n_y(self):
        return len(self.y_names)

    @property
    def theta_present(self):
        return ~np.isnan(self.theta)

    @property
    def is_standardized(self):
        return self.standardizer is not None

    def theta_columns(self):
        return tuple(f"theta_{n}" for n in self.param_names)

    def ownership(self) -> np.ndarray:
        """Boolean (ds, dθ) matrix: which source owns which parameter slot."""
        own = np.zeros((self.ds, len(self.param_names)), dtype=bool)
        for s in self.sources:
            for name in s.calib_param_names:
                own[s.source_id, self.param_names.index(name)] = True
        return own

    def counts(self) -> tuple[int, ...]:
        return tuple(int(np.sum(self.source == j)) for j in range(self.ds))

    def subset(self, index) -> MultiSourceDataset:
        index = np.asarray(index)
        return replace(
            self,
            source=self.source[index],
            x=self.x[index],
            theta=self.theta[index],
            y=self.y[index],
            tc=self.tc[index],
        )

    def raw_x(self):
        return self.x if self.standardizer is None else self.standardizer.inverse_x(self.x)

    def raw_theta(self):
        return self.theta if self.standardizer is None else self.standardizer.inverse_theta(self.theta)

    def raw_y(self):
        return self.y if self.standardizer is None else self.standardizer.inverse_y(self.y)

    def unstandardized(self) -> MultiSourceDataset:
        if self.standardizer is None:
            return self
        return replace(self, x=self.raw_x(), theta=self.raw_theta(), y=self.raw_y(), standardizer=None)

    def validate(self):
        """Check record-level invariants against the source schema."""
        union = validate_schema(self.sources)
        if tuple(union) != tuple(self.param_names):
            raise SchemaError(f"parameter union {union} does not match columns {self.param_names}")
        if np.any((self.source < 0) | (self.source >= self.ds)):
            raise SchemaError("source index out of range")
        for arr, what in ((self.x, "x"), (self.y, "y")):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"non-finite value in {what}")
        if np.any(np.isinf(self.theta)):
            raise DataError("non-finite value in theta")
        own = self.ownership()[self.source]
        leaked = self.theta_present & ~own
        if leaked.any():
            row = int(np.argwhere(leaked)[0][0])
            col = int(np.argwhere(leaked)[0][1])
            raise ConsistencyError(
                f"row {row} (source {self.sources[self.source[row]].name!r}) carries a value "
                f"for {self.param_names[col]!r} which that source does not own"
            )
        missing = own & ~self.theta_present
        if missing.any():
            row = int(np.argwhere(missing)[0][0])
            col = int(np.argwhere(missing)[0][1])
            raise ConsistencyError(
                f"row {row} is missing its owned parameter {self.param_names[col]!r}"
            )
        for k, card in enumerate(self.tc_cardinalities):
            if self.tc.size and (self.tc[:, k].min() < 0 or self.tc[:, k].max() >= card):
                raise EncodingError(f"categorical column {self.tc_names[k]!r} out of range")
        return self


def _parse_float(cell, row, col):
    try:
        v = float(cell)
    except ValueError as exc:
        raise DataError(f"row {row}: cannot parse {col}={cell!r}") from exc
    if not math.isfinite(v):
        raise DataError(f"row {row}: non-finite value in {col}")
    return v


def load_dataset(path, schema: Sequence[SourceSpec], check_counts: bool = False) -> MultiSourceDataset:
    """Read a delimited file into a raw (unstandardized) dataset.

    Columns: ``source``, ``x_*``, optional ``tc_*``, ``theta_<name>`` for
    every parameter in the union, and ``y_*``. An empty theta cell marks an
    absent entry. Lines starting with ``#`` are skipped.
    """
    path = Path(path)
    schema = tuple(schema)
    union = validate_schema(schema)
    with path.open(newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration as exc:
        raise SchemaError(f"{path}: empty file") from exc
    if "source" not in header:
        raise SchemaError(f"{path}: missing column 'source'")
    x_cols = [h for h in header if h.startswith("x_")]
    y_cols = [h for h in header if h.startswith("y_")]
    tc_cols = [h for h in header if h.startswith("tc_")]
    theta_cols = [f"theta_{n}" for n in union]
    for col in theta_cols:
        if col not in header:
            raise SchemaError(f"{path}: missing column {col!r}")
    extra = [h for h in header if h.startswith("theta_") and h not in theta_cols]
    if extra:
        raise SchemaError(f"{path}: theta columns {extra} are not in the schema's parameter union")
    if not x_cols:
        raise SchemaError(f"{path}: no x_* columns")
    if not y_cols:
        raise SchemaError(f"{path}: no y_* columns")
    pos = {h: i for i, h in enumerate(header)}
    by_name = {s.name: s.source_id for s in schema}

    src, xs, tcs, thetas, ys = [], [], [], [], []
    for r, row in enumerate(reader, start=1):
        if not row:
            continue
        if len(row) != len(header):
            raise SchemaError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
        cell = row[pos["source"]].strip()
        if cell in by_name:
            sid = by_name[cell]
        else:
            try:
                sid = int(cell)
            except ValueError as exc:
                raise SchemaError(f"{path}: row {r}: unknown source {cell!r}") from exc
        if not 0 <= sid < len(schema):
            raise SchemaError(f"{path}: row {r}: source {sid} not in schema")
        src.append(sid)
        xs.append([_parse_float(row[pos[c]], r, c) for c in x_cols])
        ys.append([_parse_float(row[pos[c]], r, c) for c in y_cols])
        tcs.append([int(row[pos[c]]) for c in tc_cols])
        th = []
        for c in theta_cols:
            v = row[pos[c]].strip()
            th.append(math.nan if v == "" else _parse_float(v, r, c))
        thetas.append(th)

    n = len(src)
    tc = np.array(tcs, dtype=np.int64).reshape(n, len(tc_cols))
    cards = tuple(int(tc[:, k].max()) + 1 if n else 1 for k in range(len(tc_cols)))
    ds = MultiSourceDataset(
        sources=schema,
        param_names=union,
        x_names=tuple(x_cols),
        y_names=tuple(y_cols),
        source=np.array(src, dtype=np.int64),
        x=np.array(xs, dtype=float).reshape(n, len(x_cols)),
        theta=np.array(thetas, dtype=float).reshape(n, len(union)),
        y=np.array(ys, dtype=float).reshape(n, len(y_cols)),
        tc_names=tuple(tc_cols),
        tc=tc,
        tc_cardinalities=cards,
    ).validate()
    if check_counts:
        counts = ds.counts()
        for s in schema:
            if s.n_samples is not None and counts[s.source_id] != s.n_samples:
                raise ConsistencyError(
                    f"source {s.name!r}: expected {s.n_samples} rows, found {counts[s.source_id]}"
                )
    return ds


def write_dataset(path, dataset: MultiSourceDataset, comment: str | None = None):
    """Write raw values in the format read by :func:`load_dataset`."""
    ds = dataset.unstandardized()
    header = ["source", *ds.x_names, *ds.tc_names, *ds.theta_columns(), *ds.y_names]
    path = Path(path)
    with path.open("w", newline="") as fh:
        if comment:
            for line in comment.splitlines():
                fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(ds)):
            theta = ["" if math.isnan(v) else repr(float(v)) for v in ds.theta[i]]
            w.writerow(
                [int(ds.source[i])]
                + [repr(float(v)) for v in ds.x[i]]
                + [int(v) for v in ds.tc[i]]
                + theta
                + [repr(float(v)) for v in ds.y[i]]
            )


def standardize(dataset: MultiSourceDataset, standardizer: Standardizer | None = None) -> MultiSourceDataset:
    """Z-score x, theta and y.

    Statistics are fitted on ``dataset`` unless a standardizer (fitted on
    the training split) is passed in.
    """
    if dataset.is_standardized:
        raise ContractError("dataset is already standardized")
    st = standardizer or Standardizer.fit(dataset)
    return replace(
        dataset,
        x=st.transform_x(dataset.x),
        theta=st.transform_theta(dataset.theta),
        y=st.transform_y(dataset.y),
        standardizer=st,
    )


def split_train_val(dataset: MultiSourceDataset, fraction: float, seed: int):
    """Stratified per-source split; ``fraction`` is the validation share of each source."""
    if not 0 < fraction < 1:
        raise SplitError(f"fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for j in range(dataset.ds):
        idx = np.flatnonzero(dataset.source == j)
        if idx.size == 0:
            continue
        n_val = int(round(fraction * idx.size))
        if n_val >= idx.size:
            raise SplitError(
                f"fraction {fraction} leaves source {dataset.sources[j].name!r} with no training rows"
            )
        perm = rng.permutation(idx)
        val_idx.append(np.sort(perm[:n_val]))
        train_idx.append(np.sort(perm[n_val:]))
    train = np.concatenate(train_idx) if train_idx else np.array([], dtype=np.int64)
    val = np.concatenate(val_idx) if val_idx else np.array([], dtype=np.int64)
    return dataset.subset(train), dataset.subset(val)


def mask_theta(theta, owned, fill):
    """Build the calibration input seen by the network.

    Slots in ``owned`` take their value from ``theta`` (record data in
    emulation mode, a posterior draw in calibration mode); every other slot
    takes ``fill``. Works on numpy arrays and torch tensors, batched or not.
    """
    if isinstance(theta, torch.Tensor):
        owned = torch.as_tensor(owned, dtype=torch.bool)
        fill = torch.as_tensor(fill, dtype=theta.dtype)
        if theta.shape[-1] != owned.shape[-1] or fill.shape[-1] != owned.shape[-1]:
            raise ContractError(
                f"theta/owned/fill widths differ: {theta.shape[-1]}, {owned.shape[-1]}, {fill.shape[-1]}"
            )
        # where() keeps NaN in the unselected branch out of both values and grads
        safe = torch.where(owned, theta, torch.zeros_like(theta))
        return torch.where(owned, safe, fill)
    theta = np.asarray(theta, dtype=float)
    owned = np.asarray(owned, dtype=bool)
    fill = np.asarray(fill, dtype=float)
    if theta.shape[-1] != owned.shape[-1] or fill.shape[-1] != owned.shape[-1]:
        raise ContractError(
            f"theta/owned/fill widths differ: {theta.shape[-1]}, {owned.shape[-1]}, {fill.shape[-1]}"
        )
    return np.where(owned, theta, fill)


def one_hot(level, cardinality):
    """One-hot encode a level (int or integer array) into ``cardinality`` bins."""
    level = np.asarray(level)
    if np.any(level < 0) or np.any(level >= cardinality):
        raise EncodingError(f"level {level.tolist()} outside [0, {cardinality})")
    out = np.zeros(level.shape + (cardinality,), dtype=float)
    np.put_along_axis(out, level[..., None].astype(np.int64), 1.0, axis=-1)
    return out


@dataclass
class Batch:
    """Tensor view of a standardized dataset used by the network and loss."""

    source: torch.Tensor
    x: torch.Tensor
    theta: torch.Tensor
    y: torch.Tensor
    tc_onehot: torch.Tensor
    owned: torch.Tensor = field(repr=False)

    def __len__(self):
        return self.source.shape[0]

    @classmethod
    def from_dataset(cls, dataset: MultiSourceDataset, dtype=torch.float64):
        if not dataset.is_standardized:
            raise ContractError("batches are built from standardized datasets")
        if dataset.tc_names:
            parts = [one_hot(dataset.tc[:, k], c) for k, c in enumerate(dataset.tc_cardinalities)]
            tc = np.concatenate(parts, axis=1)
        else:
            tc = np.zeros((len(dataset), 0))
        return cls(
            source=torch.as_tensor(dataset.source, dtype=torch.long),
            x=torch.as_tensor(dataset.x, dtype=dtype),
            theta=torch.as_tensor(dataset.theta, dtype=dtype),
            y=torch.as_tensor(dataset.y, dtype=dtype),
            tc_onehot=torch.as_tensor(tc, dtype=dtype),
            owned=torch.as_tensor(dataset.ownership()[dataset.source], dtype=torch.bool),
        )

    def select(self, mask):
        return Batch(
            source=self.source[mask],
            x=self.x[mask],
            theta=self.theta[mask],
            y=self.y[mask],
            tc_onehot=self.tc_onehot[mask],
            owned=self.owned[mask],
        )
