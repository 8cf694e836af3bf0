"""Panel data model: units, datasets, serialization, and splitting.

Time conventions used throughout the package:

* ``x`` has ``T + 1`` entries.  ``x[0]`` is the initial state of the series;
  ``x[t]`` for ``t = 1..T`` are the observed behaviors.
* ``d`` has ``T`` entries.  ``d[t - 1]`` is the action applied at physical
  time ``t`` (so actions are indexed 1..T).  Level 0 is the idle action.
* A non-zero level appears at most once per unit; repeated applications of
  "the same" action must be encoded as distinct labels.

Datasets are stored as JSON Lines: a meta object on the first line, one unit
object per subsequent line.  Floats are serialized with ``repr`` precision,
so save -> load round-trips bit-exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .rng import master_rng


class DatasetError(ValueError):
    """Malformed dataset file or invariant violation."""


@dataclass(frozen=True)
class UnitRecord:
    """One unit's covariates, behavior series, and action series."""

    unit_id: str
    z: np.ndarray  # (z_dim,) time-fixed covariates
    x: np.ndarray  # (T+1,) behaviors, x[0] = initial state
    d: np.ndarray  # (T,) integer action levels, d[t-1] = level at time t

    def __post_init__(self):
        object.__setattr__(self, "z", np.asarray(self.z, dtype=float))
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "d", np.asarray(self.d, dtype=np.int64))

    @property
    def horizon(self) -> int:
        return len(self.d)

    def action_at(self, t: int) -> int:
        """Level applied at physical time t (1-based)."""
        return int(self.d[t - 1])

    def validate(self, K: int, z_dim: int | None = None) -> None:
        if self.x.ndim != 1 or self.d.ndim != 1 or self.z.ndim != 1:
            raise DatasetError(f"unit {self.unit_id}: z/x/d must be 1-d arrays")
        if len(self.x) != len(self.d) + 1:
            raise DatasetError(
                f"unit {self.unit_id}: len(x)={len(self.x)} must equal len(d)+1={len(self.d) + 1}"
            )
        if z_dim is not None and len(self.z) != z_dim:
            raise DatasetError(
                f"unit {self.unit_id}: z has length {len(self.z)}, expected {z_dim}"
            )
        if len(self.d) and (self.d.min() < 0 or self.d.max() >= K):
            raise DatasetError(f"unit {self.unit_id}: level out of range [0, {K})")
        nonzero = self.d[self.d != 0]
        if len(np.unique(nonzero)) != len(nonzero):
            raise DatasetError(
                f"unit {self.unit_id}: non-zero level applied more than once"
            )
        if not (np.isfinite(self.x).all() and np.isfinite(self.z).all()):
            raise DatasetError(f"unit {self.unit_id}: non-finite values")


@dataclass
class Dataset:
    """A collection of units sharing K, horizon T, burn-in T0 and z_dim."""

    units: list[UnitRecord]
    K: int
    T: int
    T0: int
    z_dim: int
    r_hint: int | None = None

    def __len__(self) -> int:
        return len(self.units)

    def validate(self) -> None:
        if self.K < 1:
            raise DatasetError("K must be >= 1")
        for u in self.units:
            u.validate(self.K, self.z_dim)
            if u.horizon != self.T:
                raise DatasetError(
                    f"unit {u.unit_id}: horizon {u.horizon} != dataset T={self.T}"
                )

    def meta_dict(self) -> dict:
        meta = {"K": self.K, "T": self.T, "T0": self.T0, "z_dim": self.z_dim}
        if self.r_hint is not None:
            meta["r_hint"] = self.r_hint
        return meta

    def subset(self, indices) -> "Dataset":
        return Dataset(
            units=[self.units[i] for i in indices],
            K=self.K,
            T=self.T,
            T0=self.T0,
            z_dim=self.z_dim,
            r_hint=self.r_hint,
        )


@dataclass(frozen=True)
class SplitSpec:
    """Fractions for the train/val/cal/test partition plus a shuffle seed."""

    train: float
    val: float
    cal: float
    test: float
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train, self.val, self.cal, self.test)
        if any(f < 0 for f in fracs):
            raise ValueError("split fractions must be non-negative")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)!r}")

    @property
    def fractions(self) -> tuple[float, float, float, float]:
        return (self.train, self.val, self.cal, self.test)


def save_dataset(ds: Dataset, path) -> None:
    """Write a dataset as JSON Lines (meta line followed by unit lines)."""
    ds.validate()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(ds.meta_dict()) + "\n")
        for u in ds.units:
            rec = {
                "unit_id": u.unit_id,
                "z": u.z.tolist(),
                "x": u.x.tolist(),
                "d": u.d.tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path) -> Dataset:
    """Read and validate a JSON Lines dataset; unit order is preserved."""
    units: list[UnitRecord] = []
    meta = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            if lineno == 1:
                meta = obj
                for key in ("K", "T", "T0", "z_dim"):
                    if key not in meta:
                        raise DatasetError(f"line 1: meta is missing key {key!r}")
                continue
            missing = {"unit_id", "z", "x", "d"} - obj.keys()
            if missing:
                raise DatasetError(
                    f"line {lineno}: unit object missing keys {sorted(missing)}"
                )
            units.append(
                UnitRecord(unit_id=str(obj["unit_id"]), z=obj["z"], x=obj["x"], d=obj["d"])
            )
    if meta is None:
        raise DatasetError("empty file: missing meta line")
    ds = Dataset(
        units=units,
        K=int(meta["K"]),
        T=int(meta["T"]),
        T0=int(meta["T0"]),
        z_dim=int(meta["z_dim"]),
        r_hint=int(meta["r_hint"]) if "r_hint" in meta else None,
    )
    ds.validate()
    return ds


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset, Dataset]:
    """Disjoint, exhaustive train/val/cal/test partition.

    Sizes are the floors of fraction * N; leftover units go to train.  The
    permutation is drawn from the spec seed, so the partition is reproducible,
    and each part keeps the original dataset ordering.
    """
    n = len(ds)
    n_nonzero = sum(1 for f in spec.fractions if f > 0)
    if n < n_nonzero:
        raise DatasetError(
            f"cannot split {n} units into {n_nonzero} non-empty partitions"
        )
    sizes = [math.floor(f * n) for f in spec.fractions]
    sizes[0] += n - sum(sizes)
    perm = master_rng(spec.seed).permutation(n)
    parts = []
    start = 0
    for size in sizes:
        idx = np.sort(perm[start : start + size])
        parts.append(ds.subset(idx))
        start += size
    return tuple(parts)
