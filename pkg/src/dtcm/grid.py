"""Uniform rectangular grids carrying one real value per node."""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, NumericalError


def parse_grid(text: str) -> tuple[list[float], list[float], list[int]]:
    """``lo:hi:count[,lo:hi:count...]`` to per-axis ``(lo, hi, count)`` lists."""
    lo, hi, count = [], [], []
    for part in text.split(","):
        bits = part.strip().split(":")
        if len(bits) != 3:
            raise ValueError(f"grid axis {part!r} is not lo:hi:count")
        a, b, n = float(bits[0]), float(bits[1]), int(bits[2])
        if n < 1 or (n > 1 and not b > a) or (n == 1 and a != b):
            raise ValueError(f"grid axis {part!r} needs count >= 1 and hi > lo (or lo == hi for one point)")
        lo.append(a)
        hi.append(b)
        count.append(n)
    return lo, hi, count


@dataclass(frozen=True, eq=False)
class GridFn:
    """Values on ``origin + h * index``; ``values`` has one axis per dimension."""

    origin: tuple[float, ...]
    h: tuple[float, ...]
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != len(self.origin) or len(self.h) != len(self.origin):
            raise ValueError("origin, spacing and value array disagree on the dimension")
        if vals.size == 0:
            raise DomainError("empty grid")
        if any(not hh > 0 for hh in self.h):
            raise ValueError("grid spacing must be positive")
        if not np.all(np.isfinite(vals)):
            raise NumericalError("grid values must be finite")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "h", tuple(float(v) for v in self.h))

    # construction -------------------------------------------------------------
    @classmethod
    def uniform(cls, lo: Sequence[float], hi: Sequence[float], count: Sequence[int],
                values=None) -> "GridFn":
        h = tuple((b - a) / (n - 1) if n > 1 else 1.0 for a, b, n in zip(lo, hi, count))
        vals = np.zeros(tuple(count)) if values is None else np.asarray(values, dtype=float)
        return cls(tuple(lo), h, vals.reshape(tuple(count)))

    @classmethod
    def from_function(cls, f: Callable[[np.ndarray], np.ndarray], lo, hi, count) -> "GridFn":
        g = cls.uniform(lo, hi, count)
        return g.with_values(np.asarray(f(g.points()), dtype=float).reshape(g.shape))

    @classmethod
    def from_text(cls, text: str, f: Callable | None = None) -> "GridFn":
        lo, hi, count = parse_grid(text)
        return cls.uniform(lo, hi, count) if f is None else cls.from_function(f, lo, hi, count)

    def with_values(self, values) -> "GridFn":
        return GridFn(self.origin, self.h, np.asarray(values, dtype=float).reshape(self.shape))

    # geometry -----------------------------------------------------------------
    @property
    def N(self) -> int:
        return len(self.origin)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def axes(self) -> list[np.ndarray]:
        return [o + hh * np.arange(n) for o, hh, n in zip(self.origin, self.h, self.shape)]

    @property
    def upper(self) -> tuple[float, ...]:
        return tuple(a[-1] for a in self.axes())

    def points(self) -> np.ndarray:
        """Node coordinates in row-major order, shape ``(size, N)``."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=-1)

    def window(self, inset: float) -> np.ndarray:
        """Boolean mask (grid shaped) of nodes at least ``inset`` away from every edge."""
        masks = [(a >= a[0] + inset - 1e-12) & (a <= a[-1] - inset + 1e-12) for a in self.axes()]
        out = masks[0]
        for m in masks[1:]:
            out = out[..., None] & m
        return out.reshape(self.shape)

    def trapezoid_weights(self) -> np.ndarray:
        w = np.ones(self.shape)
        for ax, (hh, n) in enumerate(zip(self.h, self.shape)):
            wa = np.full(n, hh)
            if n > 1:
                wa[0] = wa[-1] = hh / 2
            shape = [1] * self.N
            shape[ax] = n
            w = w * wa.reshape(shape)
        return w

    # serialisation --------------------------------------------------------------
    def to_csv(self, dest=None) -> str:
        """RFC 4180 CSV ``x1,...,xN,value`` with 17 significant digits; returns the text."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow([f"x{i + 1}" for i in range(self.N)] + ["value"])
        for p, v in zip(self.points(), self.values.reshape(-1)):
            w.writerow([f"{c:.17g}" for c in p] + [f"{v:.17g}"])
        text = buf.getvalue()
        if dest is not None:
            if hasattr(dest, "write"):
                dest.write(text)
            else:
                with open(dest, "w", newline="") as fh:
                    fh.write(text)
        return text

    @classmethod
    def from_csv(cls, src) -> "GridFn":
        if hasattr(src, "read"):
            text = src.read()
        elif isinstance(src, (str, os.PathLike)) and os.path.exists(src):
            with open(src, newline="") as fh:
                text = fh.read()
        else:
            text = str(src)
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], [r for r in rows[1:] if r]
        N = len(header) - 1
        if N < 1 or header[-1].strip() != "value":
            raise ValueError("grid CSV header must be x1,...,xN,value")
        data = np.array([[float(c) for c in r] for r in body])
        axes = [np.unique(data[:, i]) for i in range(N)]
        shape = tuple(len(a) for a in axes)
        if int(np.prod(shape)) != len(data):
            raise ValueError("grid CSV rows do not form a full rectangular grid")
        h = []
        for a in axes:
            if len(a) > 1:
                d = np.diff(a)
                if np.max(np.abs(d - d.mean())) > 1e-9 * max(1.0, abs(d.mean())):
                    raise ValueError("grid CSV axis spacing is not uniform")
                h.append(float(d.mean()))
            else:
                h.append(1.0)
        order = np.lexsort(tuple(data[:, i] for i in reversed(range(N))))
        vals = data[order, -1].reshape(shape)
        return cls(tuple(a[0] for a in axes), tuple(h), vals)
