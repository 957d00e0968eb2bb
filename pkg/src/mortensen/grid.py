"""Vertex-centred state grids and space-time value tables."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .dynamics import FLOAT_FMT, read_csv, write_csv
from .geometry import Domain

SENTINEL = 1e30
VFLD_MAGIC = b"VFLD"
VFLD_VERSION = 1


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class StateGrid:
    """Uniform tensor grid over a box covering the domain.

    ``active`` marks the nodes carrying unknowns.  For a plain grid these are
    the nodes of the closed domain; an extended grid (penalised problems
    live on the whole space) activates every node of the enlarged box.
    """

    domain: Domain
    counts: tuple[int, ...]
    lower: np.ndarray
    upper: np.ndarray
    extended: bool = False
    axes: tuple[np.ndarray, ...] = field(init=False)
    spacing: np.ndarray = field(init=False)
    points: np.ndarray = field(init=False)
    active: np.ndarray = field(init=False)
    in_domain: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        counts = tuple(int(c) for c in self.counts)
        if len(counts) != self.domain.dim or min(counts) < 2:
            raise GridError("need at least two nodes per axis, one count per dimension")
        if self.domain.dim > 2:
            raise GridError("grid solvers support dimensions 1 and 2 only")
        lo = np.asarray(self.lower, float)
        hi = np.asarray(self.upper, float)
        axes = tuple(np.linspace(lo[i], hi[i], counts[i]) for i in range(len(counts)))
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.reshape(-1) for m in mesh], axis=-1)
        in_dom = self.domain.distance(pts) <= self.domain.tol_boundary
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "spacing", (hi - lo) / (np.array(counts) - 1))
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "in_domain", in_dom)
        object.__setattr__(self, "active", np.ones(len(pts), bool) if self.extended else in_dom)

    @classmethod
    def build(cls, domain: Domain, counts) -> "StateGrid":
        counts = tuple(np.broadcast_to(np.asarray(counts, int), (domain.dim,)).tolist())
        lo, hi = domain.bounding_box
        return cls(domain, counts, lo, hi)

    def extend(self, margin: float) -> "StateGrid":
        """Enlarge the box by ``margin`` (rounded up to whole cells) on every side."""
        cells = np.ceil(np.maximum(margin, 0.0) / self.spacing - 1e-9).astype(int)
        lo = self.lower - cells * self.spacing
        hi = self.upper + cells * self.spacing
        counts = tuple(int(c + 2 * e) for c, e in zip(self.counts, cells))
        return StateGrid(self.domain, counts, lo, hi, extended=True)

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def active_points(self) -> np.ndarray:
        return self.points[self.active]

    @property
    def dx(self) -> float:
        return float(np.max(self.spacing))

    def boundary_layer(self) -> np.ndarray:
        """Active nodes on the boundary (within half a cell for balls)."""
        bd = self.domain.boundary_distance(self.points)
        tol = self.domain.tol_boundary if self.domain.kind != "ball" else 0.5 * float(np.min(self.spacing))
        return self.in_domain & (bd <= tol)

    def fill_index(self) -> np.ndarray:
        """For every node, the index of the nearest active node (itself if active)."""
        idx = np.arange(self.size)
        if np.all(self.active):
            return idx
        act = np.nonzero(self.active)[0]
        tree = cKDTree(self.points[act])
        _, j = tree.query(self.points[~self.active])
        idx[~self.active] = act[j]
        return idx

    def interp_weights(self, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Multilinear interpolation stencil for points ``x`` (P, n).

        Returns ``(index (P, 2^n), weight (P, 2^n), inside (P,))`` where
        ``inside`` is False for points outside the grid box.
        """
        x = np.atleast_2d(np.asarray(x, float))
        P, n = x.shape
        tol = 1e-12 * (1.0 + np.abs(self.upper - self.lower))
        inside = np.all((x >= self.lower - tol) & (x <= self.upper + tol), axis=1)
        u = (np.clip(x, self.lower, self.upper) - self.lower) / self.spacing
        cnt = np.array(self.counts)
        i0 = np.clip(np.floor(u).astype(int), 0, cnt - 2)
        frac = np.clip(u - i0, 0.0, 1.0)
        strides = np.array([int(np.prod(cnt[j + 1 :])) for j in range(n)])
        corners = 2**n
        index = np.zeros((P, corners), int)
        weight = np.ones((P, corners))
        for c in range(corners):
            bits = [(c >> (n - 1 - j)) & 1 for j in range(n)]
            for j, bit in enumerate(bits):
                index[:, c] += (i0[:, j] + bit) * strides[j]
                weight[:, c] *= frac[:, j] if bit else 1.0 - frac[:, j]
        return index, weight, inside

    def interpolate(self, values_full: np.ndarray, x) -> np.ndarray:
        idx, w, inside = self.interp_weights(x)
        out = np.sum(values_full[idx] * w, axis=1)
        return np.where(inside, out, np.nan)


@dataclass(frozen=True)
class ValueField:
    """Values ``V[k][i]`` on the active nodes of a grid at times ``times[k]``."""

    grid: StateGrid
    times: np.ndarray
    values: np.ndarray  # (K+1, N_active)
    label: str
    unreachable: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        v = np.asarray(self.values, float)
        if v.shape != (len(self.times), int(np.sum(self.grid.active))):
            raise GridError("value table shape does not match grid and time axis")
        object.__setattr__(self, "values", v)
        if self.unreachable is None:
            object.__setattr__(self, "unreachable", v >= 0.5 * SENTINEL)

    @property
    def nodes(self) -> np.ndarray:
        return self.grid.active_points

    @property
    def in_domain(self) -> np.ndarray:
        """Mask over active nodes lying in the closed domain."""
        return self.grid.in_domain[self.grid.active]

    def full_row(self, k: int) -> np.ndarray:
        """Row ``k`` on every grid node, masked nodes filled from their nearest active node."""
        full = np.full(self.grid.size, np.nan)
        full[self.grid.active] = self.values[k]
        return full[self.grid.fill_index()]

    def time_index(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise GridError(f"time {t} is not on the value-field grid")
        return k

    def restrict(self, mask: np.ndarray) -> np.ndarray:
        return self.values[:, mask]

    # -- serialisation ------------------------------------------------
    def to_csv(self, path) -> None:
        nodes = self.nodes
        n = nodes.shape[1]
        T, N = self.values.shape
        t_col = np.repeat(self.times, N)
        x_cols = np.tile(nodes, (T, 1))
        header = ["t"] + [f"x{i + 1}" for i in range(n)] + ["V"]
        write_csv(path, header, np.column_stack([t_col, x_cols, self.values.reshape(-1)]))

    def to_bytes(self) -> bytes:
        nodes = self.nodes
        T, N = self.values.shape
        head = VFLD_MAGIC + struct.pack("<BBHII", VFLD_VERSION, nodes.shape[1], 0, T, N)
        body = (
            np.asarray(self.times, "<f8").tobytes()
            + np.asarray(nodes, "<f8").tobytes()
            + np.asarray(self.values, "<f8").tobytes()
        )
        return head + body

    def to_binary(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())


def read_value_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Parse a value-field CSV into (times, nodes, values[k][i])."""
    header, data = read_csv(path)
    n = len(header) - 2
    times = np.unique(data[:, 0])
    T = len(times)
    N = data.shape[0] // T
    nodes = data[:N, 1 : 1 + n]
    return times, nodes, data[:, -1].reshape(T, N)


def read_value_binary(blob: bytes) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if blob[:4] != VFLD_MAGIC:
        raise GridError("not a VFLD block")
    version, n, _, T, N = struct.unpack("<BBHII", blob[4:16])
    if version != VFLD_VERSION:
        raise GridError(f"unsupported VFLD version {version}")
    off = 16
    times = np.frombuffer(blob, "<f8", T, off)
    off += 8 * T
    nodes = np.frombuffer(blob, "<f8", N * n, off).reshape(N, n)
    off += 8 * N * n
    values = np.frombuffer(blob, "<f8", T * N, off).reshape(T, N)
    return times.copy(), nodes.copy(), values.copy()


__all__ = ["StateGrid", "ValueField", "SENTINEL", "read_value_csv", "read_value_binary", "FLOAT_FMT"]
