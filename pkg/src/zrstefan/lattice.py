"""Discrete torus geometry and the lattice difference operators.

Sites of T^d_N are indexed row-major over {0, ..., N-1}^d.  Fields are flat
float arrays of length N**d keyed by site index.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

SNAPSHOT_HEADER = struct.Struct("<qqq")  # d, N, field count


@dataclass(frozen=True)
class TorusGrid:
    d: int
    N: int

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {self.d}")
        if self.N < 2:
            raise ValueError(f"side N must be >= 2, got {self.N}")

    @property
    def size(self) -> int:
        return self.N**self.d

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.d

    def coords(self, x: int) -> tuple[int, ...]:
        self._check(x)
        return tuple(int(c) for c in np.unravel_index(x, self.shape))

    def index(self, coords: Sequence[int]) -> int:
        c = [int(ci) % self.N for ci in coords]
        return int(np.ravel_multi_index(c, self.shape))

    def positions(self) -> np.ndarray:
        """Macroscopic positions x/N of all sites, shape (N**d, d)."""
        axes = np.indices(self.shape).reshape(self.d, -1).T
        return axes / self.N

    def neighbor_table(self) -> np.ndarray:
        """(N**d, 2d) int array: for each j, columns 2j, 2j+1 are x - e_j, x + e_j."""
        idx = np.arange(self.size).reshape(self.shape)
        cols = []
        for j in range(self.d):
            cols.append(np.roll(idx, 1, axis=j).ravel())
            cols.append(np.roll(idx, -1, axis=j).ravel())
        return np.stack(cols, axis=1).astype(np.int64)

    def distance(self, x: int, y: int) -> float:
        """Euclidean distance between sites on the continuous torus, in lattice units."""
        a = np.array(self.coords(x))
        b = np.array(self.coords(y))
        delta = np.abs(a - b)
        delta = np.minimum(delta, self.N - delta)
        return float(np.sqrt((delta**2).sum()))

    def _check(self, x: int):
        if not 0 <= x < self.size:
            raise IndexError(f"site {x} out of range for torus with {self.size} sites")


@dataclass
class LatticeField:
    grid: TorusGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.size,):
            raise ValueError(
                f"field has shape {self.values.shape}, expected ({self.grid.size},)"
            )

    @classmethod
    def from_function(cls, grid: TorusGrid, f) -> "LatticeField":
        """Sample f(theta) at theta = x/N; f receives an (M, d) array."""
        return cls(grid, np.asarray(f(grid.positions()), dtype=float).reshape(-1))


def neighbors(grid: TorusGrid, x: int) -> list[int]:
    """x - e_j, x + e_j for j = 1..d, periodic."""
    grid._check(x)
    c = grid.coords(x)
    out = []
    for j in range(grid.d):
        for step in (-1, 1):
            cj = list(c)
            cj[j] = (cj[j] + step) % grid.N
            out.append(grid.index(cj))
    return out


def _as_array(f, grid: TorusGrid | None = None) -> tuple[np.ndarray, TorusGrid]:
    if isinstance(f, LatticeField):
        return f.values, f.grid
    if grid is None:
        raise TypeError("raw arrays need an explicit grid")
    return np.asarray(f, dtype=float), grid


def discrete_gradient(f, grid: TorusGrid | None = None) -> np.ndarray:
    """Forward differences N (f(x + e_j) - f(x)); returns shape (d, N**d)."""
    a, grid = _as_array(f, grid)
    a = a.reshape(grid.shape)
    return np.stack(
        [grid.N * (np.roll(a, -1, axis=j) - a).ravel() for j in range(grid.d)]
    )


def discrete_laplacian(f, grid: TorusGrid | None = None) -> np.ndarray:
    """N^2 sum_j [f(x+e_j) + f(x-e_j) - 2 f(x)]."""
    a, grid = _as_array(f, grid)
    a = a.reshape(grid.shape)
    out = np.zeros_like(a)
    for j in range(grid.d):
        out += np.roll(a, -1, axis=j) + np.roll(a, 1, axis=j) - 2.0 * a
    return (grid.N**2 * out).ravel()


def laplacian_matrix(grid: TorusGrid):
    """Sparse CSR matrix of the discrete Laplacian."""
    import scipy.sparse as sp

    nbr = grid.neighbor_table()
    M = grid.size
    rows = np.repeat(np.arange(M), 2 * grid.d)
    data = np.full(rows.size, float(grid.N**2))
    A = sp.csr_matrix((data, (rows, nbr.ravel())), shape=(M, M))
    A = A - sp.identity(M, format="csr") * (2 * grid.d * grid.N**2)
    return A.tocsr()


# --- serialization -----------------------------------------------------------

def write_csv(path, grid: TorusGrid, fields: dict[str, np.ndarray]):
    """One row per site: index, coordinates, then one column per field."""
    names = list(fields)
    coord_cols = [f"x{j + 1}" for j in range(grid.d)]
    idx = np.indices(grid.shape).reshape(grid.d, -1).T
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", *coord_cols, *names])
        for x in range(grid.size):
            w.writerow([x, *idx[x].tolist(), *(repr(float(fields[n][x])) for n in names)])


def read_csv(path) -> tuple[TorusGrid, dict[str, np.ndarray]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = sum(1 for h in header if h.startswith("x") and h[1:].isdigit())
    N = round(len(body) ** (1.0 / d))
    grid = TorusGrid(d, N)
    data = np.array([[float(c) for c in r[1 + d:]] for r in body])
    return grid, {name: data[:, k] for k, name in enumerate(header[1 + d:])}


def write_snapshot(fh: BinaryIO, grid: TorusGrid, fields: Iterable[np.ndarray]):
    """Append one record: int64 header (d, N, nfields), then float64 values
    field by field in site order, all little-endian."""
    fields = [np.asarray(f, dtype="<f8") for f in fields]
    for f in fields:
        if f.shape != (grid.size,):
            raise ValueError("field length does not match grid")
    fh.write(SNAPSHOT_HEADER.pack(grid.d, grid.N, len(fields)))
    for f in fields:
        fh.write(f.tobytes())


def read_snapshots(path) -> list[tuple[TorusGrid, list[np.ndarray]]]:
    out = []
    raw = Path(path).read_bytes()
    pos = 0
    while pos < len(raw):
        d, N, nf = SNAPSHOT_HEADER.unpack_from(raw, pos)
        pos += SNAPSHOT_HEADER.size
        grid = TorusGrid(int(d), int(N))
        fields = []
        for _ in range(nf):
            nbytes = 8 * grid.size
            fields.append(np.frombuffer(raw, dtype="<f8", count=grid.size, offset=pos).copy())
            pos += nbytes
        out.append((grid, fields))
    return out
