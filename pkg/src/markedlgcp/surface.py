"""Regular pixel grids and gridded surfaces."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import SurfaceError


@dataclass(frozen=True)
class PixelGrid:
    """Axis-aligned grid of square cells; cells are numbered row-major from (x0, y0)."""

    x0: float
    y0: float
    cell: float
    nx: int
    ny: int

    @classmethod
    def covering(cls, bounds, cell: float = 1.0) -> "PixelGrid":
        """Smallest grid anchored at floor(bounds/cell)*cell that covers ``bounds``."""
        xmin, ymin, xmax, ymax = bounds
        x0 = math.floor(xmin / cell + 1e-9) * cell
        y0 = math.floor(ymin / cell + 1e-9) * cell
        nx = max(1, int(math.ceil((xmax - x0) / cell - 1e-9)))
        ny = max(1, int(math.ceil((ymax - y0) / cell - 1e-9)))
        return cls(float(x0), float(y0), float(cell), nx, ny)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def cell_area(self) -> float:
        return self.cell * self.cell

    def centers(self) -> np.ndarray:
        ix, iy = np.meshgrid(np.arange(self.nx), np.arange(self.ny))
        return np.column_stack(
            [self.x0 + (ix.ravel() + 0.5) * self.cell, self.y0 + (iy.ravel() + 0.5) * self.cell]
        )

    def cell_ij(self, points) -> tuple[np.ndarray, np.ndarray]:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        ix = np.floor((p[:, 0] - self.x0) / self.cell).astype(np.int64)
        iy = np.floor((p[:, 1] - self.y0) / self.cell).astype(np.int64)
        return ix, iy

    def cell_index(self, points, clamp: bool = False) -> np.ndarray:
        """Flat cell index of each point; -1 outside unless ``clamp``."""
        ix, iy = self.cell_ij(points)
        if clamp:
            ix = np.clip(ix, 0, self.nx - 1)
            iy = np.clip(iy, 0, self.ny - 1)
            return iy * self.nx + ix
        ok = (ix >= 0) & (ix < self.nx) & (iy >= 0) & (iy < self.ny)
        return np.where(ok, iy * self.nx + ix, -1)

    def mask(self, geometry) -> np.ndarray:
        """Cells whose centre lies in ``geometry`` (DomainPolygon or shapely)."""
        import shapely

        geom = getattr(geometry, "geometry", geometry)
        c = self.centers()
        return shapely.intersects_xy(geom, c[:, 0], c[:, 1])


@dataclass(frozen=True)
class Surface:
    grid: PixelGrid
    values: np.ndarray
    valid: np.ndarray
    bandwidth: float = float("nan")
    name: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        ok = np.asarray(self.valid, dtype=bool).ravel()
        if v.size != self.grid.size or ok.size != self.grid.size:
            raise SurfaceError(f"surface {self.name!r} has {v.size} values for {self.grid.size} cells")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "valid", ok)

    @classmethod
    def constant(cls, grid: PixelGrid, value: float, name: str = "") -> "Surface":
        return cls(grid, np.full(grid.size, float(value)), np.ones(grid.size, bool), float("nan"), name)

    def at(self, points) -> np.ndarray:
        """Value of the cell containing each point (edge cells extend outward)."""
        idx = self.grid.cell_index(points, clamp=True)
        return self.values[idx]

    def map(self, fn, name: str | None = None) -> "Surface":
        return Surface(self.grid, fn(self.values), self.valid, self.bandwidth, self.name if name is None else name)

    def to_csv(self, path, header: str | None = None) -> None:
        c = self.grid.centers()
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(header.rstrip("\n") + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cell_x", "cell_y", "value", "valid_flag"])
            for (x, y), v, ok in zip(c, self.values, self.valid):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(v)), int(ok)])

    @classmethod
    def from_csv(cls, path, name: str = "") -> "Surface":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
        if not rows:
            raise SurfaceError(f"{path}: empty surface")
        x = np.array([float(r["cell_x"]) for r in rows])
        y = np.array([float(r["cell_y"]) for r in rows])
        ux = np.unique(x)
        uy = np.unique(y)
        cell = float(np.min(np.diff(ux))) if ux.size > 1 else (float(np.min(np.diff(uy))) if uy.size > 1 else 1.0)
        nx = int(round((ux[-1] - ux[0]) / cell)) + 1
        ny = int(round((uy[-1] - uy[0]) / cell)) + 1
        grid = PixelGrid(float(ux[0] - cell / 2), float(uy[0] - cell / 2), cell, nx, ny)
        idx = grid.cell_index(np.column_stack([x, y]))
        values = np.full(grid.size, np.nan)
        valid = np.zeros(grid.size, bool)
        values[idx] = [float(r["value"]) for r in rows]
        valid[idx] = [r["valid_flag"] in ("1", "True", "true") for r in rows]
        return cls(grid, values, valid, float("nan"), name)
