"""Seeded random sequential adsorption of equal circles in a periodic cell.

Geometry is generated in normalized unit-square coordinates; the pore
diameter ``phi`` only sets the physical edge length ``size_factor * phi`` of
the raster. Circles are placed one after another from a single PCG64 stream,
so the packing for ``n`` circles is a prefix of the packing for ``n + 1``.
"""
from dataclasses import dataclass
import math

import numpy as np

from .errors import PackingError, ParameterError

MAX_REJECTIONS = 10 ** 6


@dataclass(frozen=True)
class RveSpec:
    phi: float
    vf: float
    size_factor: float = 10.0
    seed: int = 0
    raster_n: int = 200

    def __post_init__(self):
        if not self.phi > 0:
            raise ParameterError(f"pore diameter must be positive, got {self.phi}")
        if not 0 <= self.vf < 0.5:
            raise ParameterError(f"volume fraction must lie in [0, 0.5), got {self.vf}")
        if not self.size_factor >= 4:
            raise ParameterError(f"size_factor must be >= 4, got {self.size_factor}")
        if int(self.raster_n) != self.raster_n or self.raster_n < 50:
            raise ParameterError(f"raster_n must be an integer >= 50, got {self.raster_n}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ParameterError("seed must be a 64-bit unsigned integer")

    @property
    def edge(self):
        """Physical RVE edge length (mm)."""
        return self.size_factor * self.phi

    @property
    def radius(self):
        """Normalized circle radius."""
        return 0.5 / self.size_factor

    @property
    def n_circles(self):
        return circle_count(self.vf, self.size_factor)

    def replace(self, **kw):
        d = dict(phi=self.phi, vf=self.vf, size_factor=self.size_factor,
                 seed=self.seed, raster_n=self.raster_n)
        d.update(kw)
        return RveSpec(**d)


def circle_count(vf, size_factor=10.0):
    """Number of circles ``floor(vf * size_factor^2 * 4 / pi)``."""
    # guard against 18.9999999 style round-off just below an integer
    raw = vf * size_factor ** 2 * 4.0 / math.pi
    return int(math.floor(raw + 1e-9))


@dataclass(frozen=True)
class CircleSet:
    centers: np.ndarray
    radius: float
    periodic: bool = True

    def __len__(self):
        return len(self.centers)

    @property
    def area_fraction(self):
        return len(self) * math.pi * self.radius ** 2

    def min_distance(self):
        """Smallest center distance over periodic images (inf for < 2 circles)."""
        c = self.centers
        if len(c) < 2:
            return math.inf
        d = c[:, None, :] - c[None, :, :]
        if self.periodic:
            d -= np.round(d)
        dist = np.sqrt((d ** 2).sum(-1))
        dist[np.diag_indices(len(c))] = np.inf
        return float(dist.min())

    def to_csv(self, path, edge=1.0, header=""):
        data = np.column_stack([self.centers * edge, np.full(len(self), self.radius * edge)])
        lines = [f"# {header}" if header else "# units: normalized", "cx,cy,r"]
        lines += [",".join(f"{v:.17g}" for v in row) for row in data]
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def rsa_pack(spec: RveSpec) -> CircleSet:
    """Place ``spec.n_circles`` non-overlapping circles by rejection sampling."""
    n = spec.n_circles
    r = spec.radius
    rng = np.random.Generator(np.random.PCG64(int(spec.seed)))
    centers = np.empty((n, 2))
    min_d2 = (2.0 * r) ** 2
    for k in range(n):
        for _ in range(MAX_REJECTIONS):
            p = rng.random(2)
            d = centers[:k] - p
            d -= np.round(d)
            if k == 0 or np.min((d ** 2).sum(axis=1)) >= min_d2:
                centers[k] = p
                break
        else:
            raise PackingError(
                f"circle {k + 1}/{n} rejected {MAX_REJECTIONS} times; "
                f"vf={spec.vf} is too dense for random sequential adsorption")
    return CircleSet(centers, r, periodic=True)


@dataclass(frozen=True)
class MaterialGrid:
    """Boolean pore mask indexed ``[ix, iy]`` plus the physical edge length."""
    pores: np.ndarray
    edge: float

    @property
    def n(self):
        return self.pores.shape[0]

    @property
    def pore_fraction(self):
        return float(self.pores.mean())


def rasterize(circles: CircleSet, raster_n=200, edge=1.0) -> MaterialGrid:
    """A cell is pore iff its center lies inside a circle or a periodic image."""
    c = (np.arange(raster_n) + 0.5) / raster_n
    X, Y = np.meshgrid(c, c, indexing="ij")
    pores = np.zeros((raster_n, raster_n), dtype=bool)
    r2 = circles.radius ** 2
    for cx, cy in circles.centers:
        dx = X - cx
        dy = Y - cy
        if circles.periodic:
            dx -= np.round(dx)
            dy -= np.round(dy)
        pores |= dx * dx + dy * dy <= r2
    return MaterialGrid(pores, float(edge))


def build_grid(spec: RveSpec):
    circles = rsa_pack(spec)
    return circles, rasterize(circles, spec.raster_n, spec.edge)


def export_image(grid: MaterialGrid) -> bytes:
    """Binary PGM with pores black (0) and matrix white (255).

    Rows run top to bottom, so ``y`` increases upwards in the image.
    """
    n = grid.n
    img = np.where(grid.pores, 0, 255).astype(np.uint8).T[::-1]
    return f"P5\n{n} {n}\n255\n".encode("ascii") + img.tobytes()


def write_image(grid: MaterialGrid, path):
    with open(path, "wb") as fh:
        fh.write(export_image(grid))
