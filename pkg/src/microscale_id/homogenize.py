"""Second-order homogenization of a porous RVE by unit-mode probing.

Three unit strain modes and six unit strain-gradient modes (1/mm) are applied
as quadratic boundary displacements; the averaged stress and moment stress of
each probe form one column of the tangents. All nine probes share one
factorization of the RVE stiffness.
"""
from dataclasses import dataclass, field
import logging

import numpy as np

from .errors import MicroscaleError
from .micro import (MacroStrainState, MicroSolver, average_moment_stress,
                    average_stress, build_micro_mesh)
from .rve import RveSpec, build_grid
from .voigt import IsotropicModuli, blockdiag2

log = logging.getLogger(__name__)

PORE_STIFFNESS_RATIO = 1e-6


@dataclass
class Tangents:
    """Homogenized ``C`` (GPa), ``D`` (GPa mm^2) and the diagnostic
    stress/strain-gradient coupling block (GPa mm)."""
    C: np.ndarray
    D: np.ndarray
    coupling: np.ndarray = field(default_factory=lambda: np.zeros((3, 6)))
    meta: dict = field(default_factory=dict)

    def scaled(self, s):
        """Tangents of the same microstructure with every length times ``s``."""
        meta = dict(self.meta)
        if "phi" in meta:
            meta["phi"] = meta["phi"] * s
        return Tangents(self.C.copy(), self.D * s * s, self.coupling * s, meta)

    def to_csv(self, path):
        lines = ["# " + ", ".join(f"{k}={v}" for k, v in self.meta.items())
                 + ", units: C GPa, D GPa*mm^2, coupling GPa*mm",
                 "block,row," + ",".join(f"c{j}" for j in range(6))]
        for name, M in (("C", self.C), ("D", self.D), ("coupling", self.coupling)):
            for i, row in enumerate(M):
                lines.append(f"{name},{i}," + ",".join(f"{v:.17g}" for v in row))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path):
        blocks = {"C": [], "D": [], "coupling": []}
        meta = {}
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line.startswith("#"):
                    for item in line[1:].split(","):
                        if "=" in item:
                            k, v = item.split("=", 1)
                            meta[k.strip()] = v.strip()
                    continue
                if not line or line.startswith("block"):
                    continue
                parts = line.split(",")
                blocks[parts[0]].append([float(v) for v in parts[2:] if v != ""])
        return cls(np.array(blocks["C"]), np.array(blocks["D"]),
                   np.array(blocks["coupling"]), meta)


def unit_states():
    eps_modes = [MacroStrainState(e=tuple(np.eye(3)[a])) for a in range(3)]
    eta_modes = [MacroStrainState(h=tuple(np.eye(6)[a])) for a in range(6)]
    return eps_modes, eta_modes


def probe(solver: MicroSolver):
    """Assemble (C, D, coupling) from the nine unit-mode solves."""
    eps_modes, eta_modes = unit_states()
    C = np.empty((3, 3))
    D = np.empty((6, 6))
    coupling = np.empty((3, 6))
    for a, st in enumerate(eps_modes):
        C[:, a] = average_stress(solver.solve(st), solver)
    for a, st in enumerate(eta_modes):
        u = solver.solve(st)
        D[:, a] = average_moment_stress(u, solver)
        coupling[:, a] = average_stress(u, solver)
    return C, D, coupling


def pore_moduli(matrix: IsotropicModuli, ratio=PORE_STIFFNESS_RATIO):
    return IsotropicModuli(matrix.lam * ratio, matrix.mu * ratio)


def homogenize(spec: RveSpec, matrix: IsotropicModuli, pore: IsotropicModuli = None,
               return_solver=False):
    """Homogenized tangents of the RVE described by ``spec``."""
    pore = pore_moduli(matrix) if pore is None else pore
    try:
        circles, grid = build_grid(spec)
        solver = MicroSolver(build_micro_mesh(grid, matrix, pore))
        C, D, coupling = probe(solver)
    except MicroscaleError as exc:
        raise type(exc)(f"homogenization failed for {spec}: {exc}") from exc
    meta = dict(phi=spec.phi, vf=spec.vf, size_factor=spec.size_factor, seed=spec.seed,
                raster_n=spec.raster_n, n_circles=len(circles),
                pore_fraction=grid.pore_fraction)
    t = Tangents(C, D, coupling, meta)
    log.debug("homogenized %s -> C11=%.4g C33=%.4g", spec, C[0, 0], C[2, 2])
    if return_solver:
        return t, solver
    return t


def extract_length_scale(t: Tangents):
    """Least-squares ``l`` with ``D ~ l^2 blockdiag(C, C)``.

    Returns ``(l, relative_residual)``; ``l = 0`` when the fit is not positive.
    """
    B = blockdiag2(np.asarray(t.C, float))
    D = np.asarray(t.D, float)
    bb = float((B * B).sum())
    s = float((D * B).sum()) / bb if bb > 0 else 0.0
    s = max(s, 0.0)
    dn = float(np.linalg.norm(D))
    res = float(np.linalg.norm(D - s * B)) / dn if dn > 0 else 0.0
    return float(np.sqrt(s)), res
