"""Plane-strain gradient-elasticity solver on a structured cantilever mesh.

Every node carries 12 DOFs, ``(u, u_x, u_y, u_xx, u_xy, u_yy)`` followed by
the same six for ``v``. Global DOF index is ``12 * node + 6 * comp + d``.
Elements are Bell triangles (:mod:`microscale_id.bell`), so the element DOF
vector is simply the concatenation of its three nodes' DOF blocks.
"""
from dataclasses import dataclass, field
import logging

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .bell import BellTriangle, triangle_points
from .errors import GeometryError, ParameterError, SolveError

log = logging.getLogger(__name__)

DOFS_PER_NODE = 12
LOAD_POLICIES = ("mid-depth", "top-corner", "bottom-corner")
# derivative DOFs fixed on a clamped edge x = const (c_xx stays free)
CLAMPED_DERIVS = (0, 1, 2, 4, 5)


@dataclass
class MacroMesh:
    L: float
    H: float
    nx: int
    ny: int
    nodes: np.ndarray
    triangles: np.ndarray

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_dofs(self):
        return DOFS_PER_NODE * self.n_nodes

    def node_id(self, i, j):
        return i * (self.ny + 1) + j

    def top_nodes(self):
        return np.array([self.node_id(i, self.ny) for i in range(self.nx + 1)])

    def edge_nodes(self, x):
        """Nodes on the vertical line at ``x`` (must be a grid line)."""
        i = int(round(x / self.L * self.nx))
        if not np.isclose(i * self.L / self.nx, x, rtol=0, atol=1e-12 * self.L):
            raise ParameterError(f"x={x} is not a grid line")
        return np.array([self.node_id(i, j) for j in range(self.ny + 1)])

    def triangle_areas(self):
        v = self.nodes[self.triangles]
        return 0.5 * ((v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1])
                      - (v[:, 2, 0] - v[:, 0, 0]) * (v[:, 1, 1] - v[:, 0, 1]))

    def locate(self, x, y):
        """Index of a triangle containing the point (closed triangles)."""
        dx, dy = self.L / self.nx, self.H / self.ny
        tol = 1e-10 * max(self.L, self.H)
        if not (-tol <= x <= self.L + tol and -tol <= y <= self.H + tol):
            raise ParameterError(f"point ({x}, {y}) lies outside the beam")
        i = min(max(int(np.floor(x / dx)), 0), self.nx - 1)
        j = min(max(int(np.floor(y / dy)), 0), self.ny - 1)
        xi, eta = x / dx - i, y / dy - j
        cell = i * self.ny + j
        return 2 * cell if eta <= xi else 2 * cell + 1


def build_cantilever(L, H, nx, ny) -> MacroMesh:
    """Structured grid with every cell split along its lower-left to
    upper-right diagonal."""
    if not (L > 0 and H > 0):
        raise ParameterError(f"beam dimensions must be positive, got L={L}, H={H}")
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise ParameterError(f"grid counts must be integers >= 1, got {nx}, {ny}")
    nx, ny = int(nx), int(ny)
    xs = np.linspace(0.0, L, nx + 1)
    ys = np.linspace(0.0, H, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    n00 = (i * (ny + 1) + j).ravel()
    n10 = n00 + (ny + 1)
    n11 = n10 + 1
    n01 = n00 + 1
    tris = np.empty((2 * nx * ny, 3), dtype=np.int64)
    tris[0::2] = np.column_stack([n00, n10, n11])
    tris[1::2] = np.column_stack([n00, n11, n01])
    return MacroMesh(float(L), float(H), nx, ny, nodes, tris)


# -- element level ---------------------------------------------------------

def strain_operators(derivs):
    """Strain and strain-gradient operators from Bell derivative stacks.

    ``derivs`` has shape (6, nq, 18) (see ``BellTriangle.all_derivatives``).
    Returns ``B_eps`` (nq, 3, 36) and ``B_eta`` (nq, 6, 36) in the element
    DOF ordering ``[node0: u(6) v(6), node1: ..., node2: ...]``.
    """
    N, Nx, Ny, Nxx, Nxy, Nyy = derivs
    nq = N.shape[0]
    u_idx = np.array([12 * i + d for i in range(3) for d in range(6)])
    v_idx = u_idx + 6
    be = np.zeros((nq, 3, 36))
    be[:, 0, u_idx] = Nx
    be[:, 1, v_idx] = Ny
    be[:, 2, u_idx] = Ny
    be[:, 2, v_idx] = Nx
    bh = np.zeros((nq, 6, 36))
    bh[:, 0, u_idx] = Nxx           # eta111
    bh[:, 1, v_idx] = Nxy           # eta122 = v_yx
    bh[:, 2, u_idx] = Nxy           # 2 eta112 = u_xy + v_xx
    bh[:, 2, v_idx] = Nxx
    bh[:, 3, u_idx] = Nxy           # eta211 = u_xy
    bh[:, 4, v_idx] = Nyy           # eta222
    bh[:, 5, u_idx] = Nyy           # 2 eta212 = u_yy + v_xy
    bh[:, 5, v_idx] = Nxy
    return be, bh


class ElementOperators:
    """Quadrature-point operators of one triangle, independent of material."""

    def __init__(self, vertices):
        self.tri = BellTriangle(vertices)
        pts, w = triangle_points(self.tri.vertices)
        self.weights = w
        self.b_eps, self.b_eta = strain_operators(
            self.tri.all_derivatives(pts[:, 0], pts[:, 1]))

    def stiffness(self, C, D):
        w = self.weights
        K = np.einsum("q,qai,ab,qbj->ij", w, self.b_eps, C, self.b_eps)
        K += np.einsum("q,qai,ab,qbj->ij", w, self.b_eta, D, self.b_eta)
        return 0.5 * (K + K.T)


def element_stiffness(vertices, C, D):
    """36x36 stiffness of one Bell triangle for tangents ``C`` and ``D``."""
    return ElementOperators(vertices).stiffness(np.asarray(C, float), np.asarray(D, float))


def _shape_key(v, scale):
    rel = (v - v[0]) / scale
    return tuple(np.round(rel.ravel(), 12))


# -- problem / field ---------------------------------------------------------

@dataclass
class MacroProblem:
    """Boundary value problem on a cantilever mesh.

    ``load_point`` is a physical location; the concentrated force is
    distributed consistently through the Bell basis of the triangle that
    contains it, which reduces to a single nodal force when it sits on a node.
    """
    mesh: MacroMesh
    C: np.ndarray
    D: np.ndarray
    load_point: tuple
    load_component: int = 1
    load_magnitude: float = 1.0
    clamped_x: float = 0.0
    prescribed: dict = field(default_factory=dict)

    def __post_init__(self):
        self.C = np.asarray(self.C, dtype=float)
        self.D = np.asarray(self.D, dtype=float)
        if self.C.shape != (3, 3) or self.D.shape != (6, 6):
            raise ParameterError("tangents must be 3x3 (C) and 6x6 (D)")
        if self.load_component not in (0, 1):
            raise ParameterError("load component must be 0 (u) or 1 (v)")
        self.mesh.locate(*self.load_point)

    def with_tangents(self, C, D, load_magnitude=None):
        return MacroProblem(self.mesh, C, D, self.load_point, self.load_component,
                            self.load_magnitude if load_magnitude is None else load_magnitude,
                            self.clamped_x, dict(self.prescribed))


def load_point_for(mesh: MacroMesh, policy="mid-depth"):
    if policy not in LOAD_POLICIES:
        raise ParameterError(f"unknown load policy {policy!r}; choose from {LOAD_POLICIES}")
    y = {"mid-depth": 0.5 * mesh.H, "top-corner": mesh.H, "bottom-corner": 0.0}[policy]
    return (mesh.L, y)


def cantilever_problem(mesh, C, D, load=1.0, policy="mid-depth"):
    return MacroProblem(mesh, C, D, load_point_for(mesh, policy), 1, load)


@dataclass
class MacroField:
    mesh: MacroMesh
    dofs: np.ndarray  # (n_nodes, 12)

    def __post_init__(self):
        self.dofs = np.asarray(self.dofs, dtype=float).reshape(-1, DOFS_PER_NODE)
        if not np.all(np.isfinite(self.dofs)):
            raise SolveError("non-finite values in macro field")

    @property
    def vector(self):
        return self.dofs.ravel()

    def displacement(self, nodes=None):
        d = self.dofs if nodes is None else self.dofs[nodes]
        return d[:, [0, 6]]

    def gradient(self, nodes=None):
        """Nodal ``grad[n, i, j] = du_i/dx_j``."""
        d = self.dofs if nodes is None else self.dofs[nodes]
        return np.stack([d[:, [1, 2]], d[:, [7, 8]]], axis=1)

    def hessian(self, nodes=None):
        """Nodal ``hess[n, i, j, k] = d2u_i/dx_j dx_k``."""
        d = self.dofs if nodes is None else self.dofs[nodes]
        out = np.empty((len(d), 2, 2, 2))
        for c, off in enumerate((0, 6)):
            out[:, c, 0, 0] = d[:, off + 3]
            out[:, c, 0, 1] = out[:, c, 1, 0] = d[:, off + 4]
            out[:, c, 1, 1] = d[:, off + 5]
        return out

    def evaluate(self, x, y):
        """Displacement, gradient and Hessian at an arbitrary point."""
        e = self.mesh.locate(x, y)
        tri = BellTriangle(self.mesh.nodes[self.mesh.triangles[e]])
        der = tri.all_derivatives(x, y)[:, 0, :]  # (6, 18)
        local = self.dofs[self.mesh.triangles[e]]  # (3, 12)
        uvals = der @ local[:, :6].ravel()
        vvals = der @ local[:, 6:].ravel()
        u = np.array([uvals[0], vvals[0]])
        grad = np.array([uvals[1:3], vvals[1:3]])
        hess = np.array([[[uvals[3], uvals[4]], [uvals[4], uvals[5]]],
                         [[vvals[3], vvals[4]], [vvals[4], vvals[5]]]])
        return u, grad, hess

    def tip_deflection(self):
        """Vertical displacement of the top free-end corner."""
        return self.dofs[self.mesh.node_id(self.mesh.nx, self.mesh.ny), 6]

    def to_csv(self, path):
        header = "node,x,y," + ",".join(
            f"{c}{s}" for c in "uv" for s in ("", "_x", "_y", "_xx", "_xy", "_yy"))
        data = np.column_stack([np.arange(self.mesh.n_nodes), self.mesh.nodes, self.dofs])
        np.savetxt(path, data, delimiter=",", header="# units: mm\n" + header,
                   comments="", fmt=["%d"] + ["%.17g"] * (2 + DOFS_PER_NODE))


def linear_field_dofs(mesh, u0, grad):
    """DOF array of the global linear field ``u = u0 + grad @ x``."""
    grad = np.asarray(grad, float)
    dofs = np.zeros((mesh.n_nodes, DOFS_PER_NODE))
    for c in range(2):
        dofs[:, 6 * c] = u0[c] + mesh.nodes @ grad[c]
        dofs[:, 6 * c + 1] = grad[c, 0]
        dofs[:, 6 * c + 2] = grad[c, 1]
    return dofs


# -- assembly -------------------------------------------------------------

class MacroAssembler:
    """Sparse assembly for a fixed mesh and constraint set.

    The sparsity pattern and the scatter map are computed once; assembling for
    new tangents only recomputes one 36x36 matrix per distinct triangle shape.
    """

    def __init__(self, mesh: MacroMesh, fixed_dofs):
        self.mesh = mesh
        n = mesh.n_dofs
        verts = mesh.nodes[mesh.triangles]
        scale = max(mesh.L, mesh.H)
        keys = [_shape_key(v, scale) for v in verts]
        uniq = {}
        self.shape_id = np.array([uniq.setdefault(k, len(uniq)) for k in keys])
        self.operators = []
        for k in uniq:
            e = keys.index(k)
            self.operators.append(ElementOperators(verts[e]))

        edofs = (DOFS_PER_NODE * mesh.triangles[:, :, None]
                 + np.arange(DOFS_PER_NODE)).reshape(-1, 36)
        self.edofs = edofs
        fixed = np.zeros(n, dtype=bool)
        fixed[np.asarray(fixed_dofs, dtype=np.int64)] = True
        self.fixed = fixed
        self.free = np.flatnonzero(~fixed)
        rows = np.repeat(edofs, 36, axis=1).ravel()
        cols = np.tile(edofs, (1, 36)).ravel()
        keys = rows * n + cols
        uniq_keys, self._inverse = np.unique(keys, return_inverse=True)
        self._rows = uniq_keys // n
        self._cols = uniq_keys % n
        self._nnz = len(uniq_keys)

    def element_matrices(self, C, D):
        return np.stack([op.stiffness(C, D) for op in self.operators])

    def global_matrix(self, C, D):
        ke = self.element_matrices(C, D)[self.shape_id]
        data = np.bincount(self._inverse, weights=ke.ravel(), minlength=self._nnz)
        n = self.mesh.n_dofs
        return sp.csr_matrix((data, (self._rows, self._cols)), shape=(n, n))


def point_load_vector(mesh, point, component, magnitude):
    """Consistent nodal forces of a concentrated force at ``point``."""
    e = mesh.locate(*point)
    tri = BellTriangle(mesh.nodes[mesh.triangles[e]])
    N = tri.evaluate(point[0], point[1])[0]  # (18,)
    F = np.zeros(mesh.n_dofs)
    for i, node in enumerate(mesh.triangles[e]):
        base = DOFS_PER_NODE * node + 6 * component
        F[base:base + 6] += magnitude * N[6 * i:6 * i + 6]
    F[np.abs(F) < 1e-15 * abs(magnitude)] = 0.0
    return F


def clamped_dofs(mesh, x=0.0):
    nodes = mesh.edge_nodes(x)
    return np.array([DOFS_PER_NODE * n + 6 * c + d
                     for n in nodes for c in range(2) for d in CLAMPED_DERIVS])


@dataclass
class SolveReport:
    residual: float
    energy_stiffness: float
    energy_load: float
    n_free: int


class MacroSolver:
    """Reusable solver for one mesh, clamp and load location."""

    def __init__(self, mesh, clamped_x=0.0, extra_fixed=()):
        self.mesh = mesh
        fixed = np.union1d(clamped_dofs(mesh, clamped_x), np.asarray(extra_fixed, dtype=np.int64))
        self.assembler = MacroAssembler(mesh, fixed)
        self.report = None

    def solve(self, C, D, F, prescribed=None):
        """Solve ``K u = F`` with zero (or ``prescribed``) values on fixed DOFs."""
        asm = self.assembler
        K = asm.global_matrix(np.asarray(C, float), np.asarray(D, float)).tocsc()
        u = np.zeros(self.mesh.n_dofs)
        if prescribed:
            idx = np.fromiter(prescribed.keys(), dtype=np.int64)
            if not np.all(asm.fixed[idx]):
                raise ParameterError("prescribed values given for unconstrained DOFs")
            u[idx] = np.fromiter(prescribed.values(), dtype=float)
        free = asm.free
        rhs = F[free] - K[free][:, asm.fixed] @ u[asm.fixed] if prescribed else F[free]
        Kff = K[free][:, free]
        if not rhs.any():
            self.report = SolveReport(0.0, 0.0, 0.0, len(free))
            return MacroField(self.mesh, u)
        diag = Kff.diagonal()
        if np.any(diag <= 0):
            bad = free[np.flatnonzero(diag <= 0)[:5]]
            raise SolveError(f"non-positive stiffness diagonal at DOFs {bad.tolist()} "
                             "(node, comp, deriv) = "
                             f"{[(d // 12, d % 12 // 6, d % 6) for d in bad]}")
        # derivative DOFs span several orders of magnitude; equilibrate first
        s = 1.0 / np.sqrt(diag)
        Ks = sp.diags(s) @ Kff @ sp.diags(s)
        try:
            lu = spla.splu(Ks.tocsc(), permc_spec="MMD_AT_PLUS_A",
                           diag_pivot_thresh=0.0, options={"SymmetricMode": True})
        except RuntimeError as exc:
            raise SolveError(f"macro stiffness factorization failed: {exc}; "
                             f"{len(free)} free DOFs, {asm.fixed.sum()} fixed") from exc
        x = s * lu.solve(s * rhs)
        if not np.all(np.isfinite(x)):
            raise SolveError("macro solve produced non-finite values; check the clamp")
        # value rows cancel terms ~1e5 times the load, so the double-precision
        # residual floor sits near 1e-9; refine with extended-precision residuals
        K_ext = Kff.astype(np.longdouble)
        rhs_ext = rhs.astype(np.longdouble)
        x_ext = x.astype(np.longdouble)
        rnorm = float(np.linalg.norm(rhs))
        for _ in range(4):
            r = rhs_ext - K_ext @ x_ext
            res = float(np.sqrt(np.sum(r * r))) / rnorm
            if res <= 1e-13:
                break
            x_ext += s * lu.solve(s * r.astype(float))
        x = x_ext.astype(float)
        if res > 1e-9:
            raise SolveError(f"macro solve residual {res:.3g} exceeds 1e-9")
        u_ext = u.astype(np.longdouble)
        u_ext[free] = x_ext
        F_ext = F.astype(np.longdouble)
        if prescribed:
            # reactions on the constrained DOFs do work on prescribed values
            F_ext = K.astype(np.longdouble) @ u_ext
        w_int = 0.5 * float(u_ext @ (K.astype(np.longdouble) @ u_ext))
        w_ext = 0.5 * float(F_ext @ u_ext)
        u[free] = x
        self.report = SolveReport(res, w_int, w_ext, len(free))
        return MacroField(self.mesh, u)


def assemble_and_solve(problem: MacroProblem, solver: MacroSolver = None) -> MacroField:
    """Solve the gradient-elastic cantilever problem."""
    if solver is None:
        solver = MacroSolver(problem.mesh, problem.clamped_x,
                             extra_fixed=list(problem.prescribed))
    F = point_load_vector(problem.mesh, problem.load_point,
                          problem.load_component, problem.load_magnitude)
    return solver.solve(problem.C, problem.D, F, problem.prescribed or None)


@dataclass
class MeasurementSet:
    """Vertical top-surface displacements and their sampling locations.

    ``clean`` keeps the noiseless values when ``values`` have been corrupted.
    """
    x: np.ndarray
    y: np.ndarray
    values: np.ndarray
    gamma: float = 0.0
    seed: int = None
    clean: np.ndarray = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.clean is None:
            self.clean = self.values.copy()
        else:
            self.clean = np.asarray(self.clean, dtype=float)
        if not (len(self.x) == len(self.y) == len(self.values) == len(self.clean)):
            raise ParameterError("measurement arrays must have equal length")

    def __len__(self):
        return len(self.values)

    @property
    def norm(self):
        return float(np.linalg.norm(self.values))

    def scaled(self, factor):
        return MeasurementSet(self.x, self.y, self.values * factor, self.gamma,
                              self.seed, self.clean * factor)

    def reordered(self, order):
        order = np.asarray(order)
        return MeasurementSet(self.x[order], self.y[order], self.values[order],
                              self.gamma, self.seed, self.clean[order])


def sample_top_surface(field: MacroField, mesh: MacroMesh = None) -> MeasurementSet:
    """Vertical displacement at every top-edge node, ordered by increasing x."""
    mesh = field.mesh if mesh is None else mesh
    nodes = mesh.top_nodes()
    xy = mesh.nodes[nodes]
    order = np.argsort(xy[:, 0], kind="stable")
    nodes = nodes[order]
    return MeasurementSet(xy[order, 0], xy[order, 1], field.dofs[nodes, 6].copy())
