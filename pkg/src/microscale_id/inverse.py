"""Objectives, finite-difference gradients, the optimizer and both
identification stages.

Stage 1 fits ``alpha = (lambda, mu, l)`` of an isotropic gradient-elastic
beam to measured top-surface deflections. Stage 2 fits the microstructure
``beta = (phi, vf)`` so that homogenized tangents match those built from
``alpha``.
"""
from dataclasses import dataclass, field, replace
import logging
import math

import numpy as np

from .errors import MicroscaleError, ObjectiveError, ParameterError
from .homogenize import Tangents, homogenize
from .macro import MacroSolver, MeasurementSet, point_load_vector, sample_top_surface
from .rve import RveSpec, build_grid, circle_count
from .voigt import IsotropicModuli, gradient_d_from, isotropic_c_from

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Alpha:
    lam: float
    mu: float
    l: float

    def __post_init__(self):
        if not (self.lam > 0 and self.mu > 0 and self.l > 0):
            raise ParameterError(f"alpha entries must be positive, got {self}")

    def as_array(self):
        return np.array([self.lam, self.mu, self.l])

    @property
    def C(self):
        return isotropic_c_from(self.lam, self.mu)

    @property
    def D(self):
        return gradient_d_from(self.lam, self.mu, self.l)


@dataclass(frozen=True)
class Beta:
    phi: float
    vf: float

    def __post_init__(self):
        if not (self.phi > 0 and 0 < self.vf < 0.5):
            raise ParameterError(f"beta requires phi > 0 and 0 < vf < 0.5, got {self}")

    def as_array(self):
        return np.array([self.phi, self.vf])


# -- noise -----------------------------------------------------------------

def corrupt(u, gamma, seed):
    """Multiply every entry by ``1 + gamma * r`` with ``r ~ U[-1, 1]``."""
    if not gamma >= 0:
        raise ParameterError(f"noise level must be non-negative, got {gamma}")
    u = np.asarray(u, dtype=float)
    if gamma == 0:
        return u.copy()
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    r = rng.uniform(-1.0, 1.0, size=u.shape)
    return u * (1.0 + gamma * r)


def corrupt_measurements(data: MeasurementSet, gamma, seed):
    return MeasurementSet(data.x, data.y, corrupt(data.clean, gamma, seed), gamma, seed,
                          data.clean)


# -- finite differences -----------------------------------------------------

def fd_gradient(f, x, steps, f0=None):
    """Forward differences ``(f(x + d_k e_k) - f(x)) / d_k``.

    Works for scalar and vector valued ``f``; for vector output the result
    is the Jacobian with one column per parameter.
    """
    x = np.asarray(x, dtype=float)
    steps = np.broadcast_to(np.asarray(steps, dtype=float), x.shape)
    f0 = f(x) if f0 is None else f0
    f0 = np.asarray(f0, dtype=float)
    cols = []
    for k in range(x.size):
        xk = x.copy()
        xk[k] += steps[k]
        cols.append((np.asarray(f(xk), dtype=float) - f0) / steps[k])
    return np.array(cols) if f0.ndim == 0 else np.column_stack(cols)


# -- optimizer ---------------------------------------------------------------

@dataclass
class OptimConfig:
    tol_f: float = 1e-10
    tol_g: float = 1e-6
    tol_x: float = 1e-12
    max_iter: int = 100
    armijo_c: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 25
    max_step: float = 1.0
    lower: tuple = None
    upper: tuple = None


@dataclass
class OptimResult:
    x: np.ndarray
    f: float
    n_iter: int
    reason: str
    history: list = field(default_factory=list)
    n_evals: int = 0
    snapshots: list = field(default_factory=list)

    @property
    def objective_history(self):
        return np.array([h["f"] for h in self.history])

    @property
    def converged(self):
        return self.reason in ("tol_f", "tol_g", "tol_x")


class _Counted:
    def __init__(self, f):
        self.f = f
        self.n = 0

    def __call__(self, x):
        self.n += 1
        return self.f(x)


def minimize(f, x0, config: OptimConfig = None, grad=None, steps=None, callback=None):
    """BFGS with projected Armijo backtracking on ``z = x / x0``.

    ``grad(x, fx)`` returns the gradient in ``x``; without it a forward
    difference with per-parameter ``steps(x)`` (array or callable) is used.
    ``callback(k, x, fx)`` is invoked for the initial point and every
    accepted iterate.
    """
    cfg = config or OptimConfig()
    x0 = np.asarray(x0, dtype=float)
    if np.any(x0 == 0):
        raise ParameterError("initial guess must have non-zero entries for normalization")
    scale = np.abs(x0)
    n = x0.size
    lo = np.full(n, -np.inf) if cfg.lower is None else np.asarray(cfg.lower, float)
    hi = np.full(n, np.inf) if cfg.upper is None else np.asarray(cfg.upper, float)
    f = _Counted(f)

    def project(z):
        return np.clip(z, lo / scale, hi / scale)

    def gradient_z(z, fz):
        x = z * scale
        if grad is not None:
            g = np.asarray(grad(x, fz), dtype=float)
        else:
            st = steps(x) if callable(steps) else (1e-6 * np.maximum(np.abs(x), 1.0)
                                                  if steps is None else steps)
            g = fd_gradient(f, x, st, fz)
        return g * scale

    z = project(x0 / scale)
    try:
        fz = float(f(z * scale))
    except MicroscaleError as exc:
        raise ObjectiveError(f"objective failed at the initial guess: {exc}") from exc
    if not math.isfinite(fz):
        raise ObjectiveError("objective is not finite at the initial guess")
    history = [dict(iteration=0, x=(z * scale).tolist(), f=fz, gnorm=float("nan"), step=0.0)]
    if callback:
        callback(0, z * scale, fz)
    if fz < cfg.tol_f:
        return OptimResult(z * scale, fz, 0, "tol_f", history, f.n)

    lo_z, hi_z = lo / scale, hi / scale

    def projected(g, z):
        # components pushing against an active bound do not count
        out = g.copy()
        out[((z <= lo_z) & (g > 0)) | ((z >= hi_z) & (g < 0))] = 0.0
        return out

    g = projected(gradient_z(z, fz), z)
    history[0]["gnorm"] = float(np.linalg.norm(g))
    Hinv = np.eye(n)
    first = True
    reason = "max_iter"
    k = 0
    while k < cfg.max_iter:
        relg = np.max(np.abs(g) * np.maximum(np.abs(z), 1.0)) / max(abs(fz), 1.0)
        if relg < cfg.tol_g:
            reason = "tol_g"
            break
        free = g != 0
        p = -Hinv @ g
        p[~free] = 0.0
        if g @ p >= 0:
            Hinv = np.eye(n)
            p = -g
        pn = np.linalg.norm(p)
        if pn > cfg.max_step:
            p *= cfg.max_step / pn
        t = 1.0
        accepted = False
        for _ in range(cfg.max_backtracks + 1):
            z_new = project(z + t * p)
            dz = z_new - z
            if not np.any(dz):
                break
            try:
                f_new = float(f(z_new * scale))
            except MicroscaleError as exc:
                log.debug("objective failed during line search: %s", exc)
                f_new = math.inf
            if math.isfinite(f_new) and f_new <= fz + cfg.armijo_c * (g @ dz):
                accepted = True
                break
            t *= cfg.shrink
        if not accepted:
            if not np.allclose(Hinv, np.eye(n)):
                Hinv = np.eye(n)
                first = True
                continue
            reason = "line_search"
            break
        k += 1
        try:
            g_new = projected(gradient_z(z_new, f_new), z_new)
        except MicroscaleError as exc:
            z, fz = z_new, f_new
            history.append(dict(iteration=k, x=(z * scale).tolist(), f=fz,
                                gnorm=float("nan"), step=float(np.linalg.norm(dz))))
            reason = f"gradient_failed: {exc}"
            break
        s, y = dz, g_new - g
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if first:
                Hinv = (sy / (y @ y)) * np.eye(n)
                first = False
            rho = 1.0 / sy
            V = np.eye(n) - rho * np.outer(s, y)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        z, fz, g = z_new, f_new, g_new
        history.append(dict(iteration=k, x=(z * scale).tolist(), f=fz,
                            gnorm=float(np.linalg.norm(g)), step=float(np.linalg.norm(dz))))
        if callback:
            callback(k, z * scale, fz)
        if fz < cfg.tol_f:
            reason = "tol_f"
            break
        if np.linalg.norm(dz) <= cfg.tol_x * max(np.linalg.norm(z), 1.0):
            reason = "tol_x"
            break
    return OptimResult(z * scale, fz, k, reason, history, f.n)


# -- stage 1 -----------------------------------------------------------------

class MacroModel:
    """Forward map ``alpha -> sampled top-surface deflections``.

    Holds the assembled solver and the load vector of a fixed cantilever
    problem; samples are matched to measurements by location.
    """

    def __init__(self, mesh, load_point, load=1.0, component=1):
        self.mesh = mesh
        self.solver = MacroSolver(mesh)
        self.F = point_load_vector(mesh, load_point, component, load)
        self.load_point = load_point
        self.n_solves = 0

    def scaled_load(self, factor):
        other = object.__new__(MacroModel)
        other.__dict__.update(self.__dict__)
        other.F = self.F * factor
        other.n_solves = 0
        return other

    def field(self, C, D):
        self.n_solves += 1
        return self.solver.solve(C, D, self.F)

    def sample(self, C, D):
        return sample_top_surface(self.field(C, D))

    def predict(self, alpha, data: MeasurementSet):
        """Model deflections at the measurement locations of ``data``."""
        lam, mu, l = (alpha.lam, alpha.mu, alpha.l) if isinstance(alpha, Alpha) else alpha
        try:
            s = self.sample(isotropic_c_from(lam, mu), gradient_d_from(lam, mu, l))
        except MicroscaleError as exc:
            raise ObjectiveError(f"forward solve failed at alpha={alpha}: {exc}") from exc
        return s.values[self._index(s, data)]

    def _index(self, samples, data):
        key = getattr(self, "_index_cache", None)
        if key is not None and key[0] is data:
            return key[1]
        idx = np.empty(len(data), dtype=np.int64)
        for n, (x, y) in enumerate(zip(data.x, data.y)):
            d = np.hypot(samples.x - x, samples.y - y)
            j = int(np.argmin(d))
            if d[j] > 1e-9 * max(self.mesh.L, self.mesh.H):
                raise ParameterError(f"measurement at ({x}, {y}) is not a top-surface node")
            idx[n] = j
        self._index_cache = (data, idx)
        return idx


def psi1_from_prediction(pred, data: MeasurementSet):
    u = data.values
    nrm2 = float(u @ u)
    if nrm2 == 0:
        raise ObjectiveError("measured displacements have zero norm")
    r = pred - u
    return 0.5 * float(r @ r) / nrm2


def psi1(alpha, data: MeasurementSet, model: MacroModel):
    """Normalized half-squared misfit of the top-surface deflections."""
    return psi1_from_prediction(model.predict(alpha, data), data)


def _check_alpha_bounds(x):
    lam, mu, l = x
    if not (mu > 0 and lam > -2.0 / 3.0 * mu and l >= 0):
        raise ObjectiveError(f"alpha={tuple(x)} is outside the admissible set")


STAGE1_LOWER = (1e-3, 1e-3, 1e-4)
STAGE1_UPPER = (np.inf, np.inf, np.inf)
STAGE1_REL_STEP = 1e-3


def stage1_config(**kw):
    base = OptimConfig(tol_f=1e-10, tol_g=1e-6, max_iter=100,
                       lower=STAGE1_LOWER, upper=STAGE1_UPPER)
    return replace(base, **kw)


def identify_macro(data: MeasurementSet, guess: Alpha, model: MacroModel, config=None,
                   rel_step=STAGE1_REL_STEP, callback=None):
    """Stage 1: minimize ``psi1`` over ``alpha``.

    The gradient is ``J^T r / |u_exp|^2`` with ``J`` the forward-difference
    Jacobian (relative step ``rel_step``) of the predicted deflections, which
    costs the same k+1 solves as differencing ``psi1`` itself but stays
    unbiased at zero misfit.
    """
    cfg = config or stage1_config()
    nrm2 = float(data.values @ data.values)
    if nrm2 == 0:
        raise ObjectiveError("measured displacements have zero norm")
    cache = {}

    def predict(x):
        key = tuple(np.asarray(x, float))
        if key not in cache:
            _check_alpha_bounds(x)
            if len(cache) > 64:
                cache.clear()
            cache[key] = model.predict(tuple(x), data)
        return cache[key]

    def objective(x):
        return psi1_from_prediction(predict(x), data)

    def gradient(x, fx):
        x = np.asarray(x, float)
        p0 = predict(x)
        J = fd_gradient(predict, x, rel_step * np.abs(x), p0)
        return J.T @ (p0 - data.values) / nrm2

    res = minimize(objective, guess.as_array(), cfg, grad=gradient, callback=callback)
    res.params = Alpha(*res.x)
    return res


# -- stage 2 -----------------------------------------------------------------

@dataclass
class MicroIngredients:
    """Known constituents and the RVE settings held fixed during Stage 2."""
    matrix: IsotropicModuli
    pore: IsotropicModuli
    size_factor: float = 10.0
    seed: int = 1
    raster_n: int = 200


class TangentCache:
    """Homogenized tangents keyed by the normalized geometry.

    The circle packing depends only on (circle count, seed), and tangents
    scale as C ~ 1, D ~ phi^2, so one homogenization per circle count
    serves every ``phi``.
    """

    REF_PHI = 1.0

    def __init__(self, ingredients: MicroIngredients):
        self.ing = ingredients
        self._store = {}
        self.n_homogenizations = 0

    def spec(self, beta):
        phi, vf = beta
        return RveSpec(phi, vf, self.ing.size_factor, self.ing.seed, self.ing.raster_n)

    def tangents(self, beta):
        phi, vf = beta
        n = circle_count(vf, self.ing.size_factor)
        if n not in self._store:
            ref = self.spec((self.REF_PHI, vf))
            self._store[n] = homogenize(ref, self.ing.matrix, self.ing.pore)
            self.n_homogenizations += 1
        return self._store[n].scaled(phi / self.REF_PHI)


def psi2_from_tangents(C, D, C_eff, D_eff):
    cn = float(np.sum(C_eff ** 2))
    dn = float(np.sum(D_eff ** 2))
    if cn == 0 or dn == 0:
        raise ObjectiveError("target tangents must be non-zero")
    return 0.5 * float(np.sum((C - C_eff) ** 2)) / cn + 0.5 * float(np.sum((D - D_eff) ** 2)) / dn


def psi2(beta, target: Tangents, cache: TangentCache):
    """Relative Frobenius misfit between homogenized and effective tangents."""
    phi, vf = beta.as_array() if isinstance(beta, Beta) else beta
    if not (phi > 0 and 0 < vf < 0.5):
        raise ObjectiveError(f"beta=({phi}, {vf}) is outside the admissible set")
    try:
        t = cache.tangents((phi, vf))
    except MicroscaleError as exc:
        raise ObjectiveError(f"homogenization failed at beta=({phi}, {vf}): {exc}") from exc
    return psi2_from_tangents(t.C, t.D, target.C, target.D)


STAGE2_LOWER = (0.01, 0.005)
STAGE2_UPPER = (np.inf, 0.45)


def stage2_steps(x):
    return np.array([0.05 * x[0], 0.01])


def stage2_config(**kw):
    base = OptimConfig(tol_f=1e-10, tol_g=1e-6, max_iter=50,
                       lower=STAGE2_LOWER, upper=STAGE2_UPPER)
    return replace(base, **kw)


def target_from_alpha(alpha: Alpha):
    return Tangents(alpha.C, alpha.D, meta=dict(lam=alpha.lam, mu=alpha.mu, l=alpha.l))


def identify_micro(target, guess: Beta, ingredients: MicroIngredients, config=None,
                   cache: TangentCache = None, snapshots=True):
    """Stage 2: minimize ``psi2`` over ``beta = (phi, vf)``.

    ``target`` is either an :class:`Alpha` (tangents built from the
    isotropic gradient law) or explicit :class:`Tangents`. Each accepted
    iterate's RVE grid is kept in ``result.snapshots``.
    """
    cfg = config or stage2_config()
    if isinstance(target, Alpha):
        target = target_from_alpha(target)
    cache = cache or TangentCache(ingredients)
    grids = []

    def record(k, x, fx):
        if snapshots:
            _, grid = build_grid(cache.spec(x))
            grids.append((k, tuple(x), grid))

    res = minimize(lambda x: psi2(x, target, cache), guess.as_array(), cfg,
                   steps=stage2_steps, callback=record)
    res.params = Beta(*res.x)
    res.snapshots = grids
    res.n_homogenizations = cache.n_homogenizations
    return res
