"""Bell reduced-quintic C1 triangle.

Each scalar field carries six DOFs per vertex, ``(f, f_x, f_y, f_xx, f_xy,
f_yy)`` in global coordinates. The complete quintic has 21 coefficients; the
three extra conditions force the normal derivative to be cubic along every
edge, which is what makes the element C1 when neighbours share vertex DOFs.

The coefficients are obtained by inverting the 21x21 matrix of DOF
functionals applied to scaled monomials, once per triangle shape.
"""
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .errors import GeometryError

# exponents (a, b) of xi^a eta^b, total degree <= 5
MONOMIALS = [(a, d - a) for d in range(6) for a in range(d, -1, -1)]
N_MONO = len(MONOMIALS)
N_BASIS = 18

# derivative orders of the six vertex functionals: (d/dx order, d/dy order)
VERTEX_DERIVS = [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]


def _falling(a, k):
    out = 1.0
    for i in range(k):
        out *= a - i
    return out


def monomial_derivs(xi, eta, dx, dy):
    """Values of d^(dx+dy)/dxi^dx deta^dy of every monomial at the points.

    Returns an array of shape (npts, 21).
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    out = np.zeros((xi.size, N_MONO))
    for m, (a, b) in enumerate(MONOMIALS):
        if a < dx or b < dy:
            continue
        out[:, m] = _falling(a, dx) * _falling(b, dy) * xi ** (a - dx) * eta ** (b - dy)
    return out


class BellTriangle:
    """Basis of one triangle given its three vertices (counter-clockwise).

    Local monomials use ``xi = (x - xc) / h`` and ``eta = (y - yc) / h`` with
    ``xc`` the centroid and ``h`` the longest edge, which keeps the 21x21
    system well conditioned independently of the physical size.
    """

    def __init__(self, vertices):
        v = np.asarray(vertices, dtype=float).reshape(3, 2)
        area = 0.5 * ((v[1, 0] - v[0, 0]) * (v[2, 1] - v[0, 1])
                      - (v[2, 0] - v[0, 0]) * (v[1, 1] - v[0, 1]))
        edges = np.roll(v, -1, axis=0) - v
        h = np.sqrt((edges ** 2).sum(axis=1)).max()
        if not np.isfinite(area) or h == 0 or area <= 1e-12 * h * h:
            raise GeometryError(f"degenerate or clockwise triangle, area={area}")
        self.vertices = v
        self.area = area
        self.center = v.mean(axis=0)
        self.h = h
        self.coeffs = self._solve_coefficients()

    def _local(self, x, y):
        return (np.asarray(x, float) - self.center[0]) / self.h, \
               (np.asarray(y, float) - self.center[1]) / self.h

    def _phys_derivs(self, x, y, dx, dy):
        xi, eta = self._local(x, y)
        return monomial_derivs(xi, eta, dx, dy) / self.h ** (dx + dy)

    def _solve_coefficients(self):
        rows = []
        for p in self.vertices:
            for dx, dy in VERTEX_DERIVS:
                rows.append(self._phys_derivs(p[0], p[1], dx, dy)[0])
        # quartic coefficient of n.grad along each edge must vanish; the
        # fourth forward difference on five equally spaced points isolates it
        weights = np.array([1.0, -4.0, 6.0, -4.0, 1.0])
        t = np.linspace(0.0, 1.0, 5)
        for k in range(3):
            a, b = self.vertices[(k + 1) % 3], self.vertices[(k + 2) % 3]
            tang = b - a
            normal = np.array([tang[1], -tang[0]]) / np.hypot(*tang)
            pts = a[None, :] + t[:, None] * tang[None, :]
            gn = (normal[0] * self._phys_derivs(pts[:, 0], pts[:, 1], 1, 0)
                  + normal[1] * self._phys_derivs(pts[:, 0], pts[:, 1], 0, 1))
            rows.append(weights @ gn * self.h)
        M = np.array(rows)
        cond = np.linalg.cond(M)
        if not np.isfinite(cond) or cond > 1e12:
            raise GeometryError(f"Bell functional matrix is singular (cond={cond:.3g})")
        return np.linalg.inv(M)[:, :N_BASIS]

    def evaluate(self, x, y, dx=0, dy=0):
        """Basis derivatives of order (dx, dy); shape (npts, 18)."""
        return self._phys_derivs(x, y, dx, dy) @ self.coeffs

    def all_derivatives(self, x, y):
        """Stack of value and all derivatives up to order 2.

        Returns an array of shape (6, npts, 18) ordered like the vertex DOFs:
        N, N_x, N_y, N_xx, N_xy, N_yy.
        """
        return np.stack([self.evaluate(x, y, dx, dy) for dx, dy in VERTEX_DERIVS])

    def barycentric(self, x, y):
        v = self.vertices
        T = np.array([[v[0, 0] - v[2, 0], v[1, 0] - v[2, 0]],
                      [v[0, 1] - v[2, 1], v[1, 1] - v[2, 1]]])
        l12 = np.linalg.solve(T, np.vstack([np.atleast_1d(x) - v[2, 0],
                                            np.atleast_1d(y) - v[2, 1]]))
        return np.vstack([l12, 1.0 - l12.sum(axis=0)])


def bell_basis(vertices, x, y):
    """Values and derivatives up to second order of the 18 Bell functions.

    Returns an array of shape (6, npts, 18); the leading axis runs over
    (N, N_x, N_y, N_xx, N_xy, N_yy). Column ``6*i + d`` is the basis function
    dual to the ``d``-th DOF of vertex ``i``.
    """
    return BellTriangle(vertices).all_derivatives(x, y)


@lru_cache(maxsize=None)
def triangle_quadrature(degree=11):
    """Collapsed Gauss-Jacobi product rule on the reference triangle.

    Points are barycentric-free coordinates ``(r, s)`` on the triangle
    (0,0)-(1,0)-(0,1); weights sum to 1/2. Exact for total degree ``degree``.
    """
    n = (degree + 2) // 2
    xa, wa = roots_jacobi(n, 1.0, 0.0)  # absorbs the Duffy Jacobian (1 - a)
    xb, wb = roots_legendre(n)
    a = 0.5 * (xa + 1.0)
    b = 0.5 * (xb + 1.0)
    r = np.outer(a, np.ones(n))
    s = np.outer(1.0 - a, b)
    w = np.outer(wa, wb) * 0.125
    return np.column_stack([r.ravel(), s.ravel()]), w.ravel()


def triangle_points(vertices, degree=11):
    """Physical quadrature points and weights on a triangle."""
    v = np.asarray(vertices, dtype=float)
    rs, w = triangle_quadrature(degree)
    area2 = abs((v[1, 0] - v[0, 0]) * (v[2, 1] - v[0, 1])
                - (v[2, 0] - v[0, 0]) * (v[1, 1] - v[0, 1]))
    pts = v[0] + rs[:, :1] * (v[1] - v[0]) + rs[:, 1:] * (v[2] - v[0])
    return pts, w * area2
