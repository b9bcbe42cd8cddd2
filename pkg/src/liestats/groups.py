"""Matrix Lie groups with the canonical Cartan-Schouten connection.

Elements are plain numpy arrays; a group object knows their layout and
implements the group operations on arbitrary leading batch dimensions:

=================  ======================  ===========================
group              element array           tangent coordinates
=================  ======================  ===========================
``Translation(d)`` ``(..., d)``            identity map
``SO3()``          ``(..., 3, 3)``         axis-angle ``omega``
``SE3()``          ``(..., 4, 4)``         ``(omega, u)``, rotation first
``GLPlus(n)``      ``(..., n, n)``         row-major entries of the log
``Product(fs)``    ``(..., sum sizes)``    concatenated factor coordinates
=================  ======================  ===========================

SE(3) elements are homogeneous matrices ``[[R, t], [0, 1]]`` so composition
is a matrix product; use :meth:`SE3.from_rt` / :meth:`SE3.split` to convert.
"""
from __future__ import annotations

import math
from functools import reduce

import numpy as np

from . import matfun
from .errors import (
    DescriptorMismatch,
    EmptyProduct,
    InvalidElement,
    OutsideLogDomain,
)
from .matfun import DEFAULT_POLICY, NumericPolicy

__all__ = [
    "LieGroup",
    "Translation",
    "SO3",
    "SE3",
    "GLPlus",
    "Product",
    "power",
    "product_group",
    "parse_group",
    "hat3",
    "vee3",
]


def hat3(w):
    """Skew-symmetric matrix ``[w]_x`` with ``[w]_x v = w x v``."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def vee3(W):
    W = np.asarray(W, dtype=float)
    return np.stack([W[..., 2, 1], W[..., 0, 2], W[..., 1, 0]], axis=-1)


class LieGroup:
    """Common interface; subclasses fill in the kernels.

    Attributes
    ----------
    tag : str
        Descriptor string, e.g. ``"se3"`` or ``"power:glplus:3:20"``.
    dim : int
        Dimension of the tangent space at the identity.
    shape : tuple
        Trailing shape of one element array.
    """

    tag: str
    dim: int
    shape: tuple

    def __init__(self, policy: NumericPolicy | None = None):
        self.policy = policy or DEFAULT_POLICY

    @property
    def ndim(self) -> int:
        return len(self.shape)

    def __eq__(self, other):
        return isinstance(other, LieGroup) and self.tag == other.tag

    def __hash__(self):
        return hash(self.tag)

    def __repr__(self):
        return f"<{type(self).__name__} {self.tag}>"

    def _check(self, *arrays):
        for a in arrays:
            if np.shape(a)[np.ndim(a) - self.ndim:] != self.shape:
                raise DescriptorMismatch(
                    f"{self.tag}: expected trailing shape {self.shape}, got {np.shape(a)}"
                )

    # kernels -------------------------------------------------------------
    def identity(self):
        raise NotImplementedError

    def compose(self, g, h):
        raise NotImplementedError

    def inverse(self, g):
        raise NotImplementedError

    def log(self, g):
        raise NotImplementedError

    def exp(self, v):
        raise NotImplementedError

    def adjoint(self, g):
        raise NotImplementedError

    def validate(self, g):
        """Raise :class:`InvalidElement` unless every element in ``g`` is valid."""
        raise NotImplementedError

    def in_log_domain(self, v):
        """Mask of tangent vectors ``v`` that ``log(exp(v))`` reproduces."""
        v = np.asarray(v, dtype=float)
        return np.ones(v.shape[:-1], dtype=bool)

    # connection ----------------------------------------------------------
    def connection_log(self, g, h):
        """Left-trivialized CCS logarithm: coordinates of ``log(g^-1 h)``."""
        return self.log(self.compose(self.inverse(g), h))

    def connection_exp(self, g, v):
        """CCS exponential in left-trivialized coordinates: ``g exp(v)``."""
        return self.compose(g, self.exp(v))

    # serialization -------------------------------------------------------
    def to_payload(self, g):
        return np.asarray(g, dtype=float).tolist()

    def from_payload(self, obj):
        try:
            g = np.asarray(obj, dtype=float)
        except (TypeError, ValueError) as exc:
            raise InvalidElement(f"{self.tag}: cannot parse payload ({exc})") from None
        if g.shape != self.shape:
            raise InvalidElement(f"{self.tag}: payload has shape {g.shape}, expected {self.shape}")
        self.validate(g)
        return g


class Translation(LieGroup):
    """The additive group R^d."""

    def __init__(self, d: int, policy=None):
        super().__init__(policy)
        if d < 1:
            raise ValueError("Translation dimension must be >= 1")
        self.d = d
        self.dim = d
        self.shape = (d,)
        self.tag = f"translation:{d}"

    def identity(self):
        return np.zeros(self.d)

    def compose(self, g, h):
        self._check(g, h)
        return np.asarray(g, dtype=float) + np.asarray(h, dtype=float)

    def inverse(self, g):
        return -np.asarray(g, dtype=float)

    def log(self, g):
        return np.array(g, dtype=float)

    def exp(self, v):
        return np.array(v, dtype=float)

    def adjoint(self, g):
        g = np.asarray(g, dtype=float)
        return np.broadcast_to(np.eye(self.d), g.shape[:-1] + (self.d, self.d)).copy()

    def validate(self, g):
        g = np.asarray(g)
        if g.shape[g.ndim - 1:] != self.shape:
            raise InvalidElement(f"{self.tag}: wrong shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise InvalidElement(f"{self.tag}: non-finite entries")


def _rodrigues_coeffs(theta, small):
    """sin(t)/t, (1 - cos t)/t^2, (t - sin t)/t^3 with series near zero."""
    t2 = theta * theta
    tiny = theta < small
    safe = np.where(tiny, 1.0, theta)
    a = np.where(tiny, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(safe) / safe)
    b = np.where(tiny, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(safe)) / safe**2)
    c = np.where(tiny, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
                 (safe - np.sin(safe)) / safe**3)
    return a, b, c


class SO3(LieGroup):
    """Rotations of R^3 with closed-form Rodrigues exp/log."""

    def __init__(self, policy=None):
        super().__init__(policy)
        self.dim = 3
        self.shape = (3, 3)
        self.tag = "so3"

    def identity(self):
        return np.eye(3)

    def compose(self, g, h):
        self._check(g, h)
        return np.matmul(g, h)

    def inverse(self, g):
        return np.swapaxes(np.asarray(g, dtype=float), -1, -2).copy()

    def exp(self, v):
        v = np.asarray(v, dtype=float)
        theta = np.linalg.norm(v, axis=-1)
        a, b, _ = _rodrigues_coeffs(theta, self.policy.small_angle)
        K = hat3(v)
        return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)

    def rotation_angle(self, R):
        R = np.asarray(R, dtype=float)
        c = np.clip(0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0), -1.0, 1.0)
        s = np.linalg.norm(0.5 * vee3(R - np.swapaxes(R, -1, -2)), axis=-1)
        return np.arctan2(s, c)

    def log(self, g):
        R = np.asarray(g, dtype=float)
        w = 0.5 * vee3(R - np.swapaxes(R, -1, -2))
        s = np.linalg.norm(w, axis=-1)
        c = np.clip(0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0), -1.0, 1.0)
        theta = np.arctan2(s, c)
        if np.any(theta >= math.pi - self.policy.angle_margin):
            raise OutsideLogDomain("rotation angle too close to pi for the principal logarithm")
        tiny = theta < self.policy.small_angle
        t2 = theta * theta
        factor = np.where(tiny, 1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0,
                          theta / np.where(s > 0, s, 1.0))
        omega = factor[..., None] * w
        # near pi the antisymmetric part carries little axis information
        far = c < -0.9
        if np.any(far):
            Rf = R[far]
            cf = c[far][:, None, None]
            B = 0.5 * (Rf + np.swapaxes(Rf, -1, -2)) - cf * np.eye(3)
            j = np.argmax(np.diagonal(B, axis1=-2, axis2=-1), axis=-1)
            axis = np.take_along_axis(B, j[:, None, None], axis=-1)[..., 0]
            axis /= np.linalg.norm(axis, axis=-1, keepdims=True)
            sign = np.where(np.einsum("...i,...i->...", axis, w[far]) < 0, -1.0, 1.0)
            omega[far] = (sign * theta[far])[:, None] * axis
        return omega

    def adjoint(self, g):
        return np.array(g, dtype=float)

    def validate(self, g):
        R = np.asarray(g, dtype=float)
        if R.shape[R.ndim - 2:] != (3, 3):
            raise InvalidElement(f"so3: wrong shape {R.shape}")
        if not np.all(np.isfinite(R)):
            raise InvalidElement("so3: non-finite entries")
        tol = self.policy.orthogonality_tol
        err = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max()
        if err > tol:
            raise InvalidElement(f"so3: R^T R deviates from I by {err:.2e}")
        d = np.linalg.det(R)
        if np.any(np.abs(d - 1.0) > tol):
            raise InvalidElement("so3: det R != +1")

    def in_log_domain(self, v):
        return np.linalg.norm(v, axis=-1) < math.pi - self.policy.angle_margin


class SE3(LieGroup):
    """Rigid motions as homogeneous 4x4 matrices; (R, v)(Q, w) = (RQ, v + Rw)."""

    def __init__(self, policy=None):
        super().__init__(policy)
        self.dim = 6
        self.shape = (4, 4)
        self.tag = "se3"
        self._so3 = SO3(self.policy)

    @staticmethod
    def from_rt(R, t):
        R = np.asarray(R, dtype=float)
        t = np.asarray(t, dtype=float)
        batch = np.broadcast_shapes(R.shape[:-2], t.shape[:-1])
        out = np.zeros(batch + (4, 4))
        out[..., :3, :3] = R
        out[..., :3, 3] = t
        out[..., 3, 3] = 1.0
        return out

    @staticmethod
    def split(g):
        g = np.asarray(g, dtype=float)
        return g[..., :3, :3], g[..., :3, 3]

    def identity(self):
        return np.eye(4)

    def compose(self, g, h):
        self._check(g, h)
        return np.matmul(g, h)

    def inverse(self, g):
        R, t = self.split(g)
        Rt = np.swapaxes(R, -1, -2)
        return self.from_rt(Rt, -np.einsum("...ij,...j->...i", Rt, t))

    def exp(self, v):
        v = np.asarray(v, dtype=float)
        omega, u = v[..., :3], v[..., 3:]
        theta = np.linalg.norm(omega, axis=-1)
        a, b, c = _rodrigues_coeffs(theta, self.policy.small_angle)
        K = hat3(omega)
        K2 = K @ K
        R = np.eye(3) + a[..., None, None] * K + b[..., None, None] * K2
        V = np.eye(3) + b[..., None, None] * K + c[..., None, None] * K2
        return self.from_rt(R, np.einsum("...ij,...j->...i", V, u))

    def log(self, g):
        R, t = self.split(g)
        omega = self._so3.log(R)
        theta = np.linalg.norm(omega, axis=-1)
        tiny = theta < self.policy.small_angle
        safe = np.where(tiny, 1.0, theta)
        t2 = theta * theta
        half_cot = safe * np.sin(safe) / (2.0 * (1.0 - np.cos(safe)))
        d = np.where(tiny, 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0,
                     (1.0 - half_cot) / safe**2)
        K = hat3(omega)
        Vinv = np.eye(3) - 0.5 * K + d[..., None, None] * (K @ K)
        u = np.einsum("...ij,...j->...i", Vinv, t)
        return np.concatenate([omega, u], axis=-1)

    def adjoint(self, g):
        R, t = self.split(g)
        out = np.zeros(R.shape[:-2] + (6, 6))
        out[..., :3, :3] = R
        out[..., 3:, 3:] = R
        out[..., 3:, :3] = hat3(t) @ R
        return out

    def validate(self, g):
        g = np.asarray(g, dtype=float)
        if g.shape[g.ndim - 2:] != (4, 4):
            raise InvalidElement(f"se3: wrong shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise InvalidElement("se3: non-finite entries")
        if np.abs(g[..., 3, :] - [0.0, 0.0, 0.0, 1.0]).max() > 0.0:
            raise InvalidElement("se3: last row must be (0, 0, 0, 1)")
        self._so3.validate(g[..., :3, :3])

    def in_log_domain(self, v):
        return self._so3.in_log_domain(np.asarray(v)[..., :3])

    def to_payload(self, g):
        R, t = self.split(g)
        return {"R": R.tolist(), "t": t.tolist()}

    def from_payload(self, obj):
        if not isinstance(obj, dict) or set(obj) != {"R", "t"}:
            raise InvalidElement('se3: payload must be an object {"R": 3x3, "t": 3}')
        try:
            R = np.asarray(obj["R"], dtype=float)
            t = np.asarray(obj["t"], dtype=float)
        except (TypeError, ValueError) as exc:
            raise InvalidElement(f"se3: cannot parse payload ({exc})") from None
        if R.shape != (3, 3) or t.shape != (3,):
            raise InvalidElement(f"se3: R must be 3x3 and t length 3, got {R.shape}, {t.shape}")
        g = self.from_rt(R, t)
        self.validate(g)
        return g


class GLPlus(LieGroup):
    """Invertible n x n matrices with positive determinant."""

    def __init__(self, n: int, policy=None):
        super().__init__(policy)
        if n < 1:
            raise ValueError("GLPlus needs n >= 1")
        self.n = n
        self.dim = n * n
        self.shape = (n, n)
        self.tag = f"glplus:{n}"

    def identity(self):
        return np.eye(self.n)

    def compose(self, g, h):
        self._check(g, h)
        return np.matmul(g, h)

    def inverse(self, g):
        return np.linalg.inv(g)

    def hat(self, v):
        v = np.asarray(v, dtype=float)
        return v.reshape(v.shape[:-1] + (self.n, self.n))

    def exp(self, v):
        return matfun.mat_exp(self.hat(v), self.policy)

    def log(self, g):
        L = matfun.mat_log(g, self.policy)
        return L.reshape(L.shape[:-2] + (self.dim,))

    def adjoint(self, g):
        # row-major vec(A M A^-1): entry ((i, j), (k, l)) = A_ik (A^-1)_lj
        A = np.asarray(g, dtype=float)
        Ainv = np.linalg.inv(A)
        Ad = np.einsum("...ik,...lj->...ijkl", A, Ainv)
        return Ad.reshape(A.shape[:-2] + (self.dim, self.dim))

    def validate(self, g):
        g = np.asarray(g, dtype=float)
        if g.shape[g.ndim - 2:] != self.shape:
            raise InvalidElement(f"{self.tag}: wrong shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise InvalidElement(f"{self.tag}: non-finite entries")
        if np.any(np.linalg.det(g) <= 0):
            raise InvalidElement(f"{self.tag}: determinant must be positive")

    def in_log_domain(self, v):
        eig = np.linalg.eigvals(self.hat(v))
        return np.all(np.abs(eig.imag) < math.pi - self.policy.angle_margin, axis=-1)


class Product(LieGroup):
    """Direct product of groups; elements are flat concatenations of factor payloads.

    When all factors are the same group (a power group) operations run as a
    single batched call over a factor axis.
    """

    def __init__(self, factors, policy=None):
        factors = list(factors)
        if not factors:
            raise EmptyProduct("a product group needs at least one factor")
        super().__init__(policy or factors[0].policy)
        self.factors = factors
        self.sizes = [int(np.prod(f.shape)) for f in factors]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)
        dims = [f.dim for f in factors]
        self.dim_offsets = np.concatenate([[0], np.cumsum(dims)]).astype(int)
        self.dim = int(sum(dims))
        self.shape = (int(self.offsets[-1]),)
        self.homogeneous = all(f == factors[0] for f in factors)
        if self.homogeneous:
            self.tag = f"power:{factors[0].tag}:{len(factors)}"
        else:
            self.tag = "product[" + ";".join(f.tag for f in factors) + "]"

    def __len__(self):
        return len(self.factors)

    # layout helpers ------------------------------------------------------
    def stacked(self, g):
        """Power groups only: view ``(..., K * size)`` as ``(..., K, *factor.shape)``."""
        g = np.asarray(g, dtype=float)
        return g.reshape(g.shape[:-1] + (len(self.factors),) + self.factors[0].shape)

    def factor(self, g, i: int):
        """The i-th factor element(s) of ``g``."""
        g = np.asarray(g, dtype=float)
        f = self.factors[i]
        return g[..., self.offsets[i]:self.offsets[i + 1]].reshape(g.shape[:-1] + f.shape)

    def join(self, parts):
        parts = [np.asarray(p, dtype=float) for p in parts]
        flat = [p.reshape(p.shape[:p.ndim - f.ndim] + (-1,)) for p, f in zip(parts, self.factors)]
        batch = np.broadcast_shapes(*(f.shape[:-1] for f in flat))
        return np.concatenate([np.broadcast_to(f, batch + f.shape[-1:]) for f in flat], axis=-1)

    def _map_elements(self, fn, *gs):
        if self.homogeneous:
            stacked = [self.stacked(g) for g in gs]
            out = fn(self.factors[0], *stacked)
            return out.reshape(out.shape[:out.ndim - self.factors[0].ndim - 1] + (-1,))
        return self.join([fn(f, *(self.factor(g, i) for g in gs))
                          for i, f in enumerate(self.factors)])

    def _coords(self, v, i):
        return np.asarray(v, dtype=float)[..., self.dim_offsets[i]:self.dim_offsets[i + 1]]

    # kernels -------------------------------------------------------------
    def identity(self):
        return self.join([f.identity() for f in self.factors])

    def compose(self, g, h):
        self._check(g, h)
        return self._map_elements(lambda f, a, b: f.compose(a, b), g, h)

    def inverse(self, g):
        return self._map_elements(lambda f, a: f.inverse(a), g)

    def log(self, g):
        g = np.asarray(g, dtype=float)
        if self.homogeneous:
            out = self.factors[0].log(self.stacked(g))
            return out.reshape(g.shape[:-1] + (self.dim,))
        return np.concatenate([f.log(self.factor(g, i)) for i, f in enumerate(self.factors)], axis=-1)

    def exp(self, v):
        v = np.asarray(v, dtype=float)
        if self.homogeneous:
            f = self.factors[0]
            out = f.exp(v.reshape(v.shape[:-1] + (len(self.factors), f.dim)))
            return out.reshape(v.shape[:-1] + (-1,))
        return self.join([f.exp(self._coords(v, i)) for i, f in enumerate(self.factors)])

    def adjoint(self, g):
        g = np.asarray(g, dtype=float)
        out = np.zeros(g.shape[:-1] + (self.dim, self.dim))
        for i, f in enumerate(self.factors):
            a, b = self.dim_offsets[i], self.dim_offsets[i + 1]
            out[..., a:b, a:b] = f.adjoint(self.factor(g, i))
        return out

    def validate(self, g):
        g = np.asarray(g, dtype=float)
        if g.shape[g.ndim - 1:] != self.shape:
            raise InvalidElement(f"{self.tag}: wrong shape {g.shape}")
        if self.homogeneous:
            self.factors[0].validate(self.stacked(g))
            return
        for i, f in enumerate(self.factors):
            f.validate(self.factor(g, i))

    def in_log_domain(self, v):
        v = np.asarray(v, dtype=float)
        masks = [f.in_log_domain(self._coords(v, i)) for i, f in enumerate(self.factors)]
        return reduce(np.logical_and, masks)

    def to_payload(self, g):
        return [f.to_payload(self.factor(g, i)) for i, f in enumerate(self.factors)]

    def from_payload(self, obj):
        if not isinstance(obj, (list, tuple)) or len(obj) != len(self.factors):
            raise InvalidElement(f"{self.tag}: payload must be a list of {len(self.factors)} factors")
        return self.join([f.from_payload(p) for f, p in zip(self.factors, obj)])


def product_group(factors) -> Product:
    return Product(factors)


def power(group: LieGroup, m: int) -> Product:
    """``group`` x ... x ``group`` (m copies)."""
    if m < 1:
        raise EmptyProduct("power needs m >= 1")
    return Product([group] * m)


def _split_top(s):
    parts, depth, cur = [], 0, ""
    for ch in s:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == ";" and depth == 0:
            parts.append(cur)
            cur = ""
        else:
            cur += ch
    parts.append(cur)
    return parts


def parse_group(tag: str) -> LieGroup:
    """Build a group from its descriptor tag.

    Accepted forms: ``translation:d``, ``so3``, ``se3``, ``glplus:n``,
    ``power:<tag>:m`` and ``product[<tag>;<tag>;...]``.
    """
    tag = tag.strip()
    try:
        if tag == "so3":
            return SO3()
        if tag == "se3":
            return SE3()
        if tag.startswith("translation:"):
            return Translation(int(tag.split(":", 1)[1]))
        if tag.startswith("glplus:"):
            return GLPlus(int(tag.split(":", 1)[1]))
        if tag.startswith("power:"):
            inner, m = tag[len("power:"):].rsplit(":", 1)
            return power(parse_group(inner), int(m))
        if tag.startswith("product[") and tag.endswith("]"):
            return Product([parse_group(t) for t in _split_top(tag[len("product["):-1])])
    except ValueError as exc:
        if isinstance(exc, EmptyProduct):
            raise
        raise ValueError(f"malformed group descriptor {tag!r}") from None
    raise ValueError(f"unknown group descriptor {tag!r}")
