"""Filtering models and the tensor-product grid they are discretized on.

A model is described entirely by expression strings in the variables
``x1 .. xd`` (numpy functions such as ``sin`` and ``exp`` are available), so
it can live in a config file and be written into an offline bundle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = ["Grid", "ModelSpec", "BUILTIN_MODELS", "get_model"]

_NAMESPACE = {
    name: getattr(np, name)
    for name in ("sin", "cos", "tan", "exp", "log", "sqrt", "abs", "tanh", "arctan",
                 "sinh", "cosh", "minimum", "maximum", "sign", "pi")
}


@dataclass(frozen=True)
class Grid:
    """Uniform grid on ``[-a, a]^d`` with ``n`` points per axis.

    QTT operators need ``n = 2**L``; use :meth:`dyadic` for that case.  Other
    point counts are accepted for the dense finite-difference solver only.
    """

    a: float
    d: int
    n: int

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError("domain half-width must be positive")
        if self.d < 1 or self.n < 2:
            raise ValueError("need d >= 1 and at least 2 points per axis")

    @classmethod
    def dyadic(cls, a: float, d: int, L: int) -> "Grid":
        return cls(float(a), int(d), 2 ** int(L))

    @property
    def L(self) -> int:
        if self.n & (self.n - 1):
            raise ValueError(f"{self.n} points per axis is not a power of two")
        return self.n.bit_length() - 1

    @property
    def h(self) -> float:
        return 2.0 * self.a / (self.n - 1)

    @property
    def size(self) -> int:
        return self.n ** self.d

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    def axis(self) -> np.ndarray:
        """Node coordinates ``-a + (l - 1) h``; the end points are exact."""
        x = -self.a + np.arange(self.n) * self.h
        x[-1] = self.a
        return x

    def mesh(self) -> list[np.ndarray]:
        """Sparse broadcastable coordinate arrays, one per axis."""
        x = self.axis()
        out = []
        for k in range(self.d):
            shp = [1] * self.d
            shp[k] = self.n
            out.append(x.reshape(shp))
        return out

    def to_dict(self) -> dict:
        return {"a": self.a, "d": self.d, "n": self.n}


def _compile(expr: str, d: int):
    code = compile(expr, f"<field {expr!r}>", "eval")
    names = set(code.co_names) - set(_NAMESPACE) - {f"x{i + 1}" for i in range(d)}
    if names:
        raise ValueError(f"unknown names {sorted(names)} in expression {expr!r}")

    def field_fn(*xs):
        env = dict(_NAMESPACE)
        env.update({f"x{i + 1}": x for i, x in enumerate(xs)})
        return eval(code, {"__builtins__": {}}, env)

    return field_fn


@dataclass(frozen=True)
class ModelSpec:
    """State model ``dx = f(x) dt + sqrt(q) dv``, ``dy = h(x) dt + dw``.

    Observation noise covariance is the identity.  ``initial`` is the
    (unnormalized) initial density and ``domain`` the default half-width of
    the computational box.
    """

    name: str
    drift: tuple[str, ...]
    observation: tuple[str, ...]
    q: float
    initial: str
    domain: float = 5.0
    x0: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "drift", tuple(self.drift))
        object.__setattr__(self, "observation", tuple(self.observation))
        if not self.drift:
            raise ValueError("model needs at least one drift component")
        if not self.observation:
            raise ValueError("model needs at least one observation component")
        if not (self.q >= 0 and math.isfinite(self.q)):
            raise ValueError("diffusion scale q must be finite and non-negative")
        if self.x0 is not None:
            object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))
            if len(self.x0) != self.d:
                raise ValueError("x0 has the wrong length")
        # compile eagerly so bad expressions fail at construction
        self._fields

    @property
    def d(self) -> int:
        return len(self.drift)

    @property
    def m(self) -> int:
        return len(self.observation)

    def __reduce__(self):
        # compiled fields are closures; rebuild them on the other side
        return (type(self), (self.name, self.drift, self.observation, self.q, self.initial, self.domain, self.x0))

    @property
    def initial_state(self) -> np.ndarray:
        return np.zeros(self.d) if self.x0 is None else np.array(self.x0)

    @cached_property
    def _fields(self):
        return (
            [_compile(e, self.d) for e in self.drift],
            [_compile(e, self.d) for e in self.observation],
            _compile(self.initial, self.d),
        )

    # grid-shaped evaluation -------------------------------------------------
    def _on(self, fn, xs, shape):
        with np.errstate(all="ignore"):
            v = np.asarray(fn(*xs), dtype=np.float64)
        return np.broadcast_to(v, shape).copy() if v.shape != shape else v

    def drift_samples(self, grid: Grid, k: int, shift: float = 0.0) -> np.ndarray:
        """``f_k`` on the grid, optionally with axis ``k`` shifted by ``shift``."""
        xs = grid.mesh()
        if shift:
            xs[k] = xs[k] + shift
        return self._on(self._fields[0][k], xs, grid.shape)

    def observation_samples(self, grid: Grid, i: int) -> np.ndarray:
        return self._on(self._fields[1][i], grid.mesh(), grid.shape)

    def potential_samples(self, grid: Grid) -> np.ndarray:
        """``h^T S^{-1} h`` with ``S = I``."""
        out = np.zeros(grid.shape)
        for i in range(self.m):
            out += self.observation_samples(grid, i) ** 2
        return out

    def initial_samples(self, grid: Grid) -> np.ndarray:
        return self._on(self._fields[2], grid.mesh(), grid.shape)

    # point-cloud evaluation (rows are states) -------------------------------
    def drift_at(self, X: np.ndarray) -> np.ndarray:
        cols = [X[:, k] for k in range(self.d)]
        return np.column_stack([np.broadcast_to(f(*cols), (X.shape[0],)) for f in self._fields[0]])

    def observation_at(self, X: np.ndarray) -> np.ndarray:
        cols = [X[:, k] for k in range(self.d)]
        return np.column_stack([np.broadcast_to(f(*cols), (X.shape[0],)) for f in self._fields[1]])

    def initial_at(self, X: np.ndarray) -> np.ndarray:
        cols = [X[:, k] for k in range(self.d)]
        return np.broadcast_to(self._fields[2](*cols), (X.shape[0],)).astype(float)

    def check_finite(self, grid: Grid) -> None:
        for k in range(self.d):
            if not np.all(np.isfinite(self.drift_samples(grid, k))):
                raise ValueError(f"drift component {k + 1} is not finite on the grid")
        for i in range(self.m):
            if not np.all(np.isfinite(self.observation_samples(grid, i))):
                raise ValueError(f"observation component {i + 1} is not finite on the grid")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "drift": list(self.drift),
            "observation": list(self.observation),
            "q": self.q,
            "initial": self.initial,
            "domain": self.domain,
            "x0": None if self.x0 is None else list(self.x0),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        return cls(
            name=data["name"],
            drift=tuple(data["drift"]),
            observation=tuple(data["observation"]),
            q=float(data["q"]),
            initial=data["initial"],
            domain=float(data.get("domain", 5.0)),
            x0=None if data.get("x0") is None else tuple(data["x0"]),
        )


BUILTIN_MODELS: dict[str, ModelSpec] = {
    "almost_linear": ModelSpec(
        name="almost_linear",
        drift=("-0.3*x1", "-0.3*x2", "-0.3*x3"),
        observation=("x2 + sin(x1)", "x3 + sin(x2)", "x1 + sin(x3)"),
        q=1.5,
        initial="exp(-4*(x1**2 + x2**2 + x3**2))",
        domain=5.0,
    ),
    "cubic_sensor": ModelSpec(
        name="cubic_sensor",
        drift=("-0.6*x1 - 0.1*x2", "-0.5*x2 + 0.1*x3", "-0.6*x3 + 0.1*x1"),
        observation=("x2**3", "x3**3", "x1**3"),
        q=1.5,
        initial="exp(-10*(x1**4 + x2**4 + x3**4))",
        domain=3.0,
    ),
}


def get_model(name: str) -> ModelSpec:
    try:
        return BUILTIN_MODELS[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; built-in models: {sorted(BUILTIN_MODELS)}") from None
