"""Sampled-data systems, zero-order-hold integration and stage costs.

Every system exposes the same small surface used by the optimiser and the
closed loop:

* ``state_dim``, ``control_dim``, ``T``, ``lower``, ``upper``
* ``transition(x, u)`` returning the state grid over one sampling interval,
  shape ``(S + 1, ..., state_dim)``; the last entry is the successor state.

States and controls may carry leading batch dimensions, so one call can roll
out many candidate control sequences at once.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

VectorField = Callable[[np.ndarray, np.ndarray, Any], np.ndarray]


class DivergenceError(ArithmeticError):
    """Raised when an integration step produces a non-finite state."""


def _as_bounds(bounds, control_dim: int) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = bounds
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (control_dim,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (control_dim,)).copy()
    if np.any(lo > hi):
        raise ValueError(f"empty control box: lower {lo} > upper {hi}")
    lo.flags.writeable = False
    hi.flags.writeable = False
    return lo, hi


@dataclass(frozen=True, eq=False)
class SampledSystem:
    """ODE ``x' = vector_field(x, u, params)`` sampled with zero-order hold."""

    state_dim: int
    control_dim: int
    vector_field: VectorField
    T: float
    control_bounds: tuple[Any, Any]
    substeps: int = 10
    params: Any = None
    name: str = "sampled"
    # optional fast path: (system, cost, x0, t0, U) -> total costs of U's rows, or None to decline
    batch_cost: Callable | None = None

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"sampling period must be positive, got {self.T}")
        if self.substeps < 1:
            raise ValueError(f"substeps must be >= 1, got {self.substeps}")
        if self.state_dim < 1 or self.control_dim < 1:
            raise ValueError("state_dim and control_dim must be positive")
        lo, hi = _as_bounds(self.control_bounds, self.control_dim)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def transition(self, x, u) -> np.ndarray:
        return zoh_segment(self, x, u)

    def step(self, x, u) -> np.ndarray:
        return self.transition(x, u)[-1]

    def replace(self, **changes) -> "SampledSystem":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True, eq=False)
class DiscreteSystem:
    """A system given directly in discrete time, ``x+ = mapping(x, u, params)``.

    ``T`` only labels the time axis; no integration takes place.
    """

    state_dim: int
    control_dim: int
    mapping: Callable[[np.ndarray, np.ndarray, Any], np.ndarray]
    T: float
    control_bounds: tuple[Any, Any]
    params: Any = None
    name: str = "discrete"

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"sampling period must be positive, got {self.T}")
        lo, hi = _as_bounds(self.control_bounds, self.control_dim)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def transition(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        nxt = np.asarray(self.mapping(x, np.asarray(u, dtype=float), self.params), dtype=float)
        if not np.all(np.isfinite(nxt)):
            raise DivergenceError(f"{self.name}: non-finite successor state")
        return np.stack([x, nxt])

    def step(self, x, u) -> np.ndarray:
        return self.transition(x, u)[-1]


def zoh_segment(sys: SampledSystem, x, u) -> np.ndarray:
    """Classical RK4 over one sampling period with ``u`` held constant.

    Returns all substep states, shape ``(substeps + 1,) + x.shape``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    f, p = sys.vector_field, sys.params
    h = sys.T / sys.substeps
    out = np.empty((sys.substeps + 1,) + x.shape)
    out[0] = x
    for s in range(sys.substeps):
        k1 = f(x, u, p)
        k2 = f(x + 0.5 * h * k1, u, p)
        k3 = f(x + 0.5 * h * k2, u, p)
        k4 = f(x + h * k3, u, p)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(
                f"{sys.name}: non-finite state in RK4 substep {s + 1}/{sys.substeps}"
            )
        out[s + 1] = x
    return out


def integrate_zoh(sys: SampledSystem, x, u) -> np.ndarray:
    """State after one sampling period under zero-order hold."""
    return zoh_segment(sys, x, u)[-1]


# ---------------------------------------------------------------------------
# Reference signals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReferenceSignal:
    """Piecewise-constant signal given as ``(start, stop, value)`` segments.

    Segments must be contiguous and sorted; ``stop`` of the last one may be
    ``inf``. Each segment is closed on the left and open on the right.
    """

    segments: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        segs = tuple((float(a), float(b), float(v)) for a, b, v in self.segments)
        if not segs:
            raise ValueError("reference needs at least one segment")
        for a, b, _ in segs:
            if not b > a:
                raise ValueError(f"segment [{a}, {b}) is empty")
        for (_, b, _), (a2, _, _) in zip(segs, segs[1:]):
            if a2 != b:
                raise ValueError(f"segments must be contiguous: gap or overlap at t={b} / t={a2}")
        object.__setattr__(self, "segments", segs)
        object.__setattr__(self, "_starts", np.array([s[0] for s in segs]))
        object.__setattr__(self, "_values", np.array([s[2] for s in segs]))

    @property
    def start(self) -> float:
        return self.segments[0][0]

    @property
    def stop(self) -> float:
        return self.segments[-1][1]

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < self.start) or np.any(t >= self.stop):
            raise ValueError(f"time outside reference window [{self.start}, {self.stop})")
        idx = np.searchsorted(self._starts, t, side="right") - 1
        return self._values[idx]

    def jump_times(self) -> list[float]:
        return [a for (a, _, v), (_, _, v0) in zip(self.segments[1:], self.segments) if v != v0]

    @classmethod
    def from_points(cls, times: Sequence[float], values: Sequence[float]):
        """Piecewise-constant from each listed time; the last value is held."""
        if len(times) != len(values) or not len(times):
            raise ValueError("times and values must be nonempty and of equal length")
        stops = list(times[1:]) + [math.inf]
        return cls(tuple(zip(times, stops, values)))

    @classmethod
    def from_file(cls, path) -> "ReferenceSignal":
        """Read a two-column ``time value`` text file (``#`` comments allowed)."""
        data = np.loadtxt(path, comments="#", ndmin=2)
        if data.shape[1] != 2:
            raise ValueError(f"{path}: expected two columns (time, value), got {data.shape[1]}")
        return cls.from_points(list(data[:, 0]), list(data[:, 1]))

    @classmethod
    def parse(cls, text: str) -> "ReferenceSignal":
        """Parse ``"start:stop:value, ..."``; ``inf`` is accepted as a stop."""
        segs = []
        for item in text.split(","):
            item = item.strip()
            if not item:
                continue
            parts = item.split(":")
            if len(parts) != 3:
                raise ValueError(f"bad reference segment {item!r}, expected start:stop:value")
            segs.append(tuple(float(p) for p in parts))
        return cls(tuple(segs))


def zeta_reference() -> ReferenceSignal:
    """10 on [0, 5) and [9, 10), 0 on [5, 9) and from 10 on.

    The last value is held beyond t = 15 so that prediction windows running
    past the end of the experiment stay defined.
    """
    return ReferenceSignal(((0.0, 5.0, 10.0), (5.0, 9.0, 0.0), (9.0, 10.0, 10.0), (10.0, math.inf, 0.0)))


# ---------------------------------------------------------------------------
# Stage costs
# ---------------------------------------------------------------------------


def _interval_times(n_nodes: int, t0: float, t1: float) -> np.ndarray:
    return t0 + (t1 - t0) * np.arange(n_nodes) / (n_nodes - 1)


def tracking_stage_cost(segment, ref: ReferenceSignal, t0: float, t1: float, component: int = 4):
    """Trapezoid quadrature of ``|x[component](t) - ref(t)|`` over ``[t0, t1]``.

    ``segment`` holds the states on a uniform grid over the interval, shape
    ``(S + 1, ..., n)``. The reference is read as one-sided limits inside the
    interval, so a jump exactly on a sampling instant belongs to the later
    interval.
    """
    segment = np.asarray(segment, dtype=float)
    if segment.ndim < 2 or segment.shape[0] < 2:
        raise ValueError("segment needs at least two sample points")
    times = _interval_times(segment.shape[0], t0, t1)
    nudge = 1e-9 * (t1 - t0)
    r = ref(np.clip(times, t0 + nudge, t1 - nudge))
    r = r.reshape((-1,) + (1,) * (segment.ndim - 2))
    err = np.abs(segment[..., component] - r)
    h = (t1 - t0) / (segment.shape[0] - 1)
    return h * (0.5 * err[0] + err[1:-1].sum(axis=0) + 0.5 * err[-1])


@dataclass(frozen=True, eq=False)
class TrackingCost:
    """Integral of the absolute tracking error of one state component."""

    reference: ReferenceSignal
    component: int = 4

    def __call__(self, segment, u, t0, t1):
        return tracking_stage_cost(segment, self.reference, t0, t1, self.component)


@dataclass(frozen=True, eq=False)
class QuadraticCost:
    """``l(x, u) = x'Qx + u'Ru`` evaluated at the start of the interval."""

    Q: Any
    R: Any

    def __post_init__(self):
        object.__setattr__(self, "Q", np.atleast_2d(np.asarray(self.Q, dtype=float)))
        object.__setattr__(self, "R", np.atleast_2d(np.asarray(self.R, dtype=float)))

    def __call__(self, segment, u, t0, t1):
        x = np.asarray(segment, dtype=float)[0]
        u = np.asarray(u, dtype=float)
        return np.einsum("...i,ij,...j->...", x, self.Q, x) + np.einsum("...i,ij,...j->...", u, self.R, u)


# ---------------------------------------------------------------------------
# Arm/rotor/platform model
# ---------------------------------------------------------------------------

ARP_FIELDS = ("M", "m", "r", "k1", "b1", "a1", "a2", "a3", "a4", "a5", "a6", "p1", "p2", "J")


@dataclass(frozen=True)
class ArpParameters:
    M: float
    m: float
    r: float
    k1: float
    b1: float
    a1: float
    a2: float
    a3: float
    a4: float
    a5: float
    a6: float
    p1: float
    p2: float
    J: float

    def __post_init__(self):
        if self.M == 0 or self.J == 0:
            raise ValueError("M and J must be nonzero")
        object.__setattr__(self, "_affine", _arp_affine_part(self))

    @classmethod
    def from_mapping(cls, values: dict) -> "ArpParameters":
        missing = [k for k in ARP_FIELDS if k not in values]
        extra = [k for k in values if k not in ARP_FIELDS]
        if missing or extra:
            raise ValueError(f"ARP parameters: missing {missing}, unknown {extra}")
        return cls(**{k: float(values[k]) for k in ARP_FIELDS})

    @classmethod
    def from_file(cls, path=None) -> "ArpParameters":
        """Read ``name = value`` lines; defaults to the bundled illustrative set."""
        if path is None:
            text = resources.files("horizon_nmpc").joinpath("data/arp_illustrative.cfg").read_text()
        else:
            text = Path(path).read_text()
        values = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            values[key.strip()] = float(val)
        return cls.from_mapping(values)


def _arp_affine_part(p: ArpParameters):
    """Split the ARP equations into ``A x + c + x6 * (rotation terms) + b u``."""
    M = p.M
    A = np.zeros((8, 8))
    A[0, 1] = 1.0
    A[1, 0], A[1, 1], A[1, 5] = -p.k1 / M, -p.b1 / M, -p.m * p.r * p.b1 / M**2
    A[2, 3] = 1.0
    A[3, 2], A[3, 3] = -p.k1 / M, -p.b1 / M
    A[4, 5] = 1.0
    A[5, 4], A[5, 5], A[5, 6], A[5, 7], A[5, 0], A[5, 1] = -p.a1, -p.a2, p.a1, p.a3, -p.p1, -p.p2
    A[6, 7] = 1.0
    A[7, 4], A[7, 5], A[7, 6], A[7, 7] = p.a4, p.a5, -p.a4, -(p.a5 + p.a6)
    c = np.zeros(8)
    c[3] = p.m * p.r * p.k1 / M**2
    b = np.zeros(8)
    b[7] = 1.0 / p.J
    AT = np.ascontiguousarray(A.T)
    for arr in (AT, c, b):
        arr.flags.writeable = False
    return AT, c, b


# x6 multiplies (x3, x4, -x1, -x2) in the first four equations
_ROT_SRC = np.array([2, 3, 0, 1])
_ROT_SIGN = np.array([1.0, 1.0, -1.0, -1.0])


def arp_vector_field(x, u, p: ArpParameters) -> np.ndarray:
    """Right-hand side of the eight arm/rotor/platform equations.

    ``x`` has shape ``(..., 8)`` and ``u`` shape ``(..., 1)`` or scalar.
    Evaluated as an affine part plus the ``x6``-bilinear rotation terms.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if u.ndim == 0:
        u = u[None]
    AT, c, b = p._affine
    out = x @ AT + c + u * b
    out[..., :4] += x[..., 5:6] * (x[..., _ROT_SRC] * _ROT_SIGN)
    return out


def reference_on_grid(ref: ReferenceSignal, t0: float, T: float, N: int, substeps: int) -> np.ndarray:
    """Reference values on the substep grid of ``N`` consecutive intervals, shape ``(N, substeps + 1)``.

    Uses the same one-sided reading as ``tracking_stage_cost``.
    """
    out = np.empty((N, substeps + 1))
    for k in range(N):
        a, b = t0 + k * T, t0 + (k + 1) * T
        nudge = 1e-9 * (b - a)
        out[k] = ref(np.clip(_interval_times(substeps + 1, a, b), a + nudge, b - nudge))
    return out


def _arp_batch_cost(sys: SampledSystem, cost, x0, t0: float, U) -> np.ndarray | None:
    if not isinstance(cost, TrackingCost):
        return None
    from ._kernels import arp_tracking_costs

    U = np.ascontiguousarray(U, dtype=float)
    B, N = U.shape[0], U.shape[1]
    ref = reference_on_grid(cost.reference, t0, sys.T, N, sys.substeps)
    AT, c, b = sys.params._affine
    J = arp_tracking_costs(np.asarray(x0, dtype=float), U.reshape(B, N), float(sys.T), sys.substeps, AT, c, b, ref, cost.component)
    if not np.all(np.isfinite(J)):
        raise DivergenceError(f"{sys.name}: non-finite state in batch rollout")
    return J


# ---------------------------------------------------------------------------
# Bundled systems
# ---------------------------------------------------------------------------


def _scalar_map(x, u, params):
    a, b = params
    return a * x + b * u


def scalar_linear(a: float = 1.0, b: float = 1.0, rho: float = 0.0, u_max: float = 1.0, T: float = 1.0):
    """``x+ = a x + b u`` with ``l = x^2 + rho u^2`` and ``|u| <= u_max``."""
    sys = DiscreteSystem(1, 1, _scalar_map, T, (-u_max, u_max), params=(float(a), float(b)), name="scalar_linear")
    return sys, QuadraticCost([[1.0]], [[rho]])


def _double_integrator_field(x, u, params):
    return np.stack([x[..., 1], u[..., 0]], axis=-1)


def double_integrator(
    T: float = 0.2,
    substeps: int = 4,
    u_max: float = 1.0,
    q_pos: float = 1.0,
    q_vel: float = 0.1,
    rho: float = 0.01,
):
    """Point mass ``p'' = u`` under zero-order hold with a quadratic cost."""
    sys = SampledSystem(2, 1, _double_integrator_field, T, (-u_max, u_max), substeps=substeps, name="double_integrator")
    return sys, QuadraticCost(np.diag([q_pos, q_vel]), [[rho]])


def arp_system(
    params: ArpParameters | None = None,
    T: float = 0.2,
    substeps: int = 10,
    u_max: float = 10.0,
    reference: ReferenceSignal | None = None,
):
    """ARP model tracking ``reference`` with its fifth state (arm angle)."""
    params = params or ArpParameters.from_file()
    sys = SampledSystem(
        8, 1, arp_vector_field, T, (-u_max, u_max), substeps=substeps, params=params, name="arp", batch_cost=_arp_batch_cost
    )
    return sys, TrackingCost(reference or zeta_reference(), component=4)
