"""Closed-form evolution of the dynamic latent component between updates.

Three kinds of inter-observation dynamics are supported:

* ``static``      - the component stays at its jump value.
* ``exponential`` - elementwise decay exp(-dt * w) toward zero.
* ``periodic``    - dimension pairs spiral: a shared decay exp(-dt * w_a)
                    combined with a rotation by angle w_b * dt, so the
                    positive parameter vector packs the decay rates for all
                    pairs first and the rotation frequencies second.

The evolution is differentiable with respect to both the jump value and the
parameters; it is implemented as one fused tape operation with an analytic
backward pass. ``ode_reference`` integrates the equivalent linear ODE with
RK4 and exists purely as an independent numerical check.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, add, make_op

KINDS = ("static", "exponential", "periodic")


class DynamicsError(ValueError):
    pass


def _check_kind(kind: str):
    if kind not in KINDS:
        raise DynamicsError(f"unknown dynamics kind {kind!r}; expected one of {KINDS}")


def check_latent_dim(kind: str, d_h: int):
    _check_kind(kind)
    if kind == "periodic" and d_h % 2 != 0:
        raise DynamicsError(f"periodic dynamics pair up dimensions; latent size {d_h} is odd")


def _as_delta_col(delta_t, rows_2d: bool):
    delta = np.asarray(delta_t, dtype=np.float64)
    if np.any(delta < 0):
        raise DynamicsError("elapsed time must be non-negative")
    if rows_2d and delta.ndim == 1:
        return delta[:, None]
    if delta.ndim != 0:
        raise DynamicsError(f"elapsed time shape {delta.shape} does not fit the state shape")
    return float(delta)


def evolve(kind: str, params, c, delta_t):
    """Evolve the dynamic component ``c`` for ``delta_t`` time units.

    ``c`` is a vector (d_h,) or row matrix (rows, d_h); ``params`` must have
    the same shape (ignored for ``static``). ``delta_t`` is a scalar, or one
    entry per row for matrix input. Entries of ``params`` must be positive.
    """
    _check_kind(kind)
    c = c if isinstance(c, Tensor) else Tensor(c)
    if kind == "static":
        _as_delta_col(delta_t, c.values.ndim == 2)
        return c
    w = params if isinstance(params, Tensor) else Tensor(params)
    if w.values.shape != c.values.shape:
        raise DynamicsError(f"params shape {w.values.shape} != state shape {c.values.shape}")
    if np.any(w.values <= 0):
        raise DynamicsError("dynamics parameters must be strictly positive")
    delta = _as_delta_col(delta_t, c.values.ndim == 2)
    cv, wv = c.values, w.values

    if kind == "exponential":
        decay = np.exp(-delta * wv)
        out = decay * cv

        def backward_fn(g):
            return g * decay, -delta * decay * cv * g

        return make_op(out, "evolve-exponential", (c, w), backward_fn)

    # periodic: pairs (0,1), (2,3), ... share one decay rate and one frequency
    d_h = cv.shape[-1]
    check_latent_dim(kind, d_h)
    half = d_h // 2
    wa = wv[..., :half]
    wb = wv[..., half:]
    decay = np.exp(-delta * wa)
    ang = delta * wb
    ca, sa = np.cos(ang), np.sin(ang)
    ce, co = cv[..., 0::2], cv[..., 1::2]
    rot_e = ca * ce - sa * co
    rot_o = sa * ce + ca * co
    out = np.empty_like(cv)
    out[..., 0::2] = decay * rot_e
    out[..., 1::2] = decay * rot_o

    def backward_fn(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gde, gdo = ge * decay, go * decay
        d_c = np.empty_like(cv)
        d_c[..., 0::2] = ca * gde + sa * gdo
        d_c[..., 1::2] = -sa * gde + ca * gdo
        d_w = np.empty_like(wv)
        d_w[..., :half] = -delta * decay * (ge * rot_e + go * rot_o)
        d_w[..., half:] = delta * (gdo * rot_e - gde * rot_o)
        return d_c, d_w

    return make_op(out, "evolve-periodic", (c, w), backward_fn)


def full_state(h_bar, kind: str, params, c, delta_t):
    """Latent state at elapsed time ``delta_t``: decay target plus the
    evolved dynamic component."""
    h_bar = h_bar if isinstance(h_bar, Tensor) else Tensor(h_bar)
    return add(h_bar, evolve(kind, params, c, delta_t))


# ---------------------------------------------------------------------------
# numerical oracle


def exponential_matrix(w) -> np.ndarray:
    """ODE coefficient matrix equivalent to exponential decay with rates w."""
    return -np.diag(np.asarray(w, dtype=np.float64))


def periodic_matrix(w) -> np.ndarray:
    """Block matrix of 2x2 spiral blocks [[a, -b], [b, a]] per dimension pair,
    where a = -w[k] and b = w[half + k]."""
    w = np.asarray(w, dtype=np.float64)
    d_h = len(w)
    if d_h % 2 != 0:
        raise DynamicsError("periodic parameter vector must have even length")
    half = d_h // 2
    a = -w[:half]
    b = w[half:]
    mat = np.zeros((d_h, d_h))
    for k in range(half):
        i = 2 * k
        mat[i, i] = a[k]
        mat[i, i + 1] = -b[k]
        mat[i + 1, i] = b[k]
        mat[i + 1, i + 1] = a[k]
    return mat


def ode_reference(a_matrix, c, delta_t: float, steps: int = 1000) -> np.ndarray:
    """RK4 integration of dh = A h dt from h(0) = c over delta_t."""
    a = np.asarray(a_matrix, dtype=np.float64)
    h = np.asarray(c, dtype=np.float64).copy()
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] != h.shape[-1]:
        raise DynamicsError(f"matrix shape {a.shape} does not fit state shape {h.shape}")
    if steps < 1:
        raise DynamicsError("steps must be >= 1")
    dt = float(delta_t) / steps
    for _ in range(steps):
        k1 = a @ h
        k2 = a @ (h + 0.5 * dt * k1)
        k3 = a @ (h + 0.5 * dt * k2)
        k4 = a @ (h + dt * k3)
        h = h + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return h
