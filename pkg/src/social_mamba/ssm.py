"""Selective state-space scan and the gated Mamba block built on it.

Shapes used throughout: sequences are ``[..., L, E]`` with any number of leading
batch axes; the state matrix ``A`` is diagonal per channel, stored ``[E, N]``;
the input and output matrices ``B(t)``, ``C(t)`` are shared across channels and
have shape ``[..., L, N]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, constant
from .errors import ShapeError
from . import _scan_kernels as _kernels
from .nn import Linear, Module, param

# |delta * a| below this uses the a -> 0 limit of the ZOH input coefficient.
ZOH_LIMIT = 1e-8

# "numba" (compiled kernel) or "numpy" (vectorized reference route).
SCAN_BACKEND = "numba"


def _phi(z: np.ndarray) -> np.ndarray:
    """expm1(z) / z with its limit 1 at z = 0."""
    small = np.abs(z) < ZOH_LIMIT
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + 0.5 * z, np.expm1(safe) / safe)


def _psi(z: np.ndarray) -> np.ndarray:
    """(z e^z - expm1(z)) / z^2, i.e. d/da of the ZOH input coefficient divided by delta^2."""
    small = np.abs(z) < 1e-4
    safe = np.where(small, 1.0, z)
    exact = (safe * np.exp(safe) - np.expm1(safe)) / (safe * safe)
    return np.where(small, 0.5 + z / 3.0 + z * z / 8.0, exact)


def zoh_discretize(delta: float, a: float, b: float) -> tuple[float, float]:
    """Zero-order-hold discretization of the scalar system ``h' = a h + b x``."""
    if not delta > 0:
        raise ValueError(f"zoh_discretize: delta must be positive, got {delta}")
    z = delta * a
    a_bar = math.exp(z)
    if abs(z) < ZOH_LIMIT:
        b_bar = delta * b
    else:
        b_bar = math.expm1(z) / a * b
    return a_bar, b_bar


def selective_scan(u, delta, A, B, C, D, h0=None, backend: str | None = None) -> tuple[Tensor, np.ndarray]:
    """Run ``h_t = exp(delta_t A) h_{t-1} + zoh(delta_t, A) B_t u_t``, ``y_t = C_t h_t + D u_t``.

    ``u`` and ``delta`` are ``[..., L, E]``; ``B`` and ``C`` are ``[..., L, N]``;
    ``A`` is ``[E, N]`` (already negative); ``D`` is ``[E]``; ``h0`` is
    ``[..., E, N]`` or ``None`` for a zero state.

    Returns the output tensor and the full hidden trajectory ``[..., L, E, N]``
    as a plain array.  The recurrence runs sequentially over ``L``; gradients are
    produced by the matching reverse-time recurrence.  ``backend`` selects the
    compiled kernel (``"numba"``) or the vectorized numpy route (``"numpy"``).
    """
    u, delta, A, B, C, D = (ad.as_tensor(t) for t in (u, delta, A, B, C, D))
    if u.ndim < 2:
        raise ShapeError("selective_scan", u.shape, detail="need at least [L, E]")
    lead, (L, E) = u.shape[:-2], u.shape[-2:]
    if L == 0:
        raise ShapeError("selective_scan", u.shape, detail="empty sequence")
    if A.ndim != 2 or A.shape[0] != E:
        raise ShapeError("selective_scan", u.shape, A.shape)
    N = A.shape[1]
    if delta.shape != u.shape:
        raise ShapeError("selective_scan", u.shape, delta.shape)
    if B.shape != lead + (L, N) or C.shape != lead + (L, N):
        raise ShapeError("selective_scan", B.shape, C.shape, detail=f"expected {list(lead + (L, N))}")
    if D.shape != (E,):
        raise ShapeError("selective_scan", D.shape, (E,))
    inputs = [u, delta, A, B, C, D]
    if h0 is not None:
        h0 = ad.as_tensor(h0)
        if h0.shape != lead + (E, N):
            raise ShapeError("selective_scan", h0.shape, lead + (E, N))
        inputs.append(h0)

    nb = int(np.prod(lead)) if lead else 1
    ud = np.ascontiguousarray(u.data.reshape(nb, L, E))
    dd = np.ascontiguousarray(delta.data.reshape(nb, L, E))
    Bd = np.ascontiguousarray(B.data.reshape(nb, L, N))
    Cd = np.ascontiguousarray(C.data.reshape(nb, L, N))
    Ad, Dd = np.ascontiguousarray(A.data), np.ascontiguousarray(D.data)
    h0d = np.zeros((nb, E, N)) if h0 is None else np.ascontiguousarray(h0.data.reshape(nb, E, N))
    args = (ud, dd, Ad, Bd, Cd, Dd, h0d)
    use_compiled = (backend or SCAN_BACKEND) == "numba"
    if use_compiled:
        y, h, em1 = _kernels.scan_forward(*args)
    else:
        y, h = _scan_forward_numpy(*args)

    def vjp(g):
        g = np.ascontiguousarray(g.reshape(nb, L, E))
        if use_compiled:
            gu, gdelta, gA, gB, gC, gD, gh0 = _kernels.scan_backward(g, *args, h, em1)
        else:
            gu, gdelta, gA, gB, gC, gD, gh0 = _scan_backward_numpy(g, *args, h)
        out = [
            gu.reshape(u.shape),
            gdelta.reshape(delta.shape),
            gA,
            gB.reshape(B.shape),
            gC.reshape(C.shape),
            gD,
        ]
        if h0 is not None:
            out.append(gh0.reshape(h0.shape))
        return tuple(out)

    out = ad._record("selective_scan", y.reshape(u.shape), inputs, vjp)
    return out, h.reshape(lead + (L, E, N))


def _scan_forward_numpy(ud, dd, Ad, Bd, Cd, Dd, h0d):
    nb, L, E = ud.shape
    N = Ad.shape[1]
    z = dd[..., None] * Ad
    dA = np.exp(z)
    coef = dd[..., None] * _phi(z)
    inj = coef * (Bd[:, :, None, :] * ud[..., None])
    h = np.empty((nb, L, E, N))
    prev = h0d
    for t in range(L):
        prev = dA[:, t] * prev + inj[:, t]
        h[:, t] = prev
    y = np.einsum("blen,bln->ble", h, Cd) + ud * Dd
    return y, h


def _scan_backward_numpy(g, ud, dd, Ad, Bd, Cd, Dd, h0d, h):
    L = ud.shape[1]
    z = dd[..., None] * Ad
    dA = np.exp(z)
    coef = dd[..., None] * _phi(z)
    bu = Bd[:, :, None, :] * ud[..., None]
    gD = np.einsum("ble,ble->e", g, ud)
    gu = g * Dd
    gC = np.einsum("ble,blen->bln", g, h)
    direct = g[..., None] * Cd[:, :, None, :]
    gh = np.empty_like(h)
    acc = direct[:, L - 1]
    gh[:, L - 1] = acc
    for t in range(L - 2, -1, -1):
        acc = direct[:, t] + dA[:, t + 1] * acc
        gh[:, t] = acc
    h_prev = np.concatenate([h0d[:, None], h[:, :-1]], axis=1)
    g_z = gh * h_prev * dA
    g_coef = gh * bu
    g_bu = gh * coef
    gB = np.einsum("blen,ble->bln", g_bu, ud)
    gu = gu + np.einsum("blen,bln->ble", g_bu, Bd)
    gdelta = np.einsum("blen,en->ble", g_z, Ad) + np.einsum("blen,blen->ble", g_coef, dA)
    gA = np.einsum("blen,ble->en", g_z, dd) + np.einsum("blen,blen->en", g_coef, dd[..., None] ** 2 * _psi(z))
    gh0 = dA[:, 0] * gh[:, 0]
    return gu, gdelta, gA, gB, gC, gD, gh0


class SsmParams(Module):
    """Learned parameters of one selective SSM over ``d_model`` channels."""

    def __init__(self, d_model: int, d_state: int, rng: np.random.Generator,
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        self.d_model = d_model
        self.d_state = d_state
        a_init = np.geomspace(1.0, float(d_state), d_state) if d_state > 1 else np.ones(1)
        self.log_A = param(np.log(np.tile(a_init, (d_model, 1))))
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=d_model))
        self.delta_bias = param(dt + np.log(-np.expm1(-dt)))  # inverse softplus
        s = 1.0 / math.sqrt(d_model)
        self.W_delta = param(rng.uniform(-s, s, size=(d_model, d_model)) * 0.1)
        self.W_B = param(rng.uniform(-s, s, size=(d_model, d_state)))
        self.W_C = param(rng.uniform(-s, s, size=(d_model, d_state)))
        self.D_skip = param(np.ones(d_model))

    def realized_A(self) -> Tensor:
        return ad.mul(ad.exp(self.log_A), -1.0)


def _project(x: Tensor, w: Tensor) -> Tensor:
    lead = x.shape[:-1]
    y = ad.matmul(ad.reshape(x, (-1, x.shape[-1])), w)
    return ad.reshape(y, lead + (w.shape[1],))


def selective_parameters(x: Tensor, params: SsmParams) -> tuple[Tensor, Tensor, Tensor]:
    """Input-conditioned step size, input matrix and output matrix for every step of ``x``."""
    delta = ad.softplus(ad.add(_project(x, params.W_delta), params.delta_bias))
    return delta, _project(x, params.W_B), _project(x, params.W_C)


def ssm_scan(x_seq: Tensor, params: SsmParams, h0=None) -> tuple[Tensor, np.ndarray]:
    """Selective scan of ``x_seq`` (``[..., L, d_model]``) from state ``h0``."""
    x_seq = ad.as_tensor(x_seq)
    if x_seq.ndim < 2 or x_seq.shape[-2] == 0:
        raise ShapeError("ssm_scan", x_seq.shape, detail="need a non-empty [L, d_model] sequence")
    delta, B, C = selective_parameters(x_seq, params)
    return selective_scan(x_seq, delta, params.realized_A(), B, C, params.D_skip, h0)


@dataclass
class MambaBlockConfig:
    d_model: int = 128
    d_state: int = 16
    conv_kernel: int = 4
    expand: int = 2

    def __post_init__(self):
        for k in ("d_model", "d_state", "conv_kernel", "expand"):
            if getattr(self, k) < 1:
                raise ValueError(f"MambaBlockConfig.{k} must be >= 1")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model


@dataclass
class MixerTrace:
    """Intermediate values of one mixer call, kept for state-level tests."""

    u: np.ndarray  # scan input after the convolution and SiLU
    delta: np.ndarray
    B: np.ndarray
    C: np.ndarray
    h: np.ndarray
    A: np.ndarray


class MambaBlock(Module):
    """in-proj -> causal depthwise conv -> SiLU -> selective scan -> SiLU gate -> out-proj, plus residual."""

    def __init__(self, config: MambaBlockConfig, rng: np.random.Generator):
        self.config = config
        d, E, K = config.d_model, config.d_inner, config.conv_kernel
        self.in_proj = Linear(d, 2 * E, rng, bias=False)
        self.conv_weight = param(rng.uniform(-1.0, 1.0, size=(E, K)) / math.sqrt(K))
        self.conv_bias = param(np.zeros(E))
        self.ssm = SsmParams(E, config.d_state, rng)
        self.out_proj = Linear(E, d, rng, bias=False)

    def mixer(self, x: Tensor, h0=None, keep_trace: bool = False):
        """Everything except the residual add.  Returns ``(out, trace_or_None)``."""
        E = self.config.d_inner
        xz = self.in_proj(x)
        xs = ad.slice_(xz, -1, 0, E)
        gate = ad.slice_(xz, -1, E, 2 * E)
        u = ad.silu(ad.causal_conv(xs, self.conv_weight, self.conv_bias))
        delta, B, C = selective_parameters(u, self.ssm)
        A = self.ssm.realized_A()
        y, h = selective_scan(u, delta, A, B, C, self.ssm.D_skip, h0)
        out = self.out_proj(ad.mul(y, ad.silu(gate)))
        trace = MixerTrace(u.data, delta.data, B.data, C.data, h, A.data) if keep_trace else None
        return out, trace

    def __call__(self, x: Tensor) -> Tensor:
        out, _ = self.mixer(x)
        return ad.add(x, out)

    def ssm_param_count(self) -> int:
        return self.ssm.param_count()


def mamba_block(seq: Tensor, block: MambaBlock) -> Tensor:
    return block(seq)


def mamba_param_count(config: MambaBlockConfig) -> dict[str, int]:
    """Parameter count per weight group, enumerated from the weight shapes."""
    d, E, N, K = config.d_model, config.d_inner, config.d_state, config.conv_kernel
    counts = {
        "in_proj": d * 2 * E,
        "conv": E * K + E,
        "ssm": E * N + E + E * E + 2 * E * N + E,
        "out_proj": E * d,
    }
    counts["total"] = sum(counts.values())
    return counts
