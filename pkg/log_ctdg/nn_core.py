"""Small numpy kernel with hand-written gradients.

Every forward function returns ``(output, cache)`` and the matching backward
function takes the upstream gradient and that cache. Layer classes keep their
weights in a shared ``ParamStore`` under dotted names and add their
parameter gradients into a ``grads`` dict keyed by the same names.
"""

import logging
from typing import Optional

import numpy as np

from . import json
from .errors import ContractViolation, TrainingDivergedError
from .os_utils import read_npz, write_npz

logger = logging.getLogger(__name__)

DEFAULT_MODEL_DIM = 64
DEFAULT_TIME_DIM = 16
DEFAULT_HEADS = 2

ADAM_DEFAULTS = {"lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}
BCE_EPS = 1e-7


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _accumulate(grads: dict, name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = np.array(value, dtype=np.float64)


def _check_cols(x: np.ndarray, rows: int, what: str) -> None:
    if x.shape[-1] != rows:
        raise ContractViolation(
            f"{what}: input has {x.shape[-1]} columns, weights expect {rows}"
        )


class ParamStore:
    """Named parameters plus Adam moments and the global step counter.

    Buffers are saved with the parameters but never updated by the optimizer.
    """

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise ContractViolation(f"parameter {name!r} already exists")
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        return arr

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        self.buffers[name] = np.array(value, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self):
        return len(self.params)

    def zero_like(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(p) for name, p in self.params.items()}

    def save(self, path: str, meta: Optional[dict] = None) -> None:
        """Write parameters, buffers, optimizer moments and step to ``path``.

        Arrays are kept at float64 so a reload continues bit-for-bit.
        """
        arrays = {"step": np.array(self.step, dtype=np.int64)}
        for name in self.params:
            arrays[f"param/{name}"] = self.params[name]
            arrays[f"adam_m/{name}"] = self.m[name]
            arrays[f"adam_v/{name}"] = self.v[name]
        for name, buf in self.buffers.items():
            arrays[f"buffer/{name}"] = buf
        arrays["meta"] = np.array(json.dumps(meta or {}))
        write_npz(path, arrays)
        logger.debug("saved %d parameters to %s", len(self.params), path)

    def load_state(self, other: "ParamStore") -> None:
        """Copy values, moments, buffers and step from a store of the same layout."""
        if set(other.params) != set(self.params):
            missing = sorted(set(self.params) ^ set(other.params))
            raise ContractViolation(f"parameter sets differ: {missing}")
        for name, value in other.params.items():
            if value.shape != self.params[name].shape:
                raise ContractViolation(
                    f"parameter {name!r} has shape {value.shape}, expected {self.params[name].shape}"
                )
            self.params[name][...] = value
            self.m[name] = other.m[name].copy()
            self.v[name] = other.v[name].copy()
        self.buffers = {name: buf.copy() for name, buf in other.buffers.items()}
        self.step = other.step

    @classmethod
    def load(cls, path: str) -> tuple["ParamStore", dict]:
        arrays = read_npz(path)
        store = cls()
        store.step = int(arrays.pop("step"))
        meta = json.loads(str(arrays.pop("meta")))
        for key in sorted(arrays):
            kind, name = key.split("/", 1)
            if kind == "param":
                store.params[name] = arrays[key].astype(np.float64)
            elif kind == "adam_m":
                store.m[name] = arrays[key].astype(np.float64)
            elif kind == "adam_v":
                store.v[name] = arrays[key].astype(np.float64)
            elif kind == "buffer":
                store.buffers[name] = arrays[key].astype(np.float64)
        return store, meta


def adam_step(
    store: ParamStore,
    grads: dict[str, np.ndarray],
    lr: float = ADAM_DEFAULTS["lr"],
    beta1: float = ADAM_DEFAULTS["beta1"],
    beta2: float = ADAM_DEFAULTS["beta2"],
    eps: float = ADAM_DEFAULTS["eps"],
) -> ParamStore:
    """Apply one bias-corrected Adam update in place.

    Parameters without an entry in ``grads`` are left alone. Nothing is
    modified if any gradient is malformed.

    Raises
    ------
    ContractViolation
        If a gradient names an unknown parameter or has the wrong shape.
    TrainingDivergedError
        If a gradient contains NaN or inf.
    """
    for name, g in grads.items():
        if name not in store.params:
            raise ContractViolation(f"gradient for unknown parameter {name!r}")
        if g.shape != store.params[name].shape:
            raise ContractViolation(
                f"gradient for {name!r} has shape {g.shape}, "
                f"parameter has {store.params[name].shape}"
            )
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(
                f"non-finite gradient for parameter {name!r} at step {store.step + 1}"
            )

    store.step += 1
    t = store.step
    for name, g in grads.items():
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        store.params[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return store


def linear(x: np.ndarray, W: np.ndarray, b: Optional[np.ndarray] = None):
    _check_cols(x, W.shape[0], "linear")
    y = x @ W
    if b is not None:
        if b.shape != (W.shape[1],):
            raise ContractViolation(f"bias shape {b.shape} does not match {W.shape}")
        y = y + b
    return y, (x, W, b is not None)


def linear_backward(dy: np.ndarray, cache):
    """Return ``(dx, dW, db)``; ``db`` is ``None`` for a bias-free layer."""
    x, W, has_bias = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dW = x2.T @ dy2
    db = dy2.sum(axis=0) if has_bias else None
    dx = dy @ W.T
    return dx, dW, db


def gru_cell(x, h_prev, W_x, W_h, b_x, b_h):
    """One GRU step with gates ordered (reset, update, candidate).

    ``r = sigmoid(x W_xr + b_xr + h W_hr + b_hr)``,
    ``z = sigmoid(x W_xz + b_xz + h W_hz + b_hz)``,
    ``n = tanh(x W_xn + b_xn + r * (h W_hn + b_hn))`` and
    ``h' = (1 - z) * n + z * h``.
    """
    hidden = h_prev.shape[-1]
    _check_cols(x, W_x.shape[0], "gru input")
    _check_cols(h_prev, W_h.shape[0], "gru state")
    if W_x.shape[1] != 3 * hidden or W_h.shape != (hidden, 3 * hidden):
        raise ContractViolation(f"GRU weights do not match state dim {hidden}")

    gx = x @ W_x + b_x
    gh = h_prev @ W_h + b_h
    r = sigmoid(gx[:, :hidden] + gh[:, :hidden])
    z = sigmoid(gx[:, hidden : 2 * hidden] + gh[:, hidden : 2 * hidden])
    gh_n = gh[:, 2 * hidden :]
    n = np.tanh(gx[:, 2 * hidden :] + r * gh_n)
    h_new = (1.0 - z) * n + z * h_prev
    return h_new, (x, h_prev, W_x, W_h, r, z, n, gh_n)


def gru_cell_backward(dh_new, cache):
    """Return ``(dx, dh_prev, dW_x, dW_h, db_x, db_h)``."""
    x, h_prev, W_x, W_h, r, z, n, gh_n = cache
    dn = dh_new * (1.0 - z)
    dz = dh_new * (h_prev - n)
    dh_prev = dh_new * z

    da_n = dn * (1.0 - n * n)
    dr = da_n * gh_n
    da_z = dz * z * (1.0 - z)
    da_r = dr * r * (1.0 - r)

    dgx = np.concatenate([da_r, da_z, da_n], axis=1)
    dgh = np.concatenate([da_r, da_z, da_n * r], axis=1)

    dW_x = x.T @ dgx
    dW_h = h_prev.T @ dgh
    db_x = dgx.sum(axis=0)
    db_h = dgh.sum(axis=0)
    dx = dgx @ W_x.T
    dh_prev = dh_prev + dgh @ W_h.T
    return dx, dh_prev, dW_x, dW_h, db_x, db_h


def time_encode(dt, w, b):
    """``cos(dt * w + b)`` for every delta, shape ``(len(dt), len(w))``."""
    dt = np.asarray(dt, dtype=np.float64).reshape(-1)
    arg = dt[:, None] * w[None, :] + b[None, :]
    return np.cos(arg), (dt, w, arg)


def time_encode_backward(dphi, cache):
    """Return ``(ddt, dw, db)``."""
    dt, w, arg = cache
    da = -dphi * np.sin(arg)
    return da @ w, (da * dt[:, None]).sum(axis=0), da.sum(axis=0)


def masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over the last axis restricted to ``mask``; all-masked rows are zero."""
    if scores.shape[-1] == 0:
        return np.zeros_like(scores)
    masked = np.where(mask, scores, -np.inf)
    top = masked.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(np.where(mask, scores - top, 0.0)), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    return e / np.where(denom > 0, denom, 1.0)


def bce_loss(p, y, eps: float = BCE_EPS):
    """Binary cross-entropy of probabilities ``p`` against labels ``y``.

    Returns
    -------
    loss : np.ndarray
        Per-example loss, computed with ``p`` clamped to ``[eps, 1 - eps]``.
    dlogit : np.ndarray
        Gradient of the loss with respect to the logit, ``p - y``.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pc = np.clip(p, eps, 1.0 - eps)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    return loss, p - y


class Linear:
    def __init__(
        self,
        store: ParamStore,
        name: str,
        in_dim: int,
        out_dim: int,
        rng: np.random.Generator,
        bias: bool = True,
        zero_init: bool = False,
    ):
        self.store = store
        self.W = f"{name}.W"
        self.b = f"{name}.b" if bias else None
        init = np.zeros((in_dim, out_dim)) if zero_init else glorot_uniform(rng, in_dim, out_dim)
        store.add(self.W, init)
        if bias:
            store.add(self.b, np.zeros(out_dim))

    def forward(self, x):
        b = self.store[self.b] if self.b else None
        return linear(x, self.store[self.W], b)

    def backward(self, dy, cache, grads):
        dx, dW, db = linear_backward(dy, cache)
        _accumulate(grads, self.W, dW)
        if self.b:
            _accumulate(grads, self.b, db)
        return dx


class GRUCell:
    def __init__(
        self,
        store: ParamStore,
        name: str,
        input_dim: int,
        hidden_dim: int,
        rng: np.random.Generator,
    ):
        self.store = store
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.names = tuple(f"{name}.{p}" for p in ("W_x", "W_h", "b_x", "b_h"))
        store.add(self.names[0], glorot_uniform(rng, input_dim, 3 * hidden_dim))
        store.add(self.names[1], glorot_uniform(rng, hidden_dim, 3 * hidden_dim))
        store.add(self.names[2], np.zeros(3 * hidden_dim))
        store.add(self.names[3], np.zeros(3 * hidden_dim))

    def forward(self, x, h_prev):
        return gru_cell(x, h_prev, *(self.store[n] for n in self.names))

    def backward(self, dh_new, cache, grads):
        dx, dh_prev, *param_grads = gru_cell_backward(dh_new, cache)
        for name, g in zip(self.names, param_grads):
            _accumulate(grads, name, g)
        return dx, dh_prev


class TimeEncoder:
    """``cos(w * dt + b)`` with ``w`` starting on a geometric frequency ladder."""

    def __init__(self, store: ParamStore, name: str, dim: int = DEFAULT_TIME_DIM):
        self.store = store
        self.dim = dim
        self.w = f"{name}.w"
        self.b = f"{name}.b"
        store.add(self.w, 1.0 / 10 ** np.linspace(0, 9, dim))
        store.add(self.b, np.zeros(dim))

    def forward(self, dt):
        return time_encode(dt, self.store[self.w], self.store[self.b])

    def backward(self, dphi, cache, grads):
        ddt, dw, db = time_encode_backward(dphi, cache)
        _accumulate(grads, self.w, dw)
        _accumulate(grads, self.b, db)
        return ddt


class TemporalAttention:
    """One layer of multi-head attention over a node's temporal neighbors.

    The query is ``[s_q || phi(0)]`` and each key/value is
    ``[s_nb || e_nb || phi(dt_nb)]``. Heads are concatenated, joined with
    ``relu(s_q W_prev + b_prev)`` and projected back to ``state_dim``. A
    query without neighbors attends to nothing and keeps only the first
    part of that concatenation.
    """

    def __init__(
        self,
        store: ParamStore,
        name: str,
        state_dim: int,
        edge_dim: int,
        time_encoder: TimeEncoder,
        rng: np.random.Generator,
        heads: int = DEFAULT_HEADS,
        model_dim: Optional[int] = None,
    ):
        model_dim = model_dim or state_dim
        if model_dim % heads:
            raise ContractViolation(f"model dim {model_dim} not divisible by {heads} heads")
        self.store = store
        self.state_dim = state_dim
        self.edge_dim = edge_dim
        self.heads = heads
        self.model_dim = model_dim
        self.head_dim = model_dim // heads
        self.time = time_encoder
        q_dim = state_dim + time_encoder.dim
        kv_dim = state_dim + edge_dim + time_encoder.dim
        self.q = Linear(store, f"{name}.q", q_dim, model_dim, rng, bias=False)
        self.k = Linear(store, f"{name}.k", kv_dim, model_dim, rng, bias=False)
        self.v = Linear(store, f"{name}.v", kv_dim, model_dim, rng, bias=False)
        self.prev = Linear(store, f"{name}.prev", state_dim, state_dim, rng)
        self.out = Linear(store, f"{name}.out", state_dim + model_dim, state_dim, rng)

    def forward(self, s_q, s_nb, e_nb, dt_nb, mask=None):
        n, k = dt_nb.shape
        if mask is None:
            mask = np.ones((n, k), dtype=bool)
        if s_nb.shape[:2] != (n, k) or e_nb.shape[:2] != (n, k):
            raise ContractViolation("neighbor states, features and deltas disagree in shape")
        if np.any(dt_nb[mask] < 0):
            raise ContractViolation("neighbor time deltas must be non-negative")

        phi_q, c_tq = self.time.forward(np.zeros(n))
        q_in = np.concatenate([s_q, phi_q], axis=1)
        phi_nb, c_tk = self.time.forward(dt_nb.reshape(-1))
        kv = np.concatenate([s_nb, e_nb, phi_nb.reshape(n, k, self.time.dim)], axis=2)

        hd, nh = self.head_dim, self.heads
        Q, c_q = self.q.forward(q_in)
        K, c_k = self.k.forward(kv)
        V, c_v = self.v.forward(kv)
        Qh = Q.reshape(n, nh, hd)
        Kh = K.reshape(n, k, nh, hd)
        Vh = V.reshape(n, k, nh, hd)
        scale = 1.0 / np.sqrt(hd)
        scores = np.einsum("nhd,nkhd->nhk", Qh, Kh) * scale
        weights = masked_softmax(scores, mask[:, None, :])
        attended = np.einsum("nhk,nkhd->nhd", weights, Vh).reshape(n, self.model_dim)

        pre, c_prev = self.prev.forward(s_q)
        hidden = np.maximum(pre, 0.0)
        out, c_out = self.out.forward(np.concatenate([hidden, attended], axis=1))

        cache = (n, k, Qh, Kh, Vh, weights, scale, pre, c_tq, c_tk, c_q, c_k, c_v, c_prev, c_out)
        return out, weights, cache

    def backward(self, dout, cache, grads):
        """Return gradients for ``(s_q, s_nb, e_nb)``."""
        n, k, Qh, Kh, Vh, weights, scale, pre, c_tq, c_tk, c_q, c_k, c_v, c_prev, c_out = cache
        d, hd, nh = self.state_dim, self.head_dim, self.heads

        dcat = self.out.backward(dout, c_out, grads)
        dpre = dcat[:, :d] * (pre > 0)
        ds_q = self.prev.backward(dpre, c_prev, grads)
        datt = dcat[:, d:].reshape(n, nh, hd)

        dweights = np.einsum("nhd,nkhd->nhk", datt, Vh)
        dVh = np.einsum("nhk,nhd->nkhd", weights, datt)
        dscores = weights * (dweights - (weights * dweights).sum(axis=-1, keepdims=True))
        dscores *= scale
        dQh = np.einsum("nhk,nkhd->nhd", dscores, Kh)
        dKh = np.einsum("nhk,nhd->nkhd", dscores, Qh)

        dq_in = self.q.backward(dQh.reshape(n, self.model_dim), c_q, grads)
        dkv = self.k.backward(dKh.reshape(n, k, self.model_dim), c_k, grads)
        dkv = dkv + self.v.backward(dVh.reshape(n, k, self.model_dim), c_v, grads)

        ds_q = ds_q + dq_in[:, :d]
        self.time.backward(dq_in[:, d:], c_tq, grads)
        ds_nb = dkv[:, :, :d]
        de_nb = dkv[:, :, d : d + self.edge_dim]
        self.time.backward(
            dkv[:, :, d + self.edge_dim :].reshape(n * k, self.time.dim), c_tk, grads
        )
        return ds_q, ds_nb, de_nb


def temporal_attention(attention: TemporalAttention, s_q, s_nb, e_nb, dt_nb, mask=None):
    """Embed query nodes from their neighbors; returns ``(z, weights, cache)``.

    ``weights`` has shape ``(n, heads, k)``; each row over valid neighbors
    is non-negative and sums to one.
    """
    return attention.forward(s_q, s_nb, e_nb, dt_nb, mask)
