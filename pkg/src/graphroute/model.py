"""Routing representations: database branch f and query branch g.

f runs over the whole graph at once: ``conv_blocks`` graph-convolution
blocks followed by a two-layer ELU feed-forward head. Each block computes

    h  = FC(ELU(A_hat @ X @ W_conv))
    X' = LayerNorm(R(X) + h)

where ``R`` is the identity, or a learned projection on the first block
when the input width differs from the filter width. g is either the
identity or a linear map ``q -> W q``.

Everything is float64 numpy with hand-written reverse-mode gradients.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .data import FormatError

MODEL_MAGIC = b"RTMD"
MODEL_VERSION = 1
LN_EPS = 1e-5


class QueryMode(str, enum.Enum):
    IDENTITY = "identity"
    LINEAR = "linear"


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    out_dim: int
    conv_blocks: int = 3
    conv_filters: int = 256
    ffn_hidden: int = 4096
    query_mode: QueryMode = QueryMode.IDENTITY

    def __post_init__(self):
        object.__setattr__(self, "query_mode", QueryMode(self.query_mode))
        if self.query_mode is QueryMode.IDENTITY and self.out_dim != self.input_dim:
            raise ValueError("identity query branch requires out_dim == input_dim")
        if min(self.input_dim, self.out_dim, self.ffn_hidden) < 1 or self.conv_blocks < 0:
            raise ValueError("invalid model dimensions")

    @classmethod
    def desk(cls, input_dim: int, out_dim: int | None = None, **kw) -> "ModelConfig":
        """Reduced widths (64 filters, 256 hidden) for CPU-scale training."""
        out_dim = input_dim if out_dim is None else out_dim
        mode = kw.pop("query_mode", QueryMode.IDENTITY if out_dim == input_dim else QueryMode.LINEAR)
        kw.setdefault("conv_filters", 64)
        kw.setdefault("ffn_hidden", 256)
        return cls(input_dim, out_dim, query_mode=mode, **kw)


# ---------------------------------------------------------------------------
# elementwise pieces


def elu(x):
    # expm1(x) >= x for x <= 0, so the max picks the right branch everywhere
    out = np.expm1(np.minimum(x, 0.0))
    return np.maximum(x, out, out=out)


def elu_grad_from_output(e):
    """ELU derivative expressed through its output: 1 for x > 0, e + 1 otherwise."""
    return np.minimum(e + 1.0, 1.0)


def layer_norm(y):
    """Row-wise normalization; returns ``(y_hat, inv_std)``."""
    mu = y.mean(axis=1, keepdims=True)
    var = y.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    return (y - mu) * inv, inv


def layer_norm_backward(d_hat, y_hat, inv):
    return inv * (d_hat - d_hat.mean(axis=1, keepdims=True)
                  - y_hat * (d_hat * y_hat).mean(axis=1, keepdims=True))


def normalized_adjacency(undirected) -> sp.csr_matrix:
    """Deg^{-1/2} (A + I) Deg^{-1/2} for an undirected adjacency list."""
    n = len(undirected)
    rows = np.repeat(np.arange(n), [len(a) for a in undirected])
    cols = np.concatenate([np.asarray(a, dtype=np.int64) for a in undirected]) if n else np.zeros(0, np.int64)
    A = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    A = ((A + A.T) > 0).astype(np.float64) + sp.identity(n, format="csr")
    deg = np.asarray(A.sum(axis=1)).ravel()
    s = sp.diags(1.0 / np.sqrt(deg))
    return (s @ A @ s).tocsr()


def conv_block_forward(A_hat, X, w_conv, w_fc, b_fc, gain, bias, proj=None):
    """``LN(R(X) + FC(ELU(A_hat X W)))``; returns the output and the values backward needs."""
    M = A_hat @ X
    Z = M @ w_conv
    E = elu(Z)
    H = E @ w_fc + b_fc
    R = X @ proj if proj is not None else X
    Y_hat, inv = layer_norm(R + H)
    return Y_hat * gain + bias, (X, M, Z, E, Y_hat, inv)


# ---------------------------------------------------------------------------
# model


@dataclass(eq=False)
class RoutingModel:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        c = self.config
        shapes = []
        width = c.input_dim
        if c.conv_blocks and c.input_dim != c.conv_filters:
            shapes.append(("input_proj", (c.input_dim, c.conv_filters)))
        for b in range(c.conv_blocks):
            F = c.conv_filters
            shapes += [
                (f"conv{b}.weight", (width, F)),
                (f"conv{b}.fc.weight", (F, F)),
                (f"conv{b}.fc.bias", (F,)),
                (f"conv{b}.ln.gain", (F,)),
                (f"conv{b}.ln.bias", (F,)),
            ]
            width = F
        shapes += [
            ("ffn.0.weight", (width, c.ffn_hidden)),
            ("ffn.0.bias", (c.ffn_hidden,)),
            ("ffn.1.weight", (c.ffn_hidden, c.out_dim)),
            ("ffn.1.bias", (c.out_dim,)),
        ]
        if c.query_mode is QueryMode.LINEAR:
            shapes.append(("query.weight", (c.out_dim, c.input_dim)))
        return shapes

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "RoutingModel":
        return RoutingModel(self.config, {k: v.copy() for k, v in self.params.items()})

    # -- database branch ----------------------------------------------------

    def forward_f(self, A_hat, X, keep: bool = False):
        """Representations for every vertex; with ``keep`` also the tape for backward."""
        p = self.params
        X = np.asarray(X, dtype=np.float64)
        tape = {"blocks": []}
        h = X
        for b in range(self.config.conv_blocks):
            proj = p["input_proj"] if (b == 0 and "input_proj" in p) else None
            out, saved = conv_block_forward(A_hat, h, p[f"conv{b}.weight"], p[f"conv{b}.fc.weight"],
                                            p[f"conv{b}.fc.bias"], p[f"conv{b}.ln.gain"],
                                            p[f"conv{b}.ln.bias"], proj)
            if keep:
                tape["blocks"].append(saved)
            h = out
        U = h @ p["ffn.0.weight"] + p["ffn.0.bias"]
        E = elu(U)
        out = E @ p["ffn.1.weight"] + p["ffn.1.bias"]
        if keep:
            tape["ffn"] = (h, U, E)
            return out, tape
        return out

    def backward_f(self, A_hat, tape, d_out) -> dict[str, np.ndarray]:
        p = self.params
        g: dict[str, np.ndarray] = {}
        h, U, E = tape["ffn"]
        g["ffn.1.weight"] = E.T @ d_out
        g["ffn.1.bias"] = d_out.sum(axis=0)
        dU = (d_out @ p["ffn.1.weight"].T) * elu_grad_from_output(E)
        g["ffn.0.weight"] = h.T @ dU
        g["ffn.0.bias"] = dU.sum(axis=0)
        dh = dU @ p["ffn.0.weight"].T
        for b in reversed(range(self.config.conv_blocks)):
            h_in, M, Z, E, Y_hat, inv = tape["blocks"][b]
            gain = p[f"conv{b}.ln.gain"]
            g[f"conv{b}.ln.gain"] = (dh * Y_hat).sum(axis=0)
            g[f"conv{b}.ln.bias"] = dh.sum(axis=0)
            dY = layer_norm_backward(dh * gain, Y_hat, inv)
            g[f"conv{b}.fc.weight"] = E.T @ dY
            g[f"conv{b}.fc.bias"] = dY.sum(axis=0)
            dZ = (dY @ p[f"conv{b}.fc.weight"].T) * elu_grad_from_output(E)
            g[f"conv{b}.weight"] = M.T @ dZ
            dM = dZ @ p[f"conv{b}.weight"].T
            dh_new = A_hat.T @ dM
            if b == 0 and "input_proj" in p:
                g["input_proj"] = h_in.T @ dY
                dh_new = dh_new + dY @ p["input_proj"].T
            else:
                dh_new = dh_new + dY
            dh = dh_new
        return g

    # -- query branch -------------------------------------------------------

    def g(self, q):
        q = np.asarray(q, dtype=np.float64)
        if self.config.query_mode is QueryMode.IDENTITY:
            return q
        return q @ self.params["query.weight"].T

    def backward_g(self, Q, d_gq) -> dict[str, np.ndarray]:
        if self.config.query_mode is QueryMode.IDENTITY:
            return {}
        return {"query.weight": np.atleast_2d(d_gq).T @ np.atleast_2d(Q)}

    # -- serialization --------------------------------------------------------

    def to_bytes(self) -> bytes:
        c = self.config
        header = MODEL_MAGIC + struct.pack(
            "<7I", MODEL_VERSION, c.input_dim, c.out_dim, c.conv_blocks, c.conv_filters,
            c.ffn_hidden, 0 if c.query_mode is QueryMode.IDENTITY else 1)
        body = b"".join(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes()
                        for name, _ in self.param_shapes())
        return header + body

    @classmethod
    def from_bytes(cls, raw: bytes) -> "RoutingModel":
        if len(raw) < 32 or raw[:4] != MODEL_MAGIC:
            raise FormatError("not a routing model file")
        version, D, d, blocks, filters, hidden, qmode = struct.unpack_from("<7I", raw, 4)
        if version != MODEL_VERSION:
            raise FormatError(f"unsupported model version {version}")
        if qmode not in (0, 1):
            raise FormatError(f"bad query mode {qmode}")
        cfg = ModelConfig(D, d, blocks, filters, hidden,
                          QueryMode.IDENTITY if qmode == 0 else QueryMode.LINEAR)
        model = cls(cfg)
        pos = 32
        for name, shape in model.param_shapes():
            n = int(np.prod(shape))
            if pos + 8 * n > len(raw):
                raise FormatError("truncated model file")
            model.params[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
            pos += 8 * n
        if pos != len(raw):
            raise FormatError("trailing bytes in model file")
        return model

    def fingerprint(self) -> int:
        return int.from_bytes(hashlib.blake2b(self.to_bytes(), digest_size=8).digest(), "little")


@dataclass
class VertexRepresentations:
    matrix: np.ndarray
    fingerprint: int


def init_model(config: ModelConfig, seed: int = 0) -> RoutingModel:
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    model = RoutingModel(config)
    for name, shape in model.param_shapes():
        if name.endswith(".gain"):
            model.params[name] = np.ones(shape)
        elif len(shape) == 1:
            model.params[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            model.params[name] = rng.uniform(-limit, limit, size=shape)
    return model


def f_forward(model: RoutingModel, A_hat, base) -> VertexRepresentations:
    return VertexRepresentations(model.forward_f(A_hat, base), model.fingerprint())


def g_forward(model: RoutingModel, q) -> np.ndarray:
    return model.g(q)


def backward(model: RoutingModel, A_hat, tape, d_reps, Q=None, d_gq=None) -> dict[str, np.ndarray]:
    """Parameter gradients from output gradients of both branches."""
    grads = model.backward_f(A_hat, tape, d_reps)
    if d_gq is not None and Q is not None:
        grads.update(model.backward_g(Q, d_gq))
    for name in model.params:
        grads.setdefault(name, np.zeros_like(model.params[name]))
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteError(f"non-finite gradient in {name}")
    return grads


def save_model(model: RoutingModel, path) -> None:
    with open(path, "wb") as f:
        f.write(model.to_bytes())


def load_model(path) -> RoutingModel:
    with open(path, "rb") as f:
        return RoutingModel.from_bytes(f.read())


# ---------------------------------------------------------------------------
# optimization


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def one_cycle_lr(step: float, total_steps: int, max_lr: float, warmup: float = 0.3,
                 floor: float = 0.04) -> float:
    """Linear ramp ``floor*max_lr -> max_lr`` over ``warmup`` of the run, then back down."""
    lo = floor * max_lr
    peak = warmup * total_steps
    if step <= peak:
        frac = step / peak if peak > 0 else 1.0
        return lo + (max_lr - lo) * frac
    frac = min((step - peak) / max(total_steps - peak, 1e-12), 1.0)
    return max_lr - (max_lr - lo) * frac
