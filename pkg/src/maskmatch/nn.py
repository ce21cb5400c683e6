from __future__ import annotations

import hashlib
import math
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .tensor import Tensor, concat, relu, softmax, sqrt
from .utils import CheckpointError, ConfigError, DimensionError


class ParamStore:
    """Named parameter tensors with hierarchical dotted names.

    Iteration is lexicographic by name. A frozen prefix turns off
    ``requires_grad`` for every tensor under it, so the tape never records
    gradients for that subtree and the optimizer never sees it.
    """

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._frozen: set[str] = set()

    def register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigError(name, "duplicate parameter name")
        t = Tensor(data, requires_grad=not self.is_frozen(name), name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self, prefix: Optional[str] = None) -> List[str]:
        return sorted(n for n in self._params if prefix is None or _under(n, prefix))

    def parameters(self, prefix: Optional[str] = None) -> List[Tuple[str, Tensor]]:
        return [(n, self._params[n]) for n in self.names(prefix)]

    def __iter__(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.parameters())

    def is_frozen(self, name: str) -> bool:
        return any(_under(name, p) for p in self._frozen)

    def freeze(self, prefix: str) -> None:
        self._frozen.add(prefix)
        for _, t in self.parameters(prefix):
            t.requires_grad = False
            t.grad = None

    def trainable(self) -> List[Tuple[str, Tensor]]:
        return [(n, t) for n, t in self.parameters() if not self.is_frozen(n)]

    def zero_grad(self) -> None:
        for _, t in self.trainable():
            t.zero_grad()

    def state_dict(self, prefix: Optional[str] = None) -> Dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.parameters(prefix)}

    def load_state_dict(self, state: Mapping[str, np.ndarray], prefix: Optional[str] = None) -> None:
        for name in self.names(prefix):
            if name not in state:
                raise CheckpointError(f"missing parameter in state: {name}")
            arr = np.asarray(state[name], dtype=np.float64)
            t = self._params[name]
            if arr.shape != t.shape:
                raise DimensionError(f"{name}: stored shape {arr.shape} != model shape {t.shape}")
            t.data[...] = arr

    def fingerprint(self, prefix: Optional[str] = None) -> str:
        h = hashlib.sha256()
        for name, t in self.parameters(prefix):
            h.update(name.encode("utf-8"))
            h.update(repr(t.shape).encode("ascii"))
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()


def _under(name: str, prefix: str) -> bool:
    return name == prefix or name.startswith(prefix + ".")


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear:
    """y = x @ W + b, with W stored as [din, dout]."""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        din: int,
        dout: int,
        rng: np.random.Generator,
        bias: bool = True,
        zero: bool = False,
    ):
        self.din, self.dout = din, dout
        w = np.zeros((din, dout)) if zero else xavier_uniform(rng, din, dout)
        self.weight = store.register(f"{name}.weight", w)
        self.bias = store.register(f"{name}.bias", np.zeros(dout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.din:
            raise DimensionError(f"linear: trailing extent {x.shape[-1]} != {self.din}")
        lead = x.shape[:-1]
        flat = x if x.ndim == 2 else x.reshape(-1, self.din)
        y = flat @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y if x.ndim == 2 else y.reshape(*lead, self.dout)


class MLP:
    """Linear layers with ReLU between them; ``dims`` lists every width, input first."""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        dims: Sequence[int],
        rng: np.random.Generator,
        zero_last: bool = False,
    ):
        if len(dims) < 2:
            raise ConfigError(name, f"an MLP needs at least two widths, got {list(dims)}")
        last = len(dims) - 2
        self.layers = [
            Linear(store, f"{name}.{i}", dims[i], dims[i + 1], rng, zero=(zero_last and i == last))
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x


class LayerNorm:
    def __init__(self, store: Optional[ParamStore], name: str, d: int, eps: float = 1e-5, affine: bool = True):
        self.eps = eps
        self.affine = affine and store is not None
        if self.affine:
            self.gamma = store.register(f"{name}.gamma", np.ones(d))
            self.beta = store.register(f"{name}.beta", np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centred = x - mu
        var = (centred * centred).mean(axis=-1, keepdims=True)
        y = centred / sqrt(var + self.eps)
        if self.affine:
            y = y * self.gamma + self.beta
        return y


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * Tensor(keep)


def sine_positions(h: int, w: int, d: int, temperature: float = 10000.0) -> np.ndarray:
    """2-D sine/cosine encoding for h*w row-major positions, half the channels per axis."""
    if d % 4:
        raise ConfigError("d_model", f"sine positional encoding needs d divisible by 4, got {d}")
    quarter = d // 4
    freq = temperature ** (np.arange(quarter) / quarter)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    parts = []
    for coord in (ys.reshape(-1), xs.reshape(-1)):
        arg = coord[:, None] / freq[None, :]
        parts.extend([np.sin(arg), np.cos(arg)])
    return np.concatenate(parts, axis=1)


class MultiHeadAttention:
    """softmax(q k^T / sqrt(d_k)) v per head, with q/k/v/output projections.

    With ``projections=False`` the block has no parameters at all: inputs are
    split into heads as-is and the head outputs are concatenated.
    """

    def __init__(
        self,
        store: Optional[ParamStore],
        name: str,
        d_model: int,
        heads: int,
        rng: Optional[np.random.Generator],
        zero_out: bool = False,
        projections: bool = True,
    ):
        if heads < 1 or d_model % heads:
            raise ConfigError("heads", f"d_model={d_model} is not divisible by heads={heads}")
        self.d_model, self.heads = d_model, heads
        self.d_k = d_model // heads
        self.projections = projections and store is not None
        if self.projections:
            self.q = Linear(store, f"{name}.q", d_model, d_model, rng)
            self.k = Linear(store, f"{name}.k", d_model, d_model, rng)
            self.v = Linear(store, f"{name}.v", d_model, d_model, rng)
            self.out = Linear(store, f"{name}.out", d_model, d_model, rng, zero=zero_out)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        for label, t in (("q", q), ("k", k), ("v", v)):
            if t.ndim != 2 or t.shape[1] != self.d_model:
                raise DimensionError(f"mhatten: {label} must be [L x {self.d_model}], got {t.shape}")
        if k.shape[0] < 1 or k.shape[0] != v.shape[0]:
            raise DimensionError(f"mhatten: need Lk >= 1 and matching k/v rows, got {k.shape} / {v.shape}")
        if self.projections:
            q, k, v = self.q(q), self.k(k), self.v(v)
        inv = 1.0 / math.sqrt(self.d_k)
        outs = []
        for h in range(self.heads):
            cols = slice(h * self.d_k, (h + 1) * self.d_k)
            qh, kh, vh = q[:, cols], k[:, cols], v[:, cols]
            w = softmax((qh @ kh.T) * inv, axis=-1)
            outs.append(w @ vh)
        y = outs[0] if self.heads == 1 else concat(outs, axis=1)
        return self.out(y) if self.projections else y


class DecoderLayer:
    """Pre-norm transformer decoder layer: self-attn -> cross-attn -> FFN, each residual."""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        d_model: int,
        heads: int,
        d_ffn: int,
        rng: np.random.Generator,
        self_attn: bool = True,
        dropout: float = 0.0,
        zero_out: bool = False,
    ):
        self.dropout = dropout
        self.has_self_attn = self_attn
        if self_attn:
            self.norm_self = LayerNorm(store, f"{name}.norm_self", d_model)
            self.self_attn = MultiHeadAttention(store, f"{name}.self_attn", d_model, heads, rng, zero_out=zero_out)
        self.norm_cross = LayerNorm(store, f"{name}.norm_cross", d_model)
        self.norm_memory = LayerNorm(store, f"{name}.norm_memory", d_model)
        self.cross_attn = MultiHeadAttention(store, f"{name}.cross_attn", d_model, heads, rng, zero_out=zero_out)
        self.norm_ffn = LayerNorm(store, f"{name}.norm_ffn", d_model)
        self.ffn = MLP(store, f"{name}.ffn", [d_model, d_ffn, d_model], rng, zero_last=zero_out)

    def __call__(
        self,
        queries: Tensor,
        memory: Tensor,
        memory_pos: Optional[Tensor] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        x = queries
        if self.has_self_attn:
            h = self.norm_self(x)
            x = x + dropout(self.self_attn(h, h, h), self.dropout, rng)
        m = self.norm_memory(memory)
        keys = m if memory_pos is None else m + memory_pos
        x = x + dropout(self.cross_attn(self.norm_cross(x), keys, m), self.dropout, rng)
        x = x + dropout(self.ffn(self.norm_ffn(x)), self.dropout, rng)
        return x
