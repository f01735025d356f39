"""Descriptor-to-scene-coordinate regressor.

A stack of residual multi-head self-attention layers over the descriptors of
one image, followed by a shared row-wise MLP producing ``(x, y, z, p)``.
The raw channel ``p`` maps to a reliability in (0, 1] via
``1 / (1 + |beta * p|)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .exceptions import BadConfig, DimensionMismatch
from .frames import SceneCoordinateSet

MASK_FILL = -1e9


@dataclass(frozen=True)
class Architecture:
    descriptor_dim: int
    num_layers: int = 5
    num_heads: int = 4
    head_widths: tuple = (512, 1024, 1024, 512)
    beta: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))
        if self.descriptor_dim < 1 or self.num_layers < 0 or self.num_heads < 1:
            raise BadConfig(f"invalid architecture {self}")
        if self.descriptor_dim % self.num_heads:
            raise BadConfig(
                f"descriptor_dim={self.descriptor_dim} not divisible by num_heads={self.num_heads}")
        if self.beta <= 0:
            raise BadConfig("beta must be positive")

    @property
    def head_dim(self):
        return self.descriptor_dim // self.num_heads

    def tensor_shapes(self):
        """Ordered ``name -> shape`` for every learnable tensor."""
        D = self.descriptor_dim
        shapes = {}
        for l in range(self.num_layers):
            p = f"attn{l}."
            for proj in ("q", "k", "v", "o"):
                shapes[p + "w" + proj] = (D, D)
                shapes[p + "b" + proj] = (D,)
            shapes[p + "mlp0.w"] = (2 * D, 2 * D)
            shapes[p + "mlp0.b"] = (2 * D,)
            shapes[p + "mlp1.w"] = (2 * D, D)
        widths = (D,) + self.head_widths + (4,)
        for i in range(len(widths) - 1):
            shapes[f"head{i}.w"] = (widths[i], widths[i + 1])
            shapes[f"head{i}.b"] = (widths[i + 1],)
        return shapes


@dataclass
class ModelParams:
    arch: Architecture
    tensors: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, arch, rng, dtype=None):
        """Fan-in uniform init, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``; biases zero."""
        tensors = {}
        for name, shape in arch.tensor_shapes().items():
            if len(shape) == 1:
                value = np.zeros(shape)
            else:
                bound = 1.0 / math.sqrt(shape[0])
                value = rng.uniform(-bound, bound, size=shape)
            tensors[name] = dc.parameter(value, name=name, dtype=dtype)
        return cls(arch, tensors)

    def copy(self):
        return ModelParams(self.arch, {k: dc.parameter(t.value.copy(), name=k, dtype=t.dtype)
                                       for k, t in self.tensors.items()})

    def astype(self, dtype):
        return ModelParams(self.arch, {k: dc.parameter(t.value, name=k, dtype=dtype)
                                       for k, t in self.tensors.items()})

    def __getitem__(self, name):
        return self.tensors[name]

    def parameters(self):
        return list(self.tensors.values())

    def num_parameters(self):
        return int(sum(t.value.size for t in self.tensors.values()))


def reliability(raw_p, beta=100.0):
    """``1 / (1 + |beta * p|)``, elementwise."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    return 1.0 / (1.0 + np.abs(beta * np.asarray(raw_p)))


def _linear(x, params, prefix, bias=True):
    out = dc.matmul(x, params[prefix + "w"])
    return dc.add(out, params[prefix + "b"]) if bias else out


def attention_layer(x, params, layer, key_bias=None, attention_out=None):
    """Residual self-attention update of ``x`` with shape (N, K, D).

    ``key_bias`` (N, 1, 1, K) masks padded keys.  If ``attention_out`` is a
    list, the (N, H, K, K) attention weights are appended to it.
    """
    N, K, D = x.shape
    H = params.arch.num_heads
    dh = D // H
    p = f"attn{layer}."

    def heads(t):
        return dc.transpose(dc.reshape(t, (N, K, H, dh)), (0, 2, 1, 3))

    q = heads(dc.add(dc.matmul(x, params[p + "wq"]), params[p + "bq"]))
    k = dc.transpose(dc.reshape(dc.add(dc.matmul(x, params[p + "wk"]), params[p + "bk"]),
                                (N, K, H, dh)), (0, 2, 3, 1))
    v = heads(dc.add(dc.matmul(x, params[p + "wv"]), params[p + "bv"]))

    logits = dc.scale(dc.matmul(q, k), 1.0 / math.sqrt(dh))
    attn = dc.softmax_rows(logits, bias=key_bias)
    if attention_out is not None:
        attention_out.append(attn.value)
    msg = dc.reshape(dc.transpose(dc.matmul(attn, v), (0, 2, 1, 3)), (N, K, D))
    msg = dc.add(dc.matmul(msg, params[p + "wo"]), params[p + "bo"])

    h = dc.relu(_linear(dc.concat_cols(x, msg), params, p + "mlp0."))
    h = _linear(h, params, p + "mlp1.", bias=False)
    return dc.add(x, h)


def head(x, params):
    n = len(params.arch.head_widths) + 1
    for i in range(n):
        x = _linear(x, params, f"head{i}.")
        if i < n - 1:
            x = dc.relu(x)
    return x


def forward_tensor(x, params, valid=None, attention_out=None):
    """Network output (N, K, 4) for a descriptor tensor (N, K, D).

    ``valid`` (N, K) boolean marks real (non-padding) rows.
    """
    if x.shape[-1] != params.arch.descriptor_dim:
        raise DimensionMismatch(
            f"descriptor dim {x.shape[-1]} != model dim {params.arch.descriptor_dim}")
    key_bias = None
    if valid is not None and not np.all(valid):
        key_bias = np.where(valid, 0.0, MASK_FILL).astype(x.dtype)[:, None, None, :]
    for layer in range(params.arch.num_layers):
        x = attention_layer(x, params, layer, key_bias, attention_out)
    return head(x, params)


def _canonical_order(descriptors):
    # lexsort keys run last-to-first; reverse so column 0 is the primary key
    return np.lexsort(descriptors.T[::-1])


def forward(descriptor_set, params, attention_out=None):
    """Scene coordinates and reliabilities for one descriptor set.

    Rows are processed in a canonical (lexicographic) order and mapped back,
    so permuting the input permutes the output bit-for-bit.
    """
    desc = np.asarray(getattr(descriptor_set, "descriptors", descriptor_set))
    if desc.ndim != 2 or desc.shape[0] < 1:
        raise DimensionMismatch(f"expected a (K, D) descriptor matrix with K >= 1, got {desc.shape}")
    if desc.shape[1] != params.arch.descriptor_dim:
        raise DimensionMismatch(
            f"descriptor dim {desc.shape[1]} != model dim {params.arch.descriptor_dim}")
    dtype = next(iter(params.tensors.values())).dtype if params.tensors else np.float32
    order = _canonical_order(desc)
    x = dc.Tensor(np.ascontiguousarray(desc[order], dtype=dtype)[None])
    out = forward_tensor(x, params, attention_out=attention_out).value[0]
    restored = np.empty_like(out)
    restored[order] = out
    raw_p = restored[:, 3].copy()
    return SceneCoordinateSet(
        coords=restored[:, :3].copy(),
        raw_p=raw_p,
        reliability=reliability(raw_p, params.arch.beta).astype(restored.dtype),
    )
