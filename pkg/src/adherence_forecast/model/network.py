"""Compact self-attention classifier with a hand-written backward pass.

Pipeline: linear input embedding, sinusoidal positional encoding, a stack
of post-norm encoder layers (masked multi-head self-attention, residual,
layer norm, ReLU feed-forward, residual, layer norm), global average
pooling over real days, and a linear two-logit head. Class 1 is the
non-adherent (dropout) class.

Weights are stored ``(fan_in, fan_out)`` and applied as ``x @ W + b``.
Everything runs in float64.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels as _default_kernels

LN_EPS = 1e-5


class IncompatibleHeads(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class MissingTrace(ValueError):
    pass


@dataclass(frozen=True)
class HyperParams:
    d_model: int = 4
    n_heads: int = 4
    ffn_hidden: int = 32
    dropout_rate: float = 0.1
    n_layers: int = 3
    n_classes: int = 2
    input_dim: int = 2

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise IncompatibleHeads(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_rate <= 0.5:
            raise ValueError("dropout_rate must lie in [0, 0.5]")

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_shapes(hp: HyperParams) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map; this order is also the checkpoint key order."""
    d, f = hp.d_model, hp.ffn_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "embed.weight": (hp.input_dim, d),
        "embed.bias": (d,),
    }
    for i in range(hp.n_layers):
        p = f"layers.{i}."
        for proj in ("q", "k", "v", "o"):
            shapes[p + proj + ".weight"] = (d, d)
            shapes[p + proj + ".bias"] = (d,)
        shapes[p + "norm1.scale"] = (d,)
        shapes[p + "norm1.shift"] = (d,)
        shapes[p + "ffn1.weight"] = (d, f)
        shapes[p + "ffn1.bias"] = (f,)
        shapes[p + "ffn2.weight"] = (f, d)
        shapes[p + "ffn2.bias"] = (d,)
        shapes[p + "norm2.scale"] = (d,)
        shapes[p + "norm2.shift"] = (d,)
    shapes["head.weight"] = (d, hp.n_classes)
    shapes["head.bias"] = (hp.n_classes,)
    return shapes


@dataclass(frozen=True)
class ModelParameters:
    hp: HyperParams
    arrays: dict[str, np.ndarray] = field(repr=False)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    @property
    def n_params(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.hp, {k: v.copy() for k, v in self.arrays.items()})


def init_model(hp: HyperParams, seed: int = 0) -> ModelParameters:
    """Weights ~ U(-sqrt(1/fan_in), sqrt(1/fan_in)); biases 0; norm scale 1, shift 0."""
    hp.validate()
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in parameter_shapes(hp).items():
        if name.endswith(".weight"):
            bound = np.sqrt(1.0 / shape[0])
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".scale"):
            arrays[name] = np.ones(shape)
        else:
            arrays[name] = np.zeros(shape)
    return ModelParameters(hp, arrays)


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, 2 * (i // 2) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass
class DropoutMasks:
    """Boolean keep masks per layer (None entries when dropout is off).

    Kept activations are scaled by ``inv_keep`` so expectations are unchanged.
    """
    attn: list
    attn_out: list
    ffn: list
    inv_keep: float = 1.0

    def attn_args(self, i):
        return self.attn[i], self.inv_keep

    def apply(self, x, masks, i):
        m = masks[i]
        return x if m is None else x * (m * self.inv_keep)


_U16 = 65536


def sample_dropout(hp: HyperParams, batch_size: int, length: int,
                   rng: np.random.Generator) -> DropoutMasks:
    """Draw keep masks from 16-bit uniforms.

    P(keep) is quantized to ``round((1 - rate) * 65536) / 65536`` and the
    rescaling uses that same quantized value.
    """
    rate = hp.dropout_rate
    n = hp.n_layers
    if rate == 0.0:
        return DropoutMasks([None] * n, [None] * n, [None] * n)
    cut = int(round((1.0 - rate) * _U16))

    def draw(shape):
        return rng.integers(0, _U16, size=shape, dtype=np.uint16) < cut

    b, t, h = batch_size, length, hp.n_heads
    attn, out, ffn = [], [], []
    for _ in range(n):
        attn.append(draw((b, h, t, t)))
        out.append(draw((b, t, hp.d_model)))
        ffn.append(draw((b, t, hp.ffn_hidden)))
    return DropoutMasks(attn, out, ffn, _U16 / cut)



def forward(params: ModelParameters, values: np.ndarray, mask: np.ndarray, *,
            train: bool = False, rng: np.random.Generator | None = None,
            masks: DropoutMasks | None = None, backend=None):
    """Run the network on a (B, input_dim, T) batch with (B, T) padding mask.

    Returns ``(logits, trace)``; ``trace`` is None in eval mode. Train mode
    draws dropout masks from ``rng`` unless ``masks`` are supplied.
    """
    K = backend or _default_kernels
    hp = params.hp
    P = params.arrays
    if values.ndim != 3 or values.shape[1] != hp.input_dim:
        raise ShapeMismatch(f"expected (B, {hp.input_dim}, T), got {values.shape}")
    b, _, t = values.shape
    if mask.shape != (b, t):
        raise ShapeMismatch(f"mask shape {mask.shape} does not match values {values.shape}")
    mask = np.ascontiguousarray(mask, dtype=bool)
    if not mask.any(axis=1).all():
        raise ShapeMismatch("every sequence needs at least one real position")
    if train and masks is None:
        if rng is None:
            raise ValueError("train mode needs an rng or explicit dropout masks")
        masks = sample_dropout(hp, b, t, rng)
    if not train or masks is None:
        masks = DropoutMasks([None] * hp.n_layers, [None] * hp.n_layers, [None] * hp.n_layers)

    x = np.ascontiguousarray(values.transpose(0, 2, 1))
    h = x @ P["embed.weight"] + P["embed.bias"] + positional_encoding(t, hp.d_model)
    layers = []
    for i in range(hp.n_layers):
        p = f"layers.{i}."
        q = h @ P[p + "q.weight"] + P[p + "q.bias"]
        k = h @ P[p + "k.weight"] + P[p + "k.bias"]
        v = h @ P[p + "v.weight"] + P[p + "v.bias"]
        ctx, probs = K.attention_forward(q, k, v, mask, hp.n_heads, *masks.attn_args(i))
        a = masks.apply(ctx @ P[p + "o.weight"] + P[p + "o.bias"], masks.attn_out, i)
        h1, xhat1, inv1 = K.layer_norm_forward(
            np.ascontiguousarray(h + a), P[p + "norm1.scale"], P[p + "norm1.shift"], LN_EPS)
        f1 = h1 @ P[p + "ffn1.weight"] + P[p + "ffn1.bias"]
        act = masks.apply(np.maximum(f1, 0.0), masks.ffn, i)
        f2 = act @ P[p + "ffn2.weight"] + P[p + "ffn2.bias"]
        h2, xhat2, inv2 = K.layer_norm_forward(
            np.ascontiguousarray(h1 + f2), P[p + "norm2.scale"], P[p + "norm2.shift"], LN_EPS)
        if train:
            layers.append(dict(h_in=h, q=q, k=k, v=v, ctx=ctx, probs=probs, h1=h1,
                               xhat1=xhat1, inv1=inv1, f1=f1, act=act,
                               xhat2=xhat2, inv2=inv2))
        h = h2
    lengths = mask.sum(axis=1).astype(np.float64)
    pooled = (h * mask[:, :, None]).sum(axis=1) / lengths[:, None]
    logits = pooled @ P["head.weight"] + P["head.bias"]
    if not train:
        return logits, None
    trace = dict(x=x, mask=mask, lengths=lengths, pooled=pooled, layers=layers, masks=masks)
    return logits, trace


def backward(params: ModelParameters, trace, dlogits: np.ndarray, *, backend=None,
             return_input_grad: bool = False):
    """Analytic gradients of ``sum(dlogits * logits)`` for every parameter.

    With ``return_input_grad`` also returns d/d(values) shaped (B, input_dim, T).
    """
    if trace is None:
        raise MissingTrace("backward needs the trace of a train-mode forward")
    K = backend or _default_kernels
    hp = params.hp
    P = params.arrays
    masks = trace["masks"]
    mask = trace["mask"]
    grads: dict[str, np.ndarray] = {}
    d = hp.d_model

    grads["head.weight"] = trace["pooled"].T @ dlogits
    grads["head.bias"] = dlogits.sum(axis=0)
    dpooled = dlogits @ P["head.weight"].T
    dh = mask[:, :, None] * (dpooled / trace["lengths"][:, None])[:, None, :]

    for i in reversed(range(hp.n_layers)):
        p = f"layers.{i}."
        L = trace["layers"][i]
        dr2, grads[p + "norm2.scale"], grads[p + "norm2.shift"] = K.layer_norm_backward(
            np.ascontiguousarray(dh), L["xhat2"], L["inv2"], P[p + "norm2.scale"])
        f = hp.ffn_hidden
        grads[p + "ffn2.weight"] = L["act"].reshape(-1, f).T @ dr2.reshape(-1, d)
        grads[p + "ffn2.bias"] = dr2.sum(axis=(0, 1))
        dact = masks.apply(dr2 @ P[p + "ffn2.weight"].T, masks.ffn, i)
        df1 = dact * (L["f1"] > 0)
        grads[p + "ffn1.weight"] = L["h1"].reshape(-1, d).T @ df1.reshape(-1, f)
        grads[p + "ffn1.bias"] = df1.sum(axis=(0, 1))
        dh1 = dr2 + df1 @ P[p + "ffn1.weight"].T

        dr1, grads[p + "norm1.scale"], grads[p + "norm1.shift"] = K.layer_norm_backward(
            np.ascontiguousarray(dh1), L["xhat1"], L["inv1"], P[p + "norm1.scale"])
        da = masks.apply(dr1, masks.attn_out, i)
        grads[p + "o.weight"] = L["ctx"].reshape(-1, d).T @ da.reshape(-1, d)
        grads[p + "o.bias"] = da.sum(axis=(0, 1))
        dctx = np.ascontiguousarray(da @ P[p + "o.weight"].T)
        dq, dk, dv = K.attention_backward(dctx, L["q"], L["k"], L["v"], L["probs"], mask,
                                          hp.n_heads, *masks.attn_args(i))
        h_in = L["h_in"].reshape(-1, d)
        dh = dr1.copy()
        for proj, g in (("q", dq), ("k", dk), ("v", dv)):
            grads[p + proj + ".weight"] = h_in.T @ g.reshape(-1, d)
            grads[p + proj + ".bias"] = g.sum(axis=(0, 1))
            dh += g @ P[p + proj + ".weight"].T

    x = trace["x"]
    grads["embed.weight"] = x.reshape(-1, hp.input_dim).T @ dh.reshape(-1, d)
    grads["embed.bias"] = dh.sum(axis=(0, 1))
    grads = {name: grads[name] for name in P}
    if return_input_grad:
        return grads, (dh @ P["embed.weight"].T).transpose(0, 2, 1)
    return grads


def predict_proba(params: ModelParameters, values: np.ndarray, mask: np.ndarray,
                  backend=None) -> np.ndarray:
    """Eval-mode probability of class 1 (non-adherent) per batch item."""
    logits, _ = forward(params, values, mask, backend=backend)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e[:, 1] / e.sum(axis=1)
