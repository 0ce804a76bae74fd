"""Convolutional neighbourhood embedding + causal decoder, in plain numpy.

Forward and reverse-mode passes are written out by hand. The network maps a
sequence of 3x3x3xC SH patches (one per streamline vertex) to a 3-vector per
position::

    z_t   = W_embed . vec(x_t) + b          (one 3x3x3 conv position per vertex)
    h     = z + P[:T]                       (learned positional table)
    h     = h + MHA(LN(h))                  (causal, future keys excluded)
    h     = h + FF(LN(h))                   (x n_layers, GELU, width d_ff)
    y_hat = head(LN(h))

Variants: ``full`` as above; ``context_only`` embeds only the centre cell;
``baseline_mlp`` embeds the centre cell, has no positional table and no
attention (feed-forward blocks only).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._binary import Reader
from .errors import CheckpointError, ConfigMismatch, ContextOverflow, FormatError, InvalidArgument, InvalidConfig, StaleTrace

VARIANTS = ("baseline_mlp", "context_only", "full")
PATCH_CELLS = 27
CENTER_CELL = 13
LN_EPS = 1e-5
INIT_STD = 0.02
GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 6
    n_heads: int = 6
    d_model: int = 192
    block_size: int = 96
    in_channels: int = 28
    variant: str = "full"
    d_ff: int = 0  # 0 -> 4 * d_model

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidConfig(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.n_layers < 0 or self.n_heads < 1 or self.d_model < 1 or self.in_channels < 1:
            raise InvalidConfig("layer, head, width and channel counts must be positive")
        if self.d_model % self.n_heads:
            raise InvalidConfig(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.block_size < 1:
            raise InvalidConfig("block_size must be >= 1")
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        if self.d_ff < 1:
            raise InvalidConfig("d_ff must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def attention(self) -> bool:
        return self.variant != "baseline_mlp"

    @property
    def embed_inputs(self) -> int:
        return PATCH_CELLS * self.in_channels if self.variant == "full" else self.in_channels

    def replace(self, **kw) -> "ModelConfig":
        args = {f: getattr(self, f) for f in self.__dataclass_fields__}
        args.update(kw)
        if "d_model" in kw and "d_ff" not in kw:
            args["d_ff"] = 0
        return ModelConfig(**args)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, F = cfg.d_model, cfg.d_ff
    shapes = {"embed.weight": (cfg.embed_inputs, D), "embed.bias": (D,)}
    if cfg.attention:
        shapes["pos"] = (cfg.block_size, D)
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        if cfg.attention:
            shapes[p + "ln1.gain"] = (D,)
            shapes[p + "ln1.offset"] = (D,)
            for w in ("q", "k", "v", "o"):
                shapes[p + f"attn.w{w}"] = (D, D)
                shapes[p + f"attn.b{w}"] = (D,)
        shapes[p + "ln2.gain"] = (D,)
        shapes[p + "ln2.offset"] = (D,)
        shapes[p + "ff.w1"] = (D, F)
        shapes[p + "ff.b1"] = (F,)
        shapes[p + "ff.w2"] = (F, D)
        shapes[p + "ff.b2"] = (D,)
    shapes["ln_f.gain"] = (D,)
    shapes["ln_f.offset"] = (D,)
    shapes["head.weight"] = (D, 3)
    shapes["head.bias"] = (3,)
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    version: int = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def dtype(self):
        return self.tensors["head.bias"].dtype

    @property
    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()}, self.version)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.version)

    def bump(self) -> None:
        self.version += 1

    def equal(self, other: "ModelParams") -> bool:
        return (
            self.config == other.config
            and self.tensors.keys() == other.tensors.keys()
            and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors)
        )


def init_params(config: ModelConfig, rng_seed: int = 0, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(rng_seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            t = np.ones(shape)
        elif leaf in ("offset", "bias") or (leaf.startswith("b") and len(shape) == 1):
            t = np.zeros(shape)
        else:
            t = rng.normal(0.0, INIT_STD, shape)
        tensors[name] = t.astype(dtype)
    return ModelParams(config, tensors)


# -- primitives --------------------------------------------------------------


def _layernorm(x, gain, offset):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xh = xc * rstd
    return xh * gain + offset, (xh, rstd)


def _layernorm_back(dy, gain, cache):
    xh, rstd = cache
    red = tuple(range(dy.ndim - 1))
    dgain = (dy * xh).sum(axis=red)
    doffset = dy.sum(axis=red)
    dxh = dy * gain
    dx = rstd * (dxh - dxh.mean(axis=-1, keepdims=True) - xh * (dxh * xh).mean(axis=-1, keepdims=True))
    return dx, dgain, doffset


def _gelu(u):
    th = np.tanh(GELU_C * (u + 0.044715 * u**3))
    return 0.5 * u * (1.0 + th), th


def _gelu_back(du_out, u, th):
    dth = (1.0 - th * th) * GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return du_out * (0.5 * (1.0 + th) + 0.5 * u * dth)


def _lin(x, w, b):
    return x @ w + b


def _wgrad(x, dy):
    """Weight gradient of ``y = x @ w`` summed over all leading axes."""
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def masked_attention(q, k, v):
    """Causal softmax attention on ``(..., T, d)`` arrays.

    Future keys are removed from the softmax support, so their weights are
    exactly zero. Returns ``(output, weights)``.
    """
    T, d = q.shape[-2], q.shape[-1]
    s = (q @ np.swapaxes(k, -1, -2)) / np.sqrt(np.asarray(d, dtype=q.dtype))
    s = np.where(causal_mask(T), s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    w = e / e.sum(axis=-1, keepdims=True)
    return w @ v, w


def select_inputs(features, config: ModelConfig) -> np.ndarray:
    """Flatten patches to ``(..., T, 27*C)`` and keep only the centre cell if the variant says so."""
    x = np.asarray(features)
    C = config.in_channels
    if x.shape[-4:] == (3, 3, 3, C):
        x = x.reshape(*x.shape[:-4], PATCH_CELLS * C)
    if x.shape[-1] != PATCH_CELLS * C:
        raise InvalidArgument(f"features must end in (3,3,3,{C}) or {PATCH_CELLS * C}, got {x.shape}")
    if config.variant != "full":
        x = x[..., CENTER_CELL * C : (CENTER_CELL + 1) * C]
    return x


def embed(features, params: ModelParams) -> np.ndarray:
    x = select_inputs(features, params.config).astype(params.dtype, copy=False)
    return _lin(x, params["embed.weight"], params["embed.bias"])


# -- forward / backward ------------------------------------------------------


@dataclass
class ForwardTrace:
    predictions: np.ndarray  # (B, T, 3)
    attention: np.ndarray | None  # (B, L, H, T, T)
    caches: dict = field(repr=False)
    params_id: int = 0
    version: int = 0
    batched: bool = True

    def single(self) -> np.ndarray:
        return self.predictions if self.batched else self.predictions[0]


def forward(params: ModelParams, features, embedded: np.ndarray | None = None) -> ForwardTrace:
    """Run the network on ``(B, T, ...)`` or ``(T, ...)`` patch features.

    Passing ``embedded`` instead (``(B, T, d_model)``) skips the embedding; the
    resulting trace then yields no embedding gradients.
    """
    cfg = params.config
    P = params.tensors
    if embedded is not None:
        z = np.asarray(embedded, dtype=params.dtype)
        x = None
        batched = z.ndim == 3
    else:
        x = select_inputs(features, cfg).astype(params.dtype, copy=False)
        batched = x.ndim == 3
        if not batched:
            x = x[None]
        z = _lin(x, P["embed.weight"], P["embed.bias"])
    if not batched and z.ndim == 2:
        z = z[None]
    B, T, D = z.shape
    if T > cfg.block_size:
        raise ContextOverflow(f"sequence of {T} exceeds block size {cfg.block_size}")
    H, dk = cfg.n_heads, cfg.d_head

    h = z + P["pos"][:T] if cfg.attention else z
    caches = {"x": x, "T": T}
    attn_all = np.empty((B, cfg.n_layers, H, T, T), dtype=h.dtype) if cfg.attention else None
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        c = {}
        if cfg.attention:
            a, c["ln1"] = _layernorm(h, P[p + "ln1.gain"], P[p + "ln1.offset"])
            q = _lin(a, P[p + "attn.wq"], P[p + "attn.bq"]).reshape(B, T, H, dk).transpose(0, 2, 1, 3)
            k = _lin(a, P[p + "attn.wk"], P[p + "attn.bk"]).reshape(B, T, H, dk).transpose(0, 2, 1, 3)
            v = _lin(a, P[p + "attn.wv"], P[p + "attn.bv"]).reshape(B, T, H, dk).transpose(0, 2, 1, 3)
            o, w = masked_attention(q, k, v)
            o = o.transpose(0, 2, 1, 3).reshape(B, T, D)
            h = h + _lin(o, P[p + "attn.wo"], P[p + "attn.bo"])
            c.update(a=a, q=q, k=k, v=v, w=w, o=o)
            attn_all[:, i] = w
        f, c["ln2"] = _layernorm(h, P[p + "ln2.gain"], P[p + "ln2.offset"])
        u = _lin(f, P[p + "ff.w1"], P[p + "ff.b1"])
        r, th = _gelu(u)
        h = h + _lin(r, P[p + "ff.w2"], P[p + "ff.b2"])
        c.update(f=f, u=u, r=r, th=th)
        caches[i] = c
    hf, caches["ln_f"] = _layernorm(h, P["ln_f.gain"], P["ln_f.offset"])
    caches["hf"] = hf
    y = _lin(hf, P["head.weight"], P["head.bias"])
    if not batched:
        y = y[0]
        attn_all = None if attn_all is None else attn_all[0]
    return ForwardTrace(y, attn_all, caches, id(params), params.version, batched)


def predict(params: ModelParams, features) -> np.ndarray:
    return forward(params, features).predictions


def backward(trace: ForwardTrace, d_predictions, params: ModelParams) -> dict[str, np.ndarray]:
    """Gradients of ``sum(predictions * d_predictions)`` for every parameter tensor.

    If the trace was built from pre-embedded input the returned dict also has
    ``"embedded"`` (the input gradient) and zero embedding gradients.
    """
    if trace.params_id != id(params) or trace.version != params.version:
        raise StaleTrace("trace was produced with different or since-updated parameters")
    cfg = params.config
    P = params.tensors
    c = trace.caches
    dy = np.asarray(d_predictions, dtype=params.dtype)
    if not trace.batched:
        dy = dy[None]
    B, T, _ = dy.shape
    if T != c["T"]:
        raise InvalidArgument("d_predictions length differs from the traced sequence")
    H, dk, D = cfg.n_heads, cfg.d_head, cfg.d_model
    g = {name: np.zeros_like(t) for name, t in P.items()}

    g["head.weight"] = _wgrad(c["hf"], dy)
    g["head.bias"] = dy.sum(axis=(0, 1))
    dhf = dy @ P["head.weight"].T
    dh, g["ln_f.gain"], g["ln_f.offset"] = _layernorm_back(dhf, P["ln_f.gain"], c["ln_f"])

    for i in reversed(range(cfg.n_layers)):
        p = f"layers.{i}."
        ci = c[i]
        # feed-forward
        g[p + "ff.w2"] = _wgrad(ci["r"], dh)
        g[p + "ff.b2"] = dh.sum(axis=(0, 1))
        dr = dh @ P[p + "ff.w2"].T
        du = _gelu_back(dr, ci["u"], ci["th"])
        g[p + "ff.w1"] = _wgrad(ci["f"], du)
        g[p + "ff.b1"] = du.sum(axis=(0, 1))
        df = du @ P[p + "ff.w1"].T
        dln, g[p + "ln2.gain"], g[p + "ln2.offset"] = _layernorm_back(df, P[p + "ln2.gain"], ci["ln2"])
        dh = dh + dln
        if not cfg.attention:
            continue
        # attention
        g[p + "attn.wo"] = _wgrad(ci["o"], dh)
        g[p + "attn.bo"] = dh.sum(axis=(0, 1))
        do = (dh @ P[p + "attn.wo"].T).reshape(B, T, H, dk).transpose(0, 2, 1, 3)
        w, q, k, v = ci["w"], ci["q"], ci["k"], ci["v"]
        dw = do @ np.swapaxes(v, -1, -2)
        dv = np.swapaxes(w, -1, -2) @ do
        ds = w * (dw - (dw * w).sum(axis=-1, keepdims=True))
        scale = 1.0 / np.sqrt(np.asarray(dk, dtype=ds.dtype))
        dq = (ds @ k) * scale
        dkk = (np.swapaxes(ds, -1, -2) @ q) * scale
        a = ci["a"]
        da = np.zeros_like(a)
        for name, dpart in (("q", dq), ("k", dkk), ("v", dv)):
            dflat = dpart.transpose(0, 2, 1, 3).reshape(B, T, D)
            g[p + f"attn.w{name}"] = _wgrad(a, dflat)
            g[p + f"attn.b{name}"] = dflat.sum(axis=(0, 1))
            da += dflat @ P[p + f"attn.w{name}"].T
        dln, g[p + "ln1.gain"], g[p + "ln1.offset"] = _layernorm_back(da, P[p + "ln1.gain"], ci["ln1"])
        dh = dh + dln

    if cfg.attention:
        g["pos"][:T] = dh.sum(axis=0)
    if c["x"] is None:
        g["embedded"] = dh if trace.batched else dh[0]
    else:
        g["embed.weight"] = _wgrad(c["x"], dh)
        g["embed.bias"] = dh.sum(axis=(0, 1))
    return g


def dump_attention(trace: ForwardTrace, layer: int, head: int, index: int = 0) -> np.ndarray:
    """Post-softmax weights ``(T, T)``: rows are query positions, columns keys."""
    if trace.attention is None:
        raise InvalidArgument("this model variant has no attention")
    att = trace.attention if trace.batched else trace.attention[None]
    _, L, H, _, _ = att.shape
    if not (0 <= layer < L) or not (0 <= head < H):
        raise InvalidArgument(f"layer/head ({layer}, {head}) out of range for {L} layers x {H} heads")
    if not (0 <= index < att.shape[0]):
        raise InvalidArgument(f"batch index {index} out of range")
    return att[index, layer, head].copy()


# -- incremental decoding ----------------------------------------------------


class IncrementalDecoder:
    """Per-row key/value caches so that each new vertex costs one token.

    Rows advance independently; ``step`` returns the prediction at each row's
    newest position, identical (up to rounding) to a full :func:`forward` over
    that row's prefix. Rows must not exceed ``block_size`` tokens.
    """

    def __init__(self, params: ModelParams, n_rows: int):
        self.params = params
        cfg = params.config
        self.cfg = cfg
        self.lengths = np.zeros(n_rows, dtype=np.int64)
        shape = (n_rows, cfg.n_heads, cfg.block_size, cfg.d_head)
        if cfg.attention:
            self.keys = [np.zeros(shape, dtype=params.dtype) for _ in range(cfg.n_layers)]
            self.values = [np.zeros(shape, dtype=params.dtype) for _ in range(cfg.n_layers)]

    def reset(self, rows) -> None:
        self.lengths[rows] = 0

    def step(self, rows, features) -> np.ndarray:
        cfg, P = self.cfg, self.params.tensors
        rows = np.asarray(rows, dtype=np.int64)
        pos = self.lengths[rows]
        if np.any(pos >= cfg.block_size):
            raise ContextOverflow("row context is full; recompute the window with forward()")
        x = select_inputs(features, cfg).astype(self.params.dtype, copy=False)
        h = _lin(x, P["embed.weight"], P["embed.bias"])
        r, H, dk = rows.size, cfg.n_heads, cfg.d_head
        if cfg.attention:
            h = h + P["pos"][pos]
            Lmax = int(pos.max()) + 1
            valid = np.arange(Lmax)[None, :] <= pos[:, None]  # (r, Lmax)
            scale = 1.0 / np.sqrt(np.asarray(dk, dtype=h.dtype))
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            if cfg.attention:
                a, _ = _layernorm(h, P[p + "ln1.gain"], P[p + "ln1.offset"])
                q = _lin(a, P[p + "attn.wq"], P[p + "attn.bq"]).reshape(r, H, dk)
                self.keys[i][rows, :, pos] = _lin(a, P[p + "attn.wk"], P[p + "attn.bk"]).reshape(r, H, dk)
                self.values[i][rows, :, pos] = _lin(a, P[p + "attn.wv"], P[p + "attn.bv"]).reshape(r, H, dk)
                K = self.keys[i][rows, :, :Lmax]
                V = self.values[i][rows, :, :Lmax]
                s = (K @ q[..., None])[..., 0] * scale  # (r, H, Lmax)
                s = np.where(valid[:, None, :], s, -np.inf)
                s = s - s.max(axis=-1, keepdims=True)
                e = np.exp(s)
                w = e / e.sum(axis=-1, keepdims=True)
                o = (w[:, :, None, :] @ V)[:, :, 0, :].reshape(r, cfg.d_model)
                h = h + _lin(o, P[p + "attn.wo"], P[p + "attn.bo"])
            f, _ = _layernorm(h, P[p + "ln2.gain"], P[p + "ln2.offset"])
            u, _ = _gelu(_lin(f, P[p + "ff.w1"], P[p + "ff.b1"]))
            h = h + _lin(u, P[p + "ff.w2"], P[p + "ff.b2"])
        hf, _ = _layernorm(h, P["ln_f.gain"], P["ln_f.offset"])
        self.lengths[rows] += 1
        return _lin(hf, P["head.weight"], P["head.bias"])


# -- checkpoint format -------------------------------------------------------

CKP_MAGIC = b"CKP1"
CKP_VERSION = 1


def save_checkpoint(params: ModelParams, path) -> None:
    cfg = params.config
    parts = [
        CKP_MAGIC,
        struct.pack(
            "<I6IB",
            CKP_VERSION,
            cfg.n_layers,
            cfg.n_heads,
            cfg.d_model,
            cfg.block_size,
            cfg.in_channels,
            cfg.d_ff,
            VARIANTS.index(cfg.variant),
        ),
        struct.pack("<I", len(params.tensors)),
    ]
    for name, t in params.tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, variant: str | None = None) -> ModelParams:
    """Read a CKP1 file; ``variant`` (if given) must match the stored config."""
    r = Reader(Path(path).read_bytes())
    try:
        r.magic(CKP_MAGIC)
        version = r.u32("version")
        if version != CKP_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        fields = [r.u32(n) for n in ("n_layers", "n_heads", "d_model", "block_size", "in_channels", "d_ff")]
        code = r.u8("variant")
        if code >= len(VARIANTS):
            raise CheckpointError(f"unknown variant code {code}")
        try:
            cfg = ModelConfig(*fields[:5], variant=VARIANTS[code], d_ff=fields[5])
        except InvalidConfig as exc:
            raise CheckpointError(f"invalid stored config: {exc}") from exc
        if variant is not None and variant != cfg.variant:
            raise ConfigMismatch(f"checkpoint holds variant {cfg.variant!r}, requested {variant!r}")
        expected = param_shapes(cfg)
        count = r.u32("tensor count")
        tensors = {}
        for _ in range(count):
            name = r.take(r.u16("name length"), "tensor name").decode("utf-8")
            rank = r.u8(f"rank of {name}")
            shape = tuple(r.u32(f"dims of {name}") for _ in range(rank))
            if name not in expected:
                raise CheckpointError(f"unexpected tensor {name!r}")
            if shape != expected[name]:
                raise CheckpointError(f"tensor {name!r} has shape {shape}, config implies {expected[name]}")
            n = int(np.prod(shape, dtype=np.int64))
            if r.pos + 4 * n > len(r.buf):
                raise CheckpointError(f"tensor {name!r} payload is truncated")
            tensors[name] = r.f32_array(n, name).reshape(shape).astype(np.float32)
        missing = [k for k in expected if k not in tensors]
        if missing:
            raise CheckpointError(f"missing tensor {missing[0]!r}")
        r.expect_end()
    except FormatError as exc:
        raise CheckpointError(str(exc)) from exc
    return ModelParams(cfg, {k: tensors[k] for k in expected})
