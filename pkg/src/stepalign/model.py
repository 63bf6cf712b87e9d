"""Multi-sentence grounding network.

Video features pass through a linear projection plus sin/cos positions and a stack of
Transformer encoder layers. Sentence features are projected (plus learned positions for
ordered narrations only), then a decoder stack lets them self-attend and cross-attend to
the encoded video. Both sides are projected to a small space where cosine similarity gives
the K x T alignment matrix.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .datamodel import AlignmentMatrix, LoadError, TimeWindow, read_fseq, write_fseq
from .numerics import (
    ConfigError,
    DimensionError,
    Tensor,
    feed_forward,
    l2_normalize,
    layer_norm,
    linear,
    make_rng,
    matmul,
    multihead_attention,
    xavier_uniform,
)

MODES = ("narration", "step")
CKPT_MAGIC = b"NASV1"


class CapacityError(ValueError):
    pass


@dataclass
class ModelConfig:
    C_v: int = 512
    C_t: int = 512
    D: int = 256
    d: int = 64
    n_enc_layers: int = 3
    n_dec_layers: int = 3
    n_heads: int = 8
    max_T: int = 1200
    max_K: int = 256
    ffn_mult: int = 4
    dropout: float = 0.0
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.D % self.n_heads:
            raise ConfigError(f"D={self.D} not divisible by n_heads={self.n_heads}")
        if self.D % 2:
            raise ConfigError("D must be even for sin/cos positions")
        if self.d > self.D:
            raise ConfigError(f"projection dim d={self.d} exceeds D={self.D}")
        for name in ("C_v", "C_t", "d", "max_T", "max_K"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_enc_layers < 0 or self.n_dec_layers < 0:
            raise ConfigError("layer counts must be >= 0")
        return self


def sincos_pe(T: int, D: int) -> np.ndarray:
    if D % 2:
        raise ConfigError(f"sin/cos positional encoding needs even D, got {D}")
    t = np.arange(T, dtype=float)[:, None]
    freq = 10000.0 ** (-np.arange(0, D, 2, dtype=float) / D)
    pe = np.empty((T, D))
    pe[:, 0::2] = np.sin(t * freq)
    pe[:, 1::2] = np.cos(t * freq)
    return pe


def _attn_names(prefix):
    return [f"{prefix}.{n}" for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]


class NaSVA:
    """Parameters live in ``self.params`` (ordered name -> Tensor)."""

    def __init__(self, config: ModelConfig, params: dict | None = None):
        self.config = config.validate()
        self.params = params if params is not None else self._init_params(make_rng(config.seed))
        self._pe_cache = np.zeros((0, config.D))
        self.dropout_rng = None  # set by the trainer; None means inference (no dropout)

    def _init_params(self, rng) -> dict:
        c = self.config
        D, F = c.D, c.ffn_mult * c.D
        p = {}

        def lin(name, fan_in, fan_out):
            p[f"{name}.w"] = xavier_uniform(rng, fan_in, fan_out)
            p[f"{name}.b"] = np.zeros(fan_out)

        def attn(prefix):
            for n in ("q", "k", "v", "o"):
                p[f"{prefix}.w{n}"] = xavier_uniform(rng, D, D)
                p[f"{prefix}.b{n}"] = np.zeros(D)
            # residual branches start as identity
            p[f"{prefix}.wo"][:] = 0.0

        def norm(name):
            p[f"{name}.g"] = np.ones(D)
            p[f"{name}.b"] = np.zeros(D)

        lin("proj_v", c.C_v, D)
        lin("proj_t", c.C_t, D)
        p["pos_t"] = rng.normal(0.0, 0.02, size=(c.max_K, D))
        for i in range(c.n_enc_layers):
            norm(f"enc{i}.ln1")
            attn(f"enc{i}.self")
            norm(f"enc{i}.ln2")
            lin(f"enc{i}.ff1", D, F)
            lin(f"enc{i}.ff2", F, D)
            p[f"enc{i}.ff2.w"][:] = 0.0
        norm("enc.ln_out")
        for i in range(c.n_dec_layers):
            norm(f"dec{i}.ln1")
            attn(f"dec{i}.self")
            norm(f"dec{i}.ln2")
            attn(f"dec{i}.cross")
            norm(f"dec{i}.ln3")
            lin(f"dec{i}.ff1", D, F)
            lin(f"dec{i}.ff2", F, D)
            p[f"dec{i}.ff2.w"][:] = 0.0
        norm("dec.ln_out")
        lin("out_v", D, c.d)
        lin("out_t", D, c.d)
        lin("alignability", D, 2)
        return {k: Tensor(v, requires_grad=True) for k, v in p.items()}

    # -- helpers -------------------------------------------------------------
    def parameters(self) -> dict:
        return self.params

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def _drop(self, x):
        p = self.config.dropout
        if p <= 0 or self.dropout_rng is None:
            return x
        keep = (self.dropout_rng.random(x.shape) >= p) / (1.0 - p)
        return x * keep

    def _ln(self, x, name):
        return layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _attn(self, q, kv, prefix):
        names = _attn_names(prefix)
        w = {n.rsplit(".", 1)[1]: self.params[n] for n in names}
        return multihead_attention(q, kv, kv, w, self.config.n_heads)

    def _ff(self, x, prefix):
        p = self.params
        return feed_forward(x, p[f"{prefix}.ff1.w"], p[f"{prefix}.ff1.b"],
                            p[f"{prefix}.ff2.w"], p[f"{prefix}.ff2.b"])

    def _pe(self, T):
        if self._pe_cache.shape[0] < T:
            self._pe_cache = sincos_pe(max(T, self.config.max_T), self.config.D)
        return self._pe_cache[:T]

    # -- forward -------------------------------------------------------------
    def embed(self, x_v, x_j, mode: str):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        x_v, x_j = _as_input(x_v), _as_input(x_j)
        c = self.config
        if x_v.shape[1] != c.C_v or x_j.shape[1] != c.C_t:
            raise DimensionError(
                f"feature dims ({x_v.shape[1]}, {x_j.shape[1]}) do not match model "
                f"(C_v={c.C_v}, C_t={c.C_t})")
        K = x_j.shape[0]
        if K > c.max_K:
            raise CapacityError(f"{K} sentences exceed max_K={c.max_K}")
        p = self.params
        # content scaled by sqrt(D) so it is not swamped by the unit-amplitude sin/cos rows
        scale = np.sqrt(c.D)
        h_v = linear(x_v, p["proj_v.w"], p["proj_v.b"]) * scale + self._pe(x_v.shape[0])
        h_j = linear(x_j, p["proj_t.w"], p["proj_t.b"]) * scale
        if mode == "narration":
            h_j = h_j + p["pos_t"][:K]
        return h_v, h_j

    def encode(self, h_v):
        x = h_v
        for i in range(self.config.n_enc_layers):
            h = self._ln(x, f"enc{i}.ln1")
            x = x + self._drop(self._attn(h, h, f"enc{i}.self"))
            x = x + self._drop(self._ff(self._ln(x, f"enc{i}.ln2"), f"enc{i}"))
        return self._ln(x, "enc.ln_out")

    def decode(self, o_v, h_j):
        y = h_j
        for i in range(self.config.n_dec_layers):
            h = self._ln(y, f"dec{i}.ln1")
            y = y + self._drop(self._attn(h, h, f"dec{i}.self"))
            y = y + self._drop(self._attn(self._ln(y, f"dec{i}.ln2"), o_v, f"dec{i}.cross"))
            y = y + self._drop(self._ff(self._ln(y, f"dec{i}.ln3"), f"dec{i}"))
        return self._ln(y, "dec.ln_out")

    def forward(self, x_v, x_j, mode: str):
        """Return ``(A_hat, y_hat)``: K x T cosine scores and K x 2 alignability logits."""
        p = self.params
        h_v, h_j = self.embed(x_v, x_j, mode)
        o_v = self.encode(h_v)
        o_j = self.decode(o_v, h_j)
        z_v = l2_normalize(linear(o_v, p["out_v.w"], p["out_v.b"]))
        z_j = l2_normalize(linear(o_j, p["out_t.w"], p["out_t.b"]))
        A = matmul(z_j, z_v.T)
        y_hat = linear(o_j, p["alignability.w"], p["alignability.b"])
        return A, y_hat

    __call__ = forward

    def predict(self, x_v, x_j, mode: str) -> AlignmentMatrix:
        A, _ = self.forward(_as_input(x_v, track=False), _as_input(x_j, track=False), mode)
        return AlignmentMatrix(np.clip(A.data, -1.0, 1.0), "predicted_score")

    # -- persistence ---------------------------------------------------------
    def save(self, path) -> None:
        cfg = json.dumps(asdict(self.config), sort_keys=True).encode()
        with open(path, "wb") as f:
            f.write(CKPT_MAGIC)
            f.write(struct.pack("<I", len(cfg)))
            f.write(cfg)
            f.write(struct.pack("<I", len(self.params)))
            for name, t in self.params.items():
                raw = name.encode()
                f.write(struct.pack("<H", len(raw)))
                f.write(raw)
                write_fseq(f, t.data.reshape(1, -1) if t.ndim == 1 else t.data, "text")

    @classmethod
    def load(cls, path) -> "NaSVA":
        with open(path, "rb") as f:
            if f.read(5) != CKPT_MAGIC:
                raise LoadError(f"{path}: not a checkpoint (bad magic)")
            (n,) = struct.unpack("<I", f.read(4))
            config = ModelConfig(**json.loads(f.read(n)))
            model = cls(config)
            (count,) = struct.unpack("<I", f.read(4))
            loaded = {}
            for _ in range(count):
                (ln,) = struct.unpack("<H", f.read(2))
                name = f.read(ln).decode()
                _, arr = read_fseq(f, f"{path}:{name}")
                loaded[name] = arr
        if set(loaded) != set(model.params):
            raise LoadError(f"{path}: parameter names do not match config {asdict(config)}")
        for name, t in model.params.items():
            t.data = loaded[name].reshape(t.shape).astype(float)
        return model

    def state_arrays(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}


def _as_input(x, track=False):
    if isinstance(x, Tensor):
        return x
    rows = getattr(x, "rows", x)
    return Tensor(np.asarray(rows, dtype=float), requires_grad=track)


def predict_windows(A, mode: str = "argmax_only", delta_sec: int = 8):
    """Per-row peak timestamp and window.

    ``mode`` is ``"argmax_only"`` (window ``[t*, t*]``) or ``"fixed_duration"``
    (``[t*, min(t* + delta_sec - 1, T - 1)]``). Ties resolve to the earliest timestamp.
    Returns ``(windows, peak_scores)``.
    """
    values = A.values if isinstance(A, AlignmentMatrix) else np.asarray(A)
    if values.ndim != 2 or values.size == 0:
        raise ValueError("predict_windows needs a non-empty K x T matrix")
    T = values.shape[1]
    peaks = values.argmax(axis=1)  # first occurrence on ties
    windows = []
    for t in peaks:
        t = int(t)
        if mode == "argmax_only":
            windows.append(TimeWindow(t, t))
        elif mode == "fixed_duration":
            if delta_sec < 1:
                raise ConfigError("delta_sec must be >= 1")
            windows.append(TimeWindow(t, min(t + delta_sec - 1, T - 1)))
        else:
            raise ValueError(f"unknown window mode {mode!r}")
    return windows, values[np.arange(values.shape[0]), peaks]
