"""Two-encoder / twin-decoder reconstruction network with focus-score
self-conditioning.

The context encoder ingests the (capped) sequence slice up to the current
timestamp concatenated with the focus score; the window encoder runs masked
self-attention over the input window and cross-attends into the context
encoding; two architecturally identical, independently parameterized decoders
map the window encoding back to the data space through a sigmoid.

A forward pass runs twice: phase 1 with a zero focus score produces both
reconstructions O1 and O2; the element-wise squared deviation of O1 from the
window becomes the focus score for phase 2, which produces the conditioned
reconstruction O2_hat.  Gradients flow through both phases, including through
the focus score.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, ParamStore
from .errors import DimensionMismatch, OddWidth, ShapeMismatch

MASK_LOGIT = -1e9


@dataclass
class ModelConfig:
    m: int
    window_size: int = 10
    context_cap: int = 100
    n_heads: int = None        # defaults to m
    d_model: int = None        # defaults to 2m
    ff_hidden: int = 64
    n_enc_layers: int = 1
    dropout: float = 0.1
    scale_mode: str = "head_dim"      # or "data_dim"
    focus_target: str = "context"     # or "window"
    init_seed: int = 0

    def __post_init__(self):
        if self.n_heads is None:
            self.n_heads = self.m
        if self.d_model is None:
            self.d_model = 2 * self.m
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        if self.scale_mode not in ("head_dim", "data_dim"):
            raise ValueError(f"unknown scale_mode {self.scale_mode!r}")
        if self.focus_target not in ("context", "window"):
            raise ValueError(f"unknown focus_target {self.focus_target!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class TwoPhaseOutput:
    """Reconstructions of one two-phase pass.  O1/O2/O2_hat are Tensors
    (shape B x K x m) so training can differentiate through them; `focus`
    holds the phase-2 focus score."""

    O1: Tensor
    O2: Tensor
    O2_hat: Tensor
    focus: Tensor
    attention_maps: dict = field(default_factory=dict)


def position_encoding(length, width):
    """Sinusoidal position table: PE[p, 2i] = sin(p / 10000^(2i/d)),
    PE[p, 2i+1] = cos of the same argument."""
    if width % 2 != 0:
        raise OddWidth(f"position encoding needs an even width, got {width}")
    pos = np.arange(length)[:, None].astype(np.float64)
    i = np.arange(0, width, 2).astype(np.float64)
    angle = pos / np.power(10000.0, i / width)
    pe = np.empty((length, width))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def position_encode(x):
    """Add the sinusoidal table to a (..., L, d) tensor."""
    L, d = x.shape[-2], x.shape[-1]
    return x + Tensor(position_encoding(L, d))


def attention(Q, K, V, scale, mask=None, want_weights=False):
    """Scaled dot-product attention.  `mask` is a boolean array marking
    logits to suppress; suppressed positions get a constant large-negative
    logit, so masked inputs cannot influence the output at all."""
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeMismatch(f"query width {Q.shape[-1]} != key width {K.shape[-1]}")
    if K.shape[-2] != V.shape[-2]:
        raise ShapeMismatch(f"key count {K.shape[-2]} != value count {V.shape[-2]}")
    logits = (Q @ K.transpose(_swap_last(K.ndim))) * (1.0 / scale)
    if mask is not None:
        logits = ad.masked_fill(logits, mask, MASK_LOGIT)
    weights = ad.softmax(logits, axis=-1)
    out = weights @ V
    if want_weights:
        return out, weights.data.copy()
    return out, None


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


class Linear:
    def __init__(self, store, prefix, d_in, d_out, rng):
        bound = 1.0 / np.sqrt(d_in)
        self.W = store.add(f"{prefix}.W", rng.uniform(-bound, bound, size=(d_in, d_out)))
        self.b = store.add(f"{prefix}.b", np.zeros(d_out))

    def __call__(self, x):
        return x @ self.W + self.b


class MultiHeadAttention:
    """Per-head linear projections, scaled attention, concat, output map."""

    def __init__(self, store, prefix, d_model, n_heads, cfg, rng):
        if d_model % n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.d_model = d_model
        self.head_dim = d_model // n_heads
        if cfg.scale_mode == "head_dim":
            self.scale = np.sqrt(self.head_dim)
        else:
            self.scale = np.sqrt(cfg.m)
        self.wq = Linear(store, f"{prefix}.q", d_model, d_model, rng)
        self.wk = Linear(store, f"{prefix}.k", d_model, d_model, rng)
        self.wv = Linear(store, f"{prefix}.v", d_model, d_model, rng)
        self.wo = Linear(store, f"{prefix}.out", d_model, d_model, rng)

    def _split(self, x):
        # (B, L, d) -> (B, h, L, head_dim)
        B, L, _ = x.shape
        return x.reshape(B, L, self.n_heads, self.head_dim).transpose((0, 2, 1, 3))

    def __call__(self, Q, K, V, masked=False, want_weights=False):
        B, Lq, _ = Q.shape
        Lk = K.shape[1]
        qh = self._split(self.wq(Q))
        kh = self._split(self.wk(K))
        vh = self._split(self.wv(V))
        mask = None
        if masked:
            if Lq != Lk:
                raise ShapeMismatch("causal mask requires square attention")
            mask = np.triu(np.ones((Lq, Lk), dtype=bool), k=1)
        out, weights = attention(qh, kh, vh, self.scale, mask=mask,
                                 want_weights=want_weights)
        out = out.transpose((0, 2, 1, 3)).reshape(B, Lq, self.d_model)
        return self.wo(out), weights


class FeedForward:
    """Two-layer position-wise network with ReLU."""

    def __init__(self, store, prefix, d_in, hidden, d_out, rng):
        self.l1 = Linear(store, f"{prefix}.l1", d_in, hidden, rng)
        self.l2 = Linear(store, f"{prefix}.l2", hidden, d_out, rng)

    def __call__(self, x):
        return self.l2(self.l1(x).relu())


class LayerNorm:
    def __init__(self, store, prefix, width):
        self.gain = store.add(f"{prefix}.gain", np.ones(width))
        self.bias = store.add(f"{prefix}.bias", np.zeros(width))

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias)


class EncoderLayer:
    """Self-attention + feed-forward sublayers, each with residual + norm."""

    def __init__(self, store, prefix, cfg, rng):
        d = cfg.d_model
        self.attn = MultiHeadAttention(store, f"{prefix}.attn", d, cfg.n_heads, cfg, rng)
        self.ln1 = LayerNorm(store, f"{prefix}.ln1", d)
        self.ff = FeedForward(store, f"{prefix}.ff", d, cfg.ff_hidden, d, rng)
        self.ln2 = LayerNorm(store, f"{prefix}.ln2", d)
        self.dropout = cfg.dropout

    def __call__(self, x, training, rng, want_weights=False):
        att, weights = self.attn(x, x, x, want_weights=want_weights)
        att = ad.dropout(att, self.dropout, training, rng)
        x = self.ln1(x + att)
        ff = ad.dropout(self.ff(x), self.dropout, training, rng)
        return self.ln2(x + ff), weights


class WindowEncoder:
    """Masked self-attention over the window, then cross-attention with the
    context encoding as keys/values and the encoded window as query."""

    def __init__(self, store, cfg, rng):
        d = cfg.d_model
        self.self_attn = MultiHeadAttention(store, "window_encoder.self_attn",
                                            d, cfg.n_heads, cfg, rng)
        self.ln1 = LayerNorm(store, "window_encoder.ln1", d)
        self.cross_attn = MultiHeadAttention(store, "window_encoder.cross_attn",
                                             d, cfg.n_heads, cfg, rng)
        self.ln2 = LayerNorm(store, "window_encoder.ln2", d)
        self.dropout = cfg.dropout

    def __call__(self, I2, ctx_encoding, training, rng, want_weights=False):
        att, self_w = self.self_attn(I2, I2, I2, masked=True, want_weights=want_weights)
        att = ad.dropout(att, self.dropout, training, rng)
        I2_2 = self.ln1(I2 + att)
        cross, cross_w = self.cross_attn(I2_2, ctx_encoding, ctx_encoding,
                                         want_weights=want_weights)
        cross = ad.dropout(cross, self.dropout, training, rng)
        return self.ln2(I2_2 + cross), self_w, cross_w


class Decoder:
    """Position-wise feed-forward d_model -> hidden -> m, then sigmoid."""

    def __init__(self, store, prefix, cfg, rng):
        self.ff = FeedForward(store, f"{prefix}.ff", cfg.d_model, cfg.ff_hidden,
                              cfg.m, rng)

    def __call__(self, x):
        return self.ff(x).sigmoid()


class TranAD:
    """The full network plus its parameter store."""

    def __init__(self, config):
        self.config = config
        self.params = ParamStore()
        rng = np.random.default_rng(config.init_seed)
        d = config.d_model
        m = config.m
        # learned input projection for whichever stream is not carrying the
        # focus concatenation (the other stream gets width 2m by concat)
        if config.focus_target == "context":
            self.window_embed = Linear(self.params, "embed.window", m, d, rng)
            self.ctx_embed = None
            if d != 2 * m:
                raise ValueError("focus_target=context requires d_model == 2m")
        else:
            self.window_embed = None
            self.ctx_embed = Linear(self.params, "embed.context", m, d, rng)
            if d != 2 * m:
                raise ValueError("focus_target=window requires d_model == 2m")
        self.encoder_layers = [
            EncoderLayer(self.params, f"encoder1.l{i}", config, rng)
            for i in range(config.n_enc_layers)
        ]
        self.window_encoder = WindowEncoder(self.params, config, rng)
        self.decoder1 = Decoder(self.params, "decoder1", config, rng)
        self.decoder2 = Decoder(self.params, "decoder2", config, rng)

    # -- encoding -------------------------------------------------------------

    def _align_focus(self, F, length):
        """Zero-pad the K x m focus score at the front (or keep its tail) so
        it lines up with the last rows of a length-`length` sequence."""
        B, K, m = F.shape
        if length == K:
            return F
        if length < K:
            return F[:, K - length:, :]
        zeros = Tensor(np.zeros((B, length - K, m)))
        return ad.concat([zeros, F], axis=1)

    def encode_context(self, C, F, training=False, rng=None, want_weights=False):
        """First encoder: concat the focus score onto the context (or embed
        the context when the focus rides on the window), position-encode, and
        run the encoder layers."""
        if C.shape[-1] != self.config.m:
            raise DimensionMismatch(
                f"context has {C.shape[-1]} dims, model expects {self.config.m}"
            )
        L = C.shape[1]
        if self.config.focus_target == "context":
            aligned = self._align_focus(F, L)
            I1 = position_encode(ad.concat([C, aligned], axis=2))
        else:
            I1 = position_encode(self.ctx_embed(C))
        weights = None
        x = I1
        for layer in self.encoder_layers:
            x, weights = layer(x, training, rng, want_weights=want_weights)
        return x, weights

    def encode_window(self, W, ctx_encoding, F=None, training=False, rng=None,
                      want_weights=False):
        if W.shape[-1] != self.config.m:
            raise DimensionMismatch(
                f"window has {W.shape[-1]} dims, model expects {self.config.m}"
            )
        if self.config.focus_target == "context":
            I2 = position_encode(self.window_embed(W))
        else:
            I2 = position_encode(ad.concat([W, F], axis=2))
        return self.window_encoder(I2, ctx_encoding, training, rng,
                                   want_weights=want_weights)

    # -- the two-phase pass ---------------------------------------------------

    def forward_two_phase(self, W, C, training=False, rng=None,
                          self_condition=True, want_weights=False):
        """Run both phases on a batch.

        W: (B, K, m) array or Tensor; C: (B, L, m) with one shared context
        length per call.  Returns a TwoPhaseOutput of (B, K, m) tensors.
        """
        W = W if isinstance(W, Tensor) else Tensor(W)
        C = C if isinstance(C, Tensor) else Tensor(C)
        if W.ndim == 2:
            W = W.reshape(1, *W.shape)
        if C.ndim == 2:
            C = C.reshape(1, *C.shape)
        if rng is None:
            rng = np.random.default_rng(0)
        B, K, m = W.shape

        zero_focus = Tensor(np.zeros((B, K, m)))
        ctx1, enc_w1 = self.encode_context(C, zero_focus, training, rng,
                                           want_weights=want_weights)
        I23, self_w1, cross_w1 = self.encode_window(W, ctx1, F=zero_focus,
                                                    training=training, rng=rng,
                                                    want_weights=want_weights)
        O1 = self.decoder1(I23)
        O2 = self.decoder2(I23)

        diff = O1 - W
        focus = diff * diff
        phase2_focus = focus if self_condition else Tensor(np.zeros((B, K, m)))

        ctx2, enc_w2 = self.encode_context(C, phase2_focus, training, rng,
                                           want_weights=want_weights)
        I23_2, self_w2, cross_w2 = self.encode_window(W, ctx2, F=phase2_focus,
                                                      training=training, rng=rng,
                                                      want_weights=want_weights)
        O2_hat = self.decoder2(I23_2)

        maps = {}
        if want_weights:
            maps = {
                "context_phase1": enc_w1, "window_self_phase1": self_w1,
                "window_cross_phase1": cross_w1,
                "context_phase2": enc_w2, "window_self_phase2": self_w2,
                "window_cross_phase2": cross_w2,
            }
        return TwoPhaseOutput(O1=O1, O2=O2, O2_hat=O2_hat, focus=phase2_focus,
                              attention_maps=maps)

    # -- persistence ----------------------------------------------------------

    def save(self, path, extra=None):
        meta = {"model_config": self.config.to_dict()}
        if extra:
            meta.update(extra)
        ad.save_arrays(path, self.params.snapshot(), extra=meta)

    @classmethod
    def load(cls, path):
        arrays, extra = ad.load_arrays(path)
        config = ModelConfig.from_dict(extra["model_config"])
        model = cls(config)
        model.params.load(arrays)
        return model, extra
