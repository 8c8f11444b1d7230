"""Caption decoder families over the autodiff tensor core.

Three decoders share one interface:

  conv           stacked causal convolutions with GLU activations; the
                 global image feature is projected to the embedding space
                 and concatenated with every input embedding, so layer 1
                 sees [T, 2E] and emits [T, H]. Residual connections join
                 successive layers from layer 2 on.
  conv_attention same, plus a per-layer scaled dot-product attention over
                 the region features, added to the hidden state after each
                 GLU and before the residual add.
  lstm           standard LSTM whose initial hidden and cell states are
                 tanh projections of the global image feature; tokens are
                 the only per-step input.

All decoders end in a shared linear projection to vocabulary logits.
"""

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from convcap import tensor as T
from convcap.errors import ConfigError, FormatError
from convcap.tensor import Tensor

DECODERS = ("conv", "conv_attention", "lstm")

CHECKPOINT_MAGIC = b"CKPT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    decoder: str = "conv"
    num_layers: int = 1
    emb_dim: int = 512
    hidden: int = 512
    kernel: int = 5
    vocab_size: int = 0
    feature_dim: int = 64
    regions: int = 16
    max_len: int = 15
    dropout_p: float = 0.0
    seed: int = 0

    def validate(self):
        if self.decoder not in DECODERS:
            raise ConfigError(f"unknown decoder {self.decoder!r}")
        if not 1 <= self.num_layers <= 4:
            raise ConfigError(f"num_layers must be 1..4, got {self.num_layers}")
        if self.decoder != "lstm" and self.kernel < 1:
            raise ConfigError("kernel width must be >= 1")
        if self.decoder == "conv_attention" and self.regions < 1:
            raise ConfigError("conv_attention requires regions >= 1")
        for name in ("emb_dim", "hidden", "vocab_size", "feature_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must be in [0, 1)")
        return self


class Model:
    """A decoder plus its parameter registry, ordered deterministically."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}

    def add_param(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"parameter {name!r} registered twice")
        t = Tensor(np.ascontiguousarray(data, dtype=data.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def forward(self, features, tokens, dropout_rng=None) -> Tensor:
        if self.cfg.decoder == "lstm":
            return lstm_forward(self, features, tokens, dropout_rng)
        return conv_forward(self, features, tokens, dropout_rng)


def _uniform(rng, shape, dtype):
    fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else int(shape[0])
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_model(cfg: ModelConfig, rng=None, dtype=np.float32) -> Model:
    """Build a model with uniform +-1/sqrt(fan_in) weights and zero biases."""
    cfg.validate()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    m = Model(cfg)
    v, e, h, f = cfg.vocab_size, cfg.emb_dim, cfg.hidden, cfg.feature_dim

    m.add_param("embedding", _uniform(rng, (v, e), dtype))
    if cfg.decoder == "lstm":
        m.add_param("init_h", _uniform(rng, (f, h), dtype))
        m.add_param("init_c", _uniform(rng, (f, h), dtype))
        for layer in range(1, cfg.num_layers + 1):
            in_dim = e if layer == 1 else h
            m.add_param(f"lstm{layer}_wx", _uniform(rng, (in_dim, 4 * h), dtype))
            m.add_param(f"lstm{layer}_wh", _uniform(rng, (h, 4 * h), dtype))
            m.add_param(f"lstm{layer}_b", np.zeros(4 * h, dtype=dtype))
    else:
        m.add_param("img_proj", _uniform(rng, (f, e), dtype))
        k = cfg.kernel
        for layer in range(1, cfg.num_layers + 1):
            c_in = 2 * e if layer == 1 else h
            m.add_param(f"conv{layer}_w", _uniform(rng, (k, c_in, 2 * h), dtype))
            m.add_param(f"conv{layer}_b", np.zeros(2 * h, dtype=dtype))
            if cfg.decoder == "conv_attention":
                m.add_param(f"attn{layer}_q", _uniform(rng, (h, f), dtype))
                m.add_param(f"attn{layer}_v", _uniform(rng, (f, h), dtype))
    m.add_param("out_w", _uniform(rng, (h, v), dtype))
    m.add_param("out_b", np.zeros(v, dtype=dtype))
    return m


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count for any valid config."""
    v, e, h, f, k, n = (cfg.vocab_size, cfg.emb_dim, cfg.hidden,
                        cfg.feature_dim, cfg.kernel, cfg.num_layers)
    total = v * e + h * v + v
    if cfg.decoder == "lstm":
        total += 2 * f * h
        for layer in range(1, n + 1):
            in_dim = e if layer == 1 else h
            total += in_dim * 4 * h + h * 4 * h + 4 * h
    else:
        total += f * e
        for layer in range(1, n + 1):
            c_in = 2 * e if layer == 1 else h
            total += k * c_in * 2 * h + 2 * h
        if cfg.decoder == "conv_attention":
            total += n * 2 * h * f
    return total


def receptive_field(cfg: ModelConfig) -> int:
    """Input span visible to one output position: 1 + L*(K-1)."""
    if cfg.decoder == "lstm":
        raise ConfigError("receptive_field is defined for convolutional decoders only")
    return 1 + cfg.num_layers * (cfg.kernel - 1)


def _check_tokens(cfg: ModelConfig, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("tokens must be a nonempty 1-d index array")
    if tokens.size > cfg.max_len + 1:
        raise ValueError(f"sequence of {tokens.size} exceeds max_len+1 = {cfg.max_len + 1}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError("token index out of range")
    return tokens


def _dropout(x: Tensor, p: float, rng) -> Tensor:
    mask = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / np.asarray(1.0 - p, dtype=x.data.dtype)
    return T.mul(x, Tensor(mask))


def attention_layer(h: Tensor, regions: np.ndarray, w_q: Tensor, w_v: Tensor) -> Tensor:
    """Scaled dot-product attention over region features, added to h.

    q = h W_q, scores = q regions^T / sqrt(F), alpha = softmax(scores),
    context = (alpha regions) W_v, output = h + context.
    """
    dtype = h.data.dtype
    regions = np.asarray(regions, dtype=dtype)
    reg = Tensor(regions)
    reg_t = Tensor(np.ascontiguousarray(regions.T))
    q = T.matmul(h, w_q)                                    # [T, F]
    scores = T.scale(T.matmul(q, reg_t), 1.0 / np.sqrt(regions.shape[1]))
    alpha = T.softmax(scores)                               # [T, R]
    context = T.matmul(T.matmul(alpha, reg), w_v)           # [T, H]
    return T.add(h, context)


def conv_forward(model: Model, features, tokens, dropout_rng=None) -> Tensor:
    """Teacher-forced logits [T, vocab] for one token sequence.

    features: (regions [R, F], pooled [F]) for the conditioning image.
    """
    cfg = model.cfg
    tokens = _check_tokens(cfg, tokens)
    regions, pooled = features
    t_len = tokens.size
    dtype = model.params["embedding"].data.dtype

    emb = T.embedding(model.params["embedding"], tokens)     # [T, E]
    img_row = T.matmul(Tensor(np.asarray(pooled, dtype=dtype).reshape(1, -1)),
                       model.params["img_proj"])             # [1, E]
    h = T.concat_last([emb, T.repeat_row(img_row, t_len)])   # [T, 2E]

    for layer in range(1, cfg.num_layers + 1):
        z = T.glu(T.conv1d_causal(h, model.params[f"conv{layer}_w"],
                                  model.params[f"conv{layer}_b"]))
        if cfg.decoder == "conv_attention":
            z = attention_layer(z, regions, model.params[f"attn{layer}_q"],
                                model.params[f"attn{layer}_v"])
        if cfg.dropout_p > 0 and dropout_rng is not None:
            z = _dropout(z, cfg.dropout_p, dropout_rng)
        h = z if layer == 1 else T.add(z, h)

    return T.add(T.matmul(h, model.params["out_w"]),
                 T.repeat_row(_row(model.params["out_b"]), t_len))


def _row(bias: Tensor) -> Tensor:
    # share the underlying buffer so gradients accumulate on the parameter
    view = Tensor(bias.data.reshape(1, -1))
    view.requires_grad = bias.requires_grad
    view._prev = (bias,)

    def back(g):
        if bias.requires_grad:
            bias._accumulate(g.reshape(bias.data.shape))

    view._backward = back
    return view


def lstm_forward(model: Model, features, tokens, dropout_rng=None) -> Tensor:
    """Teacher-forced logits [T, vocab] from the stacked LSTM decoder."""
    cfg = model.cfg
    tokens = _check_tokens(cfg, tokens)
    _, pooled = features
    dtype = model.params["embedding"].data.dtype

    img = Tensor(np.asarray(pooled, dtype=dtype).reshape(1, -1))
    h0 = T.tanh(T.matmul(img, model.params["init_h"]))       # [1, H]
    c0 = T.tanh(T.matmul(img, model.params["init_c"]))
    states = [(h0, c0) for _ in range(cfg.num_layers)]

    rows = []
    for t in range(tokens.size):
        x = T.embedding(model.params["embedding"], tokens[t:t + 1])  # [1, E]
        for layer in range(1, cfg.num_layers + 1):
            h_prev, c_prev = states[layer - 1]
            x, c = _lstm_cell(model, layer, x, h_prev, c_prev)
            states[layer - 1] = (x, c)
        if cfg.dropout_p > 0 and dropout_rng is not None:
            x = _dropout(x, cfg.dropout_p, dropout_rng)
        rows.append(x)

    hidden = T.concat_rows(rows)                             # [T, H]
    return T.add(T.matmul(hidden, model.params["out_w"]),
                 T.repeat_row(_row(model.params["out_b"]), tokens.size))


def _lstm_cell(model: Model, layer: int, x: Tensor, h_prev: Tensor, c_prev: Tensor):
    """One step of gate math; x, h_prev, c_prev are [B, *] rows."""
    h_dim = model.cfg.hidden
    pre = T.add(T.add(T.matmul(x, model.params[f"lstm{layer}_wx"]),
                      T.matmul(h_prev, model.params[f"lstm{layer}_wh"])),
                T.repeat_row(_row(model.params[f"lstm{layer}_b"]), x.data.shape[0]))
    i = T.sigmoid(T.slice_last(pre, 0, h_dim))
    f = T.sigmoid(T.slice_last(pre, h_dim, 2 * h_dim))
    o = T.sigmoid(T.slice_last(pre, 2 * h_dim, 3 * h_dim))
    g = T.tanh(T.slice_last(pre, 3 * h_dim, 4 * h_dim))
    c = T.add(T.mul(f, c_prev), T.mul(i, g))
    return T.mul(o, T.tanh(c)), c


# ---------------------------------------------------------------------------
# Checkpoints

def save_checkpoint(model: Model, path):
    """CKPT container: magic, version, config JSON, then named raw tensors."""
    cfg_blob = json.dumps(asdict(model.cfg)).encode("utf-8")
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
           struct.pack("<I", len(cfg_blob)), cfg_blob,
           struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        encoded = name.encode("utf-8")
        out.append(struct.pack("<H", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<B", p.data.ndim))
        out.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        out.append(p.data.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def load_checkpoint(path, expect_decoder: str | None = None) -> Model:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"checkpoint: bad magic {data[:4]!r}")
    pos = 4
    try:
        (version,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"checkpoint: unsupported version {version}")
        (cfg_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        cfg = ModelConfig(**json.loads(data[pos:pos + cfg_len].decode("utf-8")))
        pos += cfg_len
        if expect_decoder is not None and cfg.decoder != expect_decoder:
            raise ConfigError(
                f"checkpoint holds a {cfg.decoder!r} decoder, expected {expect_decoder!r}")
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        model = init_model(cfg)
        if count != len(model.params):
            raise FormatError(f"checkpoint: expected {len(model.params)} tensors, found {count}")
        seen = set()
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            n = int(np.prod(shape))
            buf = data[pos:pos + 4 * n]
            if len(buf) < 4 * n:
                raise FormatError("checkpoint: truncated tensor data")
            pos += 4 * n
            if name not in model.params or name in seen:
                raise FormatError(f"checkpoint: unknown or duplicate tensor {name!r}")
            seen.add(name)
            if model.params[name].data.shape != shape:
                raise FormatError(f"checkpoint: tensor {name!r} has shape {shape}, "
                                  f"expected {model.params[name].data.shape}")
            model.params[name].data = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    except struct.error as e:
        raise FormatError(f"checkpoint: truncated file: {e}") from e
    except (json.JSONDecodeError, TypeError, UnicodeDecodeError) as e:
        raise FormatError(f"checkpoint: bad config blob: {e}") from e
    return model
