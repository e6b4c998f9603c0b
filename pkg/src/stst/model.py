"""The STST network: Time2Vec, spatiotemporal tokens, transformer encoder, LSTM/MLP head."""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import NormStats, ShapeError, Tensor

CHECKPOINT_FORMAT = 1

NORM_TYPES = ("batch", "layer", "power")
PLACEMENTS = ("pre", "post")
HEADS = ("mlp", "lstm_mlp")
EMBEDDINGS = ("spatiotemporal", "temporal")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    context_window: int = 32
    n_features: int = 24
    n_time: int = 4
    d_model: int = 64
    n_encoders: int = 4
    n_heads: int = 4
    d_ff: int = 2048
    ff_dropout: float = 0.3
    attn_dropout: float = 0.1
    n_lstm_layers: int = 2
    d_lstm_hidden: int = 256
    norm_type: str = "power"
    norm_placement: str = "post"
    head: str = "lstm_mlp"
    time2vec_dim: int = 8
    embedding: str = "spatiotemporal"

    def validate(self) -> ModelConfig:
        for name in ("context_window", "n_features", "n_time", "d_model", "n_encoders", "n_heads",
                     "d_ff", "n_lstm_layers", "d_lstm_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.time2vec_dim < 2:
            raise ConfigError("time2vec_dim must be at least 2")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        for name in ("ff_dropout", "attn_dropout"):
            if not 0.0 <= getattr(self, name) <= 0.5:
                raise ConfigError(f"{name} must lie in [0, 0.5]")
        for name, allowed in (("norm_type", NORM_TYPES), ("norm_placement", PLACEMENTS),
                              ("head", HEADS), ("embedding", EMBEDDINGS)):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        return self

    @property
    def n_tokens(self) -> int:
        if self.embedding == "temporal":
            return self.context_window
        return self.context_window * self.n_features

    @property
    def context_width(self) -> int:
        """Width C of each per-timestep row handed to the classifier head."""
        if self.embedding == "temporal":
            return self.d_model
        return self.n_features * self.d_model

    @property
    def encoding_dim(self) -> int:
        # additive positional encoding in temporal mode must match d_model
        return self.d_model if self.embedding == "temporal" else self.time2vec_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()


ACL18_CONFIG = ModelConfig()
KDD17_CONFIG = ModelConfig(n_encoders=8, n_lstm_layers=3)


def _parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[tuple, int | None]]:
    """name -> (shape, fan_in); fan_in None marks biases and affine terms."""
    D, k, H = cfg.d_model, cfg.encoding_dim, cfg.d_lstm_hidden
    shapes: dict[str, tuple[tuple, int | None]] = {
        "t2v.w": ((cfg.n_time, k), cfg.n_time),
        "t2v.b": ((k,), None),
    }
    if cfg.embedding == "temporal":
        shapes["embed.w"] = ((cfg.n_features, D), cfg.n_features)
    else:
        shapes["embed.w"] = ((1 + k, D), 1 + k)
    shapes["embed.b"] = ((D,), None)
    for i in range(cfg.n_encoders):
        p = f"enc{i}."
        for proj in ("q", "k", "v", "o"):
            shapes[p + "w" + proj] = ((D, D), D)
            shapes[p + "b" + proj] = ((D,), None)
        shapes[p + "ff1.w"] = ((D, cfg.d_ff), D)
        shapes[p + "ff1.b"] = ((cfg.d_ff,), None)
        shapes[p + "ff2.w"] = ((cfg.d_ff, D), cfg.d_ff)
        shapes[p + "ff2.b"] = ((D,), None)
        for norm in ("norm1", "norm2"):
            shapes[p + norm + ".gamma"] = ((D,), None)
            shapes[p + norm + ".beta"] = ((D,), None)
    C = cfg.context_width
    if cfg.head == "lstm_mlp":
        for layer in range(cfg.n_lstm_layers):
            width = C if layer == 0 else H
            shapes[f"lstm{layer}.wx"] = ((width, 4 * H), width)
            shapes[f"lstm{layer}.wh"] = ((H, 4 * H), H)
            shapes[f"lstm{layer}.b"] = ((4 * H,), None)
        shapes["head.w"] = ((H, 1), H)
    else:
        shapes["mlp.w"] = ((C, H), C)
        shapes["mlp.b"] = ((H,), None)
        shapes["head.w"] = ((H, 1), H)
    shapes["head.b"] = ((1,), None)
    return shapes


class StstModel:
    """Parameters, normalization statistics and the forward pass for one config."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config.validate()
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        for name, (shape, fan_in) in _parameter_shapes(config).items():
            if fan_in is not None:
                self.params[name] = T.uniform_init(rng, shape, fan_in)
            elif name.endswith(".gamma"):
                self.params[name] = T.ones(shape)
            else:
                self.params[name] = T.zeros(shape)
        self.stats: dict[str, NormStats] = {}
        if config.norm_type != "layer":
            for i in range(config.n_encoders):
                for norm in ("norm1", "norm2"):
                    self.stats[f"enc{i}.{norm}"] = NormStats.create(config.d_model)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- components -----------------------------------------------------------

    def time2vec(self, time_rows: Tensor) -> Tensor:
        """One linear coordinate followed by sine coordinates of the date features."""
        z = T.matmul(time_rows, self.params["t2v.w"]) + self.params["t2v.b"]
        return T.concat([z[..., :1], T.sin(z[..., 1:])], axis=-1)

    def embed(self, x: Tensor) -> Tensor:
        cfg = self.config
        if x.shape[-1] != cfg.n_time + cfg.n_features:
            raise ShapeError(f"expected {cfg.n_time + cfg.n_features} input columns, got {x.shape[-1]}")
        if x.shape[-2] != cfg.context_window:
            raise ShapeError(f"expected {cfg.context_window} rows, got {x.shape[-2]}")
        B, N, F = x.shape[0], cfg.context_window, cfg.n_features
        pos = self.time2vec(x[:, :, :cfg.n_time])
        feats = x[:, :, cfg.n_time:]
        if cfg.embedding == "temporal":
            return T.dense_forward(feats, self.params["embed.w"], self.params["embed.b"]) + pos
        k = cfg.time2vec_dim
        scalars = T.reshape(feats, (B, N * F, 1))
        pos_tok = T.reshape(T.broadcast_to(T.reshape(pos, (B, N, 1, k)), (B, N, F, k)), (B, N * F, k))
        tokens = T.concat([scalars, pos_tok], axis=-1)
        self._trace("tokens", tokens)
        return T.dense_forward(tokens, self.params["embed.w"], self.params["embed.b"])

    def _norm(self, name: str, h: Tensor, training: bool) -> Tensor:
        return T.normalize(h, self.config.norm_type, self.params[name + ".gamma"],
                           self.params[name + ".beta"], self.stats.get(name), training)

    def attention(self, i: int, h: Tensor, training: bool, rng) -> Tensor:
        cfg, p = self.config, self.params
        B, L, D = h.shape
        heads, dh = cfg.n_heads, cfg.d_model // cfg.n_heads

        def split(t):
            return T.transpose(T.reshape(t, (B, L, heads, dh)), (0, 2, 1, 3))

        q = split(T.dense_forward(h, p[f"enc{i}.wq"], p[f"enc{i}.bq"]))
        k = split(T.dense_forward(h, p[f"enc{i}.wk"], p[f"enc{i}.bk"]))
        v = split(T.dense_forward(h, p[f"enc{i}.wv"], p[f"enc{i}.bv"]))
        weights = T.softmax(T.matmul(q, T.swap_last(k)) * (1.0 / np.sqrt(dh)))
        self._trace("attention", weights, append=True)
        weights = T.dropout(weights, cfg.attn_dropout, rng, training)
        ctx = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (B, L, D))
        return T.dense_forward(ctx, p[f"enc{i}.wo"], p[f"enc{i}.bo"])

    def feed_forward(self, i: int, h: Tensor, training: bool, rng) -> Tensor:
        p = self.params
        hidden = T.relu(T.dense_forward(h, p[f"enc{i}.ff1.w"], p[f"enc{i}.ff1.b"]))
        hidden = T.dropout(hidden, self.config.ff_dropout, rng, training)
        return T.dense_forward(hidden, p[f"enc{i}.ff2.w"], p[f"enc{i}.ff2.b"])

    def encode(self, h: Tensor, training: bool, rng) -> Tensor:
        post = self.config.norm_placement == "post"
        for i in range(self.config.n_encoders):
            n1, n2 = f"enc{i}.norm1", f"enc{i}.norm2"
            if post:
                h = self._norm(n1, h + self.attention(i, h, training, rng), training)
                h = self._norm(n2, h + self.feed_forward(i, h, training, rng), training)
            else:
                h = h + self.attention(i, self._norm(n1, h, training), training, rng)
                h = h + self.feed_forward(i, self._norm(n2, h, training), training, rng)
        return h

    def restack(self, y: Tensor) -> Tensor:
        """(B, N*F, D) token outputs -> (B, N, F*D), one row per timestep."""
        B, L, D = y.shape
        F = self.config.n_features
        if L % F:
            raise ShapeError(f"{L} tokens are not divisible by {F} features")
        return T.reshape(y, (B, L // F, F * D))

    def lstm(self, rows: Tensor) -> Tensor:
        """Stacked unidirectional LSTM from a zero state; returns the final hidden state."""
        B, N, _ = rows.shape
        H = self.config.d_lstm_hidden
        seq = rows
        for layer in range(self.config.n_lstm_layers):
            wx, wh, b = (self.params[f"lstm{layer}.{n}"] for n in ("wx", "wh", "b"))
            xg = T.matmul(seq, wx) + b
            h = Tensor(np.zeros((B, H)))
            c = Tensor(np.zeros((B, H)))
            outputs = []
            for t in range(N):
                gates = xg[:, t, :] + T.matmul(h, wh)
                i_g = T.sigmoid(gates[:, :H])
                f_g = T.sigmoid(gates[:, H:2 * H])
                g_g = T.tanh(gates[:, 2 * H:3 * H])
                o_g = T.sigmoid(gates[:, 3 * H:])
                c = f_g * c + i_g * g_g
                h = o_g * T.tanh(c)
                outputs.append(T.reshape(h, (B, 1, H)))
            if layer + 1 < self.config.n_lstm_layers:
                seq = T.concat(outputs, axis=1)
        return h

    def classify(self, rows: Tensor) -> Tensor:
        p = self.params
        if self.config.head == "lstm_mlp":
            last = self.lstm(rows)
        else:
            last = T.relu(T.dense_forward(rows[:, -1, :], p["mlp.w"], p["mlp.b"]))
        logit = T.dense_forward(last, p["head.w"], p["head.b"])
        return T.reshape(T.sigmoid(logit), (rows.shape[0],))

    # -- full pass ----------------------------------------------------------------

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None,
                trace: dict | None = None) -> Tensor:
        """Probabilities of an up move for a batch ``x`` of shape (B, N, T+F)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == 2:
            x = T.reshape(x, (1,) + x.shape)
        self._trace_into = trace
        try:
            e = self.embed(x)
            self._trace("embedded", e)
            y = self.encode(e, training, rng)
            self._trace("encoded", y)
            rows = y if self.config.embedding == "temporal" else self.restack(y)
            self._trace("restacked", rows)
            out = self.classify(rows)
            self._trace("output", out)
            return out
        finally:
            self._trace_into = None

    __call__ = forward

    _trace_into: dict | None = None

    def _trace(self, key: str, t: Tensor, append: bool = False) -> None:
        if self._trace_into is None:
            return
        if append:
            self._trace_into.setdefault(key, []).append(t.data)
        else:
            self._trace_into[key] = t.data

    def predict_proba(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode probabilities as a plain array."""
        out = [self.forward(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0)

    # -- persistence --------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"param/{k}": v.data for k, v in self.params.items()}
        for k, s in self.stats.items():
            arrays[f"stats/{k}/mean"] = s.mean
            arrays[f"stats/{k}/var"] = s.var
            arrays[f"stats/{k}/quad"] = s.quad
        return arrays

    def copy(self) -> StstModel:
        other = StstModel.__new__(StstModel)
        other.config = self.config
        other.params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        other.stats = {k: s.copy() for k, s in self.stats.items()}
        return other


def save_checkpoint(model: StstModel, path) -> None:
    """Write config and every named tensor to an ``.npz`` container."""
    arrays = dict(model.state_arrays())
    meta = json.dumps({"format": CHECKPOINT_FORMAT, "config": model.config.to_dict()}, sort_keys=True)
    arrays["meta"] = np.frombuffer(meta.encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> StstModel:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"{path}: unsupported checkpoint format {meta.get('format')}")
        model = StstModel(ModelConfig.from_dict(meta["config"]))
        for name, t in model.params.items():
            arr = z[f"param/{name}"]
            if arr.shape != t.shape:
                raise ConfigError(f"{path}: {name} has shape {arr.shape}, expected {t.shape}")
            t.data = arr.astype(np.float64)
        for name, s in model.stats.items():
            s.mean, s.var, s.quad = (z[f"stats/{name}/{n}"].astype(np.float64) for n in ("mean", "var", "quad"))
    return model
