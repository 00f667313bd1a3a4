"""TyphoFormer network built on the autodiff tensors.

Data flow for one window (all arrays batched with a leading axis):

    raw features (T, 22) --z-score--> x
    prompt mean (d_txt) --affine--> p            (project_prompt)
    gate = sigmoid([x_t; p] W_g + b_g)
    z_t  = gate * x_t + (1 - gate) * p           (pgf_fuse)
    z --W_in + sinusoidal PE--> pre-norm encoder layers --> h_1..h_T
    y_0 = last observed position; y_k = y_{k-1} + MLP([y_{k-1}; h_T])

The decoder works on normalized positions and predicts residual steps, so a
zero output layer reproduces the persistence forecast exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .embedding import PromptEmbedding
from .features import N_FEATURES, NormalizationStats, Window, wrap_lon

PROMPT_MODES = ("last", "per_step")


@dataclass(frozen=True)
class ModelConfig:
    d_feat: int = N_FEATURES
    d_txt: int = 64
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 128
    T: int = 8
    K: int = 4
    layer_norm_eps: float = ad.LAYER_NORM_EPS
    prompt_mode: str = "last"
    # Test hook: permutation-equivariance checks switch this off.
    positional_encoding: bool = True

    def __post_init__(self):
        for f in ("d_feat", "d_txt", "d_model", "n_layers", "n_heads", "d_ff", "T", "K"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.layer_norm_eps <= 0:
            raise ValueError("layer_norm_eps must be positive")
        if self.prompt_mode not in PROMPT_MODES:
            raise ValueError(f"prompt_mode must be one of {PROMPT_MODES}")

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, m = cfg.d_feat, cfg.d_model
    shapes = {
        "proj_txt.W": (cfg.d_txt, d),
        "proj_txt.b": (d,),
        "pgf.W_g": (2 * d, d),
        "pgf.b_g": (d,),
        "input.W": (d, m),
        "input.b": (m,),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1.gamma": (m,),
            p + "ln1.beta": (m,),
            p + "attn.W_q": (m, m),
            p + "attn.W_k": (m, m),
            p + "attn.W_v": (m, m),
            p + "attn.W_o": (m, m),
            p + "ln2.gamma": (m,),
            p + "ln2.beta": (m,),
            p + "ffn.W_1": (m, cfg.d_ff),
            p + "ffn.b_1": (cfg.d_ff,),
            p + "ffn.W_2": (cfg.d_ff, m),
            p + "ffn.b_2": (m,),
        })
    shapes.update({
        "decoder.W_d1": (2 + m, m),
        "decoder.b_d1": (m,),
        "decoder.W_d2": (m, 2),
        "decoder.b_d2": (2,),
    })
    return shapes


class ModelParams:
    """Named trainable tensors."""

    def __init__(self, tensors: Mapping[str, Tensor]):
        self.tensors: dict[str, Tensor] = dict(tensors)
        for name, t in self.tensors.items():
            t.name = name
            t.requires_grad = True

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(t.data.copy()) for k, t in self.tensors.items()})

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def set(self, name: str, value) -> None:
        t = self.tensors[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != t.shape:
            value = np.broadcast_to(value, t.shape)
        t.data = value.copy()

    def n_values(self) -> int:
        return sum(t.size for t in self.tensors.values())

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "ModelParams":
        """Xavier-uniform matrices, zero biases, unit layer-norm scales.

        The decoder output layer starts at zero so the untrained model is
        the persistence forecast.
        """
        tensors = {}
        for name, shape in param_shapes(cfg).items():
            leaf = name.rsplit(".", 1)[1]
            if leaf == "gamma":
                value = np.ones(shape)
            elif len(shape) == 1 or name.startswith("decoder.W_d2"):
                value = np.zeros(shape)
            else:
                limit = math.sqrt(6.0 / (shape[0] + shape[1]))
                value = rng.uniform(-limit, limit, size=shape)
            tensors[name] = Tensor(value)
        return cls(tensors)

    @classmethod
    def from_arrays(cls, cfg: ModelConfig, arrays: Mapping[str, np.ndarray]) -> "ModelParams":
        expected = param_shapes(cfg)
        missing = set(expected) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint lacks parameters: {sorted(missing)}")
        tensors = {}
        for name, shape in expected.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ad.ShapeMismatch(f"load {name}", arr.shape, shape)
            tensors[name] = Tensor(arr.copy())
        return cls(tensors)


# -- stages ------------------------------------------------------------------

def project_prompt(p_mean_txt, params: ModelParams) -> Tensor:
    """Affine map from the text-embedding space to the feature space."""
    p = ad.as_tensor(p_mean_txt)
    W = params["proj_txt.W"]
    if p.shape[-1] != W.shape[0]:
        raise ad.ShapeMismatch("project_prompt", p.shape, W.shape)
    return p @ W + params["proj_txt.b"]


def pgf_fuse(x, p_mean, params: ModelParams, return_gate: bool = False):
    """Prompt-aware gated fusion.

    ``x`` is ``(..., T, d)``; ``p_mean`` is ``(..., d)`` (one prompt shared by
    every step) or ``(..., T, d)`` (one per step). The same gate weights
    ``x_t`` and, complemented, the prompt.
    """
    x, p = ad.as_tensor(x), ad.as_tensor(p_mean)
    d = params["pgf.b_g"].shape[0]
    if x.shape[-1] != d or p.shape[-1] != d:
        raise ad.ShapeMismatch("pgf_fuse", x.shape, p.shape)
    if p.ndim == x.ndim - 1:
        if p.shape[:-1] != x.shape[:-2]:
            raise ad.ShapeMismatch("pgf_fuse", x.shape, p.shape)
        p = ad.broadcast_to(ad.reshape(p, p.shape[:-1] + (1, d)), x.shape)
    elif p.shape != x.shape:
        raise ad.ShapeMismatch("pgf_fuse", x.shape, p.shape)
    gate = ad.sigmoid(ad.concat([x, p], axis=-1) @ params["pgf.W_g"] + params["pgf.b_g"])
    out = gate * x + (1.0 - gate) * p
    return (out, gate) if return_gate else out


def positional_encoding(T: int, d_model: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _layer_norm(h: Tensor, params: ModelParams, prefix: str, eps: float) -> Tensor:
    return ad.layer_norm(h, eps) * params[prefix + "gamma"] + params[prefix + "beta"]


def self_attention(h: Tensor, params: ModelParams, prefix: str, n_heads: int):
    """Bidirectional multi-head attention on ``(B, T, D)``; returns (out, weights)."""
    B, T, D = h.shape
    dh = D // n_heads

    def heads(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (B, T, n_heads, dh)), (0, 2, 1, 3))

    q = heads(h @ params[prefix + "W_q"])
    k = heads(h @ params[prefix + "W_k"])
    v = heads(h @ params[prefix + "W_v"])
    weights = ad.softmax((q @ ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh)), axis=-1)
    ctx = ad.reshape(ad.transpose(weights @ v, (0, 2, 1, 3)), (B, T, D))
    return ctx @ params[prefix + "W_o"], weights


def encode(z, params: ModelParams, cfg: ModelConfig, return_attention: bool = False):
    """``(B, T, d_feat)`` or ``(T, d_feat)`` -> same leading shape with d_model."""
    z = ad.as_tensor(z)
    if z.shape[-1] != cfg.d_feat or z.ndim not in (2, 3):
        raise ad.ShapeMismatch("encode", z.shape, (cfg.T, cfg.d_feat))
    squeeze = z.ndim == 2
    if squeeze:
        z = ad.reshape(z, (1,) + z.shape)
    T = z.shape[1]
    h = z @ params["input.W"] + params["input.b"]
    if cfg.positional_encoding:
        h = h + positional_encoding(T, cfg.d_model)
    attention = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        attn_out, weights = self_attention(
            _layer_norm(h, params, p + "ln1.", cfg.layer_norm_eps), params, p + "attn.", cfg.n_heads
        )
        attention.append(weights.data)
        h = h + attn_out
        f = _layer_norm(h, params, p + "ln2.", cfg.layer_norm_eps)
        hidden = ad.relu(f @ params[p + "ffn.W_1"] + params[p + "ffn.b_1"])
        h = h + (hidden @ params[p + "ffn.W_2"] + params[p + "ffn.b_2"])
    if squeeze:
        h = ad.reshape(h, h.shape[1:])
    return (h, attention) if return_attention else h


def decode(h_T, last_pos, K: int, params: ModelParams) -> Tensor:
    """Unroll ``K`` residual steps from ``last_pos`` (normalized lat/lon).

    Each step feeds the previous prediction, not ground truth.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    h_T, y = ad.as_tensor(h_T), ad.as_tensor(last_pos)
    outputs = []
    for _ in range(K):
        hidden = ad.tanh(ad.concat([y, h_T], axis=-1) @ params["decoder.W_d1"] + params["decoder.b_d1"])
        y = y + (hidden @ params["decoder.W_d2"] + params["decoder.b_d2"])
        outputs.append(y)
    return ad.stack(outputs, axis=-2)


def forward_normalized(x_norm, p_txt, last_norm, params: ModelParams, cfg: ModelConfig,
                       fuse: bool = True, K: int | None = None) -> Tensor:
    """Normalized features and raw prompt means in, normalized positions out.

    ``fuse=False`` bypasses the gate (z = x), used to measure what the
    prompt contributes.
    """
    x = ad.as_tensor(x_norm)
    z = pgf_fuse(x, project_prompt(p_txt, params), params) if fuse else x
    h = encode(z, params, cfg)
    return decode(h[..., -1, :], last_norm, cfg.K if K is None else K, params)


# -- bundle with normalization ---------------------------------------------

@dataclass
class TyphoFormer:
    config: ModelConfig
    params: ModelParams
    stats: NormalizationStats

    @classmethod
    def initialize(cls, config: ModelConfig, stats: NormalizationStats, seed: int = 0):
        return cls(config, ModelParams.init(config, np.random.default_rng(seed)), stats)

    # inputs
    def normalize_inputs(self, windows: Sequence[Window]) -> np.ndarray:
        return self.stats.normalize(np.stack([w.inputs for w in windows]))

    def normalize_positions(self, pos: np.ndarray) -> np.ndarray:
        return (pos - self.stats.position_mean) / self.stats.position_std

    def last_positions(self, windows: Sequence[Window]) -> np.ndarray:
        return np.stack([w.last_position for w in windows])

    def to_degrees(self, pred_norm: np.ndarray, last_deg: np.ndarray, last_norm: np.ndarray) -> np.ndarray:
        """Residual denormalization: exact persistence when the steps are zero."""
        steps = (pred_norm - last_norm[..., None, :]) * self.stats.position_std
        out = last_deg[..., None, :] + steps
        out[..., 1] = wrap_lon(out[..., 1])
        return out

    def predict_arrays(self, x_raw: np.ndarray, p_txt: np.ndarray, last_deg: np.ndarray,
                       fuse: bool = True, K: int | None = None) -> np.ndarray:
        x = self.stats.normalize(x_raw)
        last_norm = self.normalize_positions(last_deg)
        with ad.no_grad():
            pred = forward_normalized(x, p_txt, last_norm, self.params, self.config, fuse=fuse, K=K)
        return self.to_degrees(pred.data, last_deg, last_norm)

    def predict(self, windows: Sequence[Window], prompt_vectors: np.ndarray,
                fuse: bool = True, batch_size: int = 256) -> np.ndarray:
        """(N, K, 2) forecasts in degrees."""
        if not windows:
            return np.zeros((0, self.config.K, 2))
        out = []
        for i in range(0, len(windows), batch_size):
            chunk = windows[i:i + batch_size]
            out.append(self.predict_arrays(
                np.stack([w.inputs for w in chunk]),
                prompt_vectors[i:i + batch_size],
                self.last_positions(chunk),
                fuse=fuse,
            ))
        return np.concatenate(out)

    # persistence
    def save(self, path: str | Path) -> None:
        arrays = dict(self.params.arrays())
        arrays["norm.mean"] = self.stats.mean
        arrays["norm.std"] = self.stats.std
        ad.save_tensors(path, arrays)

    @classmethod
    def load(cls, path: str | Path, config: ModelConfig) -> "TyphoFormer":
        arrays = ad.load_tensors(path)
        try:
            stats = NormalizationStats(arrays.pop("norm.mean"), arrays.pop("norm.std"))
        except KeyError:
            raise ad.CheckpointError(f"{path}: no normalization statistics") from None
        return cls(config, ModelParams.from_arrays(config, arrays), stats)


def forward(window: Window, prompt, model: TyphoFormer, fuse: bool = True) -> np.ndarray:
    """Single-window forecast, ``(K, 2)`` degrees.

    ``prompt`` is the embedding of the window's last record (``'last'`` mode)
    or one embedding per input record (``'per_step'``); bare mean vectors
    are accepted too.
    """
    if isinstance(prompt, PromptEmbedding):
        p = prompt.mean
    elif isinstance(prompt, (list, tuple)):
        p = np.stack([e.mean if isinstance(e, PromptEmbedding) else e for e in prompt])
    else:
        p = np.asarray(prompt)
    p = p[None]
    return model.predict_arrays(window.inputs[None], p, window.last_position[None], fuse=fuse)[0]


def config_fields() -> list[str]:
    return [f.name for f in fields(ModelConfig)]
