"""Patch-based transformer for EV charging event prediction, and a DNN baseline.

A load window of ``T`` minutes is cut into ``N`` overlapping patches of
length ``L``; each patch is projected to ``D`` features, offset by fixed
sinusoidal positions and passed through ``n_layers`` post-norm encoder
blocks (multi-head self-attention, then a ReLU feed-forward network). The
flattened ``N x D`` representation feeds one sigmoid output per future
minute ``m = 1..M``.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensorkit as tk
from .tensorkit import Tensor


class ConfigError(ValueError):
    """A configuration violates a structural constraint."""


@dataclass(frozen=True)
class ModelConfig:
    T: int = 180
    L: int = 20
    stride: int = 10
    D: int = 64
    H: int = 4
    D_ffn: int = 128
    n_layers: int = 2
    M: int = 10
    head_bias: bool = True
    ln_eps: float = 1e-5

    @property
    def N(self) -> int:
        return (self.T - self.L) // self.stride + 1

    @property
    def D_m(self) -> int:
        return self.D // self.H

    def validate(self) -> "ModelConfig":
        for name in ("T", "L", "stride", "D", "H", "D_ffn", "n_layers", "M"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.L > self.T:
            raise ConfigError(f"patch length L={self.L} exceeds input length T={self.T}")
        if (self.T - self.L) % self.stride:
            raise ConfigError(
                f"T={self.T}: (T - L) = {self.T - self.L} is not divisible by stride={self.stride}"
            )
        if self.N < 2:
            raise ConfigError(f"T={self.T}: only N={self.N} patch; need at least 2")
        if self.D % self.H:
            raise ConfigError(f"D={self.D} is not divisible by H={self.H}")
        if self.D < 2:
            raise ConfigError("D must be >= 2 for layer normalisation")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class BaselineConfig:
    T: int = 180
    hidden: int = 128
    M: int = 10

    def validate(self) -> "BaselineConfig":
        for name in ("T", "hidden", "M"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def patch_count(T: int, L: int, stride: int) -> int:
    return (T - L) // stride + 1


def patchify(x: np.ndarray, L: int, stride: int) -> np.ndarray:
    """Cut window(s) of shape ``(..., T)`` into ``(..., N, L)`` overlapping patches."""
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[-1]
    if L > T or (T - L) % stride:
        raise ConfigError(f"cannot patch T={T} with L={L}, stride={stride}")
    return np.ascontiguousarray(sliding_window_view(x, L, axis=-1)[..., ::stride, :])


def sinusoidal_table(N: int, D: int) -> np.ndarray:
    """Fixed positions: even column ``2i`` is ``sin(n / 10000**(2i/D))``, odd is the cosine."""
    pos = np.arange(N)[:, None]
    i2 = np.arange(0, D, 2)
    angle = pos / np.power(10000.0, i2 / D)
    table = np.zeros((N, D))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : D // 2])
    return table


def embed(patches, kappa) -> Tensor:
    return tk.matmul(patches, kappa)


def add_positional(chi, b_pos: np.ndarray) -> Tensor:
    return tk.add_op(chi, b_pos)


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return t.transpose(*axes)


def multi_head_attention(chi, W_Q, W_K, W_V, W_O, *, return_scores: bool = False):
    """Scaled dot-product self-attention over patches.

    ``chi`` is ``(..., N, D)``; ``W_Q``, ``W_K``, ``W_V`` are ``(H, D, D_m)``
    and ``W_O`` is ``(D, D)``. Head outputs are concatenated along the
    feature axis and projected by ``W_O``.
    """
    chi = chi if isinstance(chi, Tensor) else Tensor(chi)
    lead, (N, D) = chi.shape[:-2], chi.shape[-2:]
    H, _, D_m = np.shape(W_Q.data if isinstance(W_Q, Tensor) else W_Q)
    nd = len(lead)

    def project(W):
        # all heads in one GEMM: (D, H*D_m), then split to (..., H, N, D_m)
        stacked = tk.transpose_op(W, axes=(1, 0, 2)).reshape(D, H * D_m)
        y = (chi @ stacked).reshape(lead + (N, H, D_m))
        return y.transpose(*range(nd), nd + 1, nd, nd + 2)

    q, k, v = project(W_Q), project(W_K), project(W_V)
    scores = tk.softmax_rows((q @ _swap_last(k)) * (1.0 / np.sqrt(D_m)))
    heads = scores @ v  # (..., H, N, D_m)
    merged = heads.transpose(*range(nd), nd + 1, nd, nd + 2).reshape(lead + (N, H * D_m))
    out = merged @ W_O
    return (out, scores.data) if return_scores else out


def feed_forward(psi, Phi1, b1, Phi2, b2) -> Tensor:
    return tk.relu(tk.matmul(psi, Phi1) + b1) @ Phi2 + b2


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class DctEv:
    """The patch transformer with its parameters.

    ``params`` maps names to float64 arrays; the positional table is a
    constant and is never part of ``params``.
    """

    kind = "dctev"

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.config = config.validate()
        self.b_pos = sinusoidal_table(config.N, config.D)
        self.params = params if params is not None else self.init_params(config, seed)
        self._check_shapes()

    @staticmethod
    def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
        shapes = {"kappa": (cfg.L, cfg.D)}
        for layer in range(cfg.n_layers):
            p = f"layer{layer}."
            shapes.update(
                {
                    p + "W_Q": (cfg.H, cfg.D, cfg.D_m),
                    p + "W_K": (cfg.H, cfg.D, cfg.D_m),
                    p + "W_V": (cfg.H, cfg.D, cfg.D_m),
                    p + "W_O": (cfg.D, cfg.D),
                    p + "ln1_gain": (cfg.D,),
                    p + "ln1_bias": (cfg.D,),
                    p + "Phi1": (cfg.D, cfg.D_ffn),
                    p + "b1": (cfg.D_ffn,),
                    p + "Phi2": (cfg.D_ffn, cfg.D),
                    p + "b2": (cfg.D,),
                    p + "ln2_gain": (cfg.D,),
                    p + "ln2_bias": (cfg.D,),
                }
            )
        shapes["head_W"] = (cfg.N * cfg.D, cfg.M)
        if cfg.head_bias:
            shapes["head_b"] = (cfg.M,)
        return shapes

    @classmethod
    def init_params(cls, cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in cls.param_shapes(cfg).items():
            leaf = name.split(".")[-1]
            if leaf.endswith("_gain"):
                params[name] = np.ones(shape)
            elif len(shape) == 1:
                params[name] = np.zeros(shape)
            else:
                fan_in, fan_out = shape[-2], shape[-1]
                params[name] = glorot(rng, fan_in, fan_out, shape)
        return params

    def _check_shapes(self) -> None:
        expected = self.param_shapes(self.config)
        if set(expected) != set(self.params):
            raise ConfigError(f"parameter names differ from config: {sorted(set(expected) ^ set(self.params))}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise tk.DimensionError(f"{name}: expected shape {shape}, got {self.params[name].shape}")

    def leaves(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def encode_graph(self, x: np.ndarray, p: dict[str, Tensor], b_pos: np.ndarray | None = None, scores=None) -> Tensor:
        """Build the encoder graph for windows ``x`` of shape ``(..., T)``; returns ``(..., N, D)``."""
        cfg = self.config
        if np.shape(x)[-1] != cfg.T:
            raise tk.DimensionError(f"input windows have length {np.shape(x)[-1]}, model expects T={cfg.T}")
        return self.encode_patches(patchify(x, cfg.L, cfg.stride), p, b_pos, scores)

    def encode_patches(self, patches: np.ndarray, p: dict[str, Tensor], b_pos: np.ndarray | None = None, scores=None) -> Tensor:
        cfg = self.config
        h = add_positional(embed(patches, p["kappa"]), self.b_pos if b_pos is None else b_pos)
        for layer in range(cfg.n_layers):
            q = f"layer{layer}."
            att = multi_head_attention(
                h, p[q + "W_Q"], p[q + "W_K"], p[q + "W_V"], p[q + "W_O"], return_scores=scores is not None
            )
            if scores is not None:
                att, alpha = att
                scores.append(alpha)
            h = tk.layer_norm(h + att, p[q + "ln1_gain"], p[q + "ln1_bias"], cfg.ln_eps)
            ff = feed_forward(h, p[q + "Phi1"], p[q + "b1"], p[q + "Phi2"], p[q + "b2"])
            h = tk.layer_norm(h + ff, p[q + "ln2_gain"], p[q + "ln2_bias"], cfg.ln_eps)
        return h

    def forward_graph(self, x: np.ndarray, p: dict[str, Tensor]) -> Tensor:
        cfg = self.config
        z = self.encode_graph(x, p)
        lead = z.shape[:-2]
        logits = z.reshape(lead + (cfg.N * cfg.D,)) @ p["head_W"]
        if cfg.head_bias:
            logits = logits + p["head_b"]
        return tk.sigmoid(logits)

    def encode(self, x: np.ndarray) -> np.ndarray:
        return self.encode_graph(x, self.leaves()).data

    def attention_scores(self, x: np.ndarray) -> list[np.ndarray]:
        """Attention matrices ``(..., H, N, N)`` of every layer for windows ``x``."""
        scores: list[np.ndarray] = []
        self.encode_graph(x, self.leaves(), scores=scores)
        return scores

    def predict_proba(self, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        return _batched_predict(self, x, batch_size)


class BaselineMLP:
    """Fully connected baseline: ``T -> hidden -> hidden -> M`` with ReLU and sigmoid outputs."""

    kind = "dnn"

    def __init__(self, config: BaselineConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.config = config.validate()
        self.params = params if params is not None else self.init_params(config, seed)

    @staticmethod
    def param_shapes(cfg: BaselineConfig) -> dict[str, tuple[int, ...]]:
        return {
            "W1": (cfg.T, cfg.hidden),
            "b1": (cfg.hidden,),
            "W2": (cfg.hidden, cfg.hidden),
            "b2": (cfg.hidden,),
            "W3": (cfg.hidden, cfg.M),
            "b3": (cfg.M,),
        }

    @classmethod
    def init_params(cls, cfg: BaselineConfig, seed: int = 0) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        return {
            k: np.zeros(s) if len(s) == 1 else glorot(rng, s[0], s[1], s)
            for k, s in cls.param_shapes(cfg).items()
        }

    def leaves(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def forward_graph(self, x: np.ndarray, p: dict[str, Tensor]) -> Tensor:
        if np.shape(x)[-1] != self.config.T:
            raise tk.DimensionError(f"input windows have length {np.shape(x)[-1]}, model expects T={self.config.T}")
        h = tk.relu(tk.matmul(np.asarray(x, dtype=np.float64), p["W1"]) + p["b1"])
        h = tk.relu(h @ p["W2"] + p["b2"])
        return tk.sigmoid(h @ p["W3"] + p["b3"])

    def predict_proba(self, x: np.ndarray, batch_size: int = 4096) -> np.ndarray:
        return _batched_predict(self, x, batch_size)


def baseline_mlp_forward(model: BaselineMLP, x: np.ndarray) -> np.ndarray:
    return model.predict_proba(x)


def _batched_predict(model, x: np.ndarray, batch_size: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return model.forward_graph(x[None, :], model.leaves()).data[0]
    leaves = model.leaves()
    out = [model.forward_graph(x[i : i + batch_size], leaves).data for i in range(0, len(x), batch_size)]
    if not out:
        return np.zeros((0, model.config.M))
    return np.concatenate(out)


def loss_and_grads(model, x: np.ndarray, y: np.ndarray, reduction: str = "mean", pos_weight: float = 1.0):
    """BCE loss of ``model`` on a batch and the gradient for every parameter."""
    leaves = model.leaves(requires_grad=True)
    loss = tk.bce_loss(model.forward_graph(x, leaves), y, reduction=reduction, pos_weight=pos_weight)
    loss.backward()
    grads = {k: (np.zeros_like(t.data) if t.grad is None else t.grad) for k, t in leaves.items()}
    return loss.item(), grads


def model_from_meta(meta: dict, params: dict[str, np.ndarray]):
    if meta["kind"] == DctEv.kind:
        return DctEv(ModelConfig.from_dict(meta["model_config"]), params)
    if meta["kind"] == BaselineMLP.kind:
        return BaselineMLP(BaselineConfig.from_dict(meta["model_config"]), params)
    raise ConfigError(f"unknown model kind {meta['kind']!r}")


def save_checkpoint(path, model, extra: dict | None = None) -> None:
    """Write config, metadata and named arrays to a single ``.npz`` file."""
    meta = {"kind": model.kind, "model_config": model.config.to_dict()}
    meta.update(extra or {})
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path):
    """Return ``(model, meta)`` from a checkpoint written by :func:`save_checkpoint`."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        params = {k[len("param/") :]: z[k].copy() for k in z.files if k.startswith("param/")}
    return model_from_meta(meta, params), meta


@dataclass
class AttentionCostReport:
    T: int
    L: int
    stride: int
    tokens_unpatched: int
    tokens_patched: int
    flops_ratio: float
    measured_ms_unpatched: float
    measured_ms_patched: float
    D: int
    H: int

    def to_dict(self) -> dict:
        return asdict(self)


def _time_attention(n_tokens: int, D: int, H: int, batch: int, repeats: int, rng) -> float:
    D_m = D // H
    chi = rng.standard_normal((batch, n_tokens, D))
    w = [glorot(rng, D, D_m, (H, D, D_m)) for _ in range(3)]
    W_O = glorot(rng, D, D, (D, D))
    multi_head_attention(chi, *w, W_O)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        multi_head_attention(chi, *w, W_O)
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def attention_cost_report(
    T: int, L: int, stride: int, D: int = 64, H: int = 4, batch: int = 32, repeats: int = 5, seed: int = 0
) -> AttentionCostReport:
    """Token counts, the analytic score-cost ratio ``(T/N)**2`` and measured attention time.

    Timing is the best of ``repeats`` single forward passes over ``batch``
    windows, at ``T`` tokens (one per minute) and at ``N`` tokens (one per
    patch), with identical ``D`` and ``H``.
    """
    if L > T or stride < 1 or (T - L) % stride:
        raise ConfigError(f"invalid patching T={T}, L={L}, stride={stride}")
    N = patch_count(T, L, stride)
    rng = np.random.default_rng(seed)
    return AttentionCostReport(
        T=T,
        L=L,
        stride=stride,
        tokens_unpatched=T,
        tokens_patched=N,
        flops_ratio=(T / N) ** 2,
        measured_ms_unpatched=_time_attention(T, D, H, batch, repeats, rng),
        measured_ms_patched=_time_attention(N, D, H, batch, repeats, rng),
        D=D,
        H=H,
    )
