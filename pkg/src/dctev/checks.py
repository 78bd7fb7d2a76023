"""Finite-difference checks of every differentiable op and of the composed model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorkit as tk
from .model import DctEv, ModelConfig, feed_forward, multi_head_attention

MICRO = ModelConfig(T=12, L=4, stride=4, D=8, H=2, D_ffn=8, n_layers=1, M=3)
OP_SHAPES = [(3, 4), (5, 2), (2, 3, 4)]


@dataclass
class CheckRow:
    name: str
    shape: str
    max_rel_error: float
    passed: bool


def _op_cases(rng: np.random.Generator):
    for shape in OP_SHAPES:
        lead, d = shape[:-1], shape[-1]
        s = str(shape)
        yield "matmul", s, tk.matmul_op, [rng.standard_normal(shape), rng.standard_normal((d, 3))], {}
        yield "add", s, tk.add_op, [rng.standard_normal(shape), rng.standard_normal((d,))], {}
        yield "mul", s, tk.mul_op, [rng.standard_normal(shape), rng.standard_normal(shape)], {}
        yield "softmax_rows", s, tk.softmax_op, [rng.standard_normal(shape)], {}
        # keep relu inputs away from the kink
        x = rng.standard_normal(shape)
        x[np.abs(x) < 0.05] += 0.1
        yield "relu", s, tk.relu_op, [x], {}
        yield "sigmoid", s, tk.sigmoid_op, [rng.standard_normal(shape)], {}
        yield "layer_norm", s, tk.layer_norm_op, [
            rng.standard_normal(shape), 1.0 + 0.1 * rng.standard_normal(d), rng.standard_normal(d)
        ], {"eps": 1e-5}
        labels = (rng.random(shape) < 0.5).astype(float)
        for red in ("sum", "mean"):
            yield f"bce_loss[{red}]", s, tk.bce_op, [rng.uniform(0.05, 0.95, shape)], {
                "labels": labels, "reduction": red
            }
        yield "transpose", s, tk.transpose_op, [rng.standard_normal(shape)], {"axes": tuple(reversed(range(len(shape))))}
        yield "reshape", s, tk.reshape_op, [rng.standard_normal(shape)], {"shape": (-1,)}
        yield "scale", s, tk.scale_op, [rng.standard_normal(shape)], {"factor": 0.7}


def op_suite(eps: float = 1e-5, tol: float = 1e-4, seed: int = 0) -> list[CheckRow]:
    rng = np.random.default_rng(seed)
    rows = []
    for name, shape, op, inputs, kw in _op_cases(rng):
        rep = tk.grad_check(op, inputs, eps, tol, kwargs=kw, seed=seed)
        rows.append(CheckRow(name, shape, rep.max_rel_error, rep.passed))
    return rows


def component_suite(cfg: ModelConfig = MICRO, eps: float = 1e-5, tol: float = 1e-4, seed: int = 0) -> list[CheckRow]:
    """Attention, feed-forward and embedding blocks in isolation."""
    rng = np.random.default_rng(seed)
    model = DctEv(cfg, seed=seed)
    p = model.params
    shape = f"N={cfg.N},D={cfg.D},H={cfg.H}"
    chi = rng.standard_normal((2, cfg.N, cfg.D))
    rows = []
    att = tk.GraphOp(lambda c, q, k, v, o: multi_head_attention(c, q, k, v, o), "multi_head_attention")
    rep = tk.grad_check(att, [chi, p["layer0.W_Q"], p["layer0.W_K"], p["layer0.W_V"], p["layer0.W_O"]], eps, tol, seed=seed)
    rows.append(CheckRow("multi_head_attention", shape, rep.max_rel_error, rep.passed))
    b1 = 0.1 * rng.standard_normal(cfg.D_ffn)
    ffn = tk.GraphOp(feed_forward, "feed_forward")
    rep = tk.grad_check(ffn, [chi, p["layer0.Phi1"], b1, p["layer0.Phi2"], p["layer0.b2"]], eps, tol, seed=seed)
    rows.append(CheckRow("feed_forward", shape, rep.max_rel_error, rep.passed))
    x = rng.standard_normal((2, cfg.T))
    enc = tk.GraphOp(lambda kappa: model.encode_graph(x, {**model.leaves(), "kappa": kappa}), "encode")
    rep = tk.grad_check(enc, [p["kappa"]], eps, tol, seed=seed)
    rows.append(CheckRow("encode[kappa]", shape, rep.max_rel_error, rep.passed))
    return rows


def model_check(
    cfg: ModelConfig = MICRO,
    eps: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
    batch: int = 2,
    max_coords: int | None = None,
) -> CheckRow:
    """Gradient of the full forward pass (all parameters at once) vs finite differences."""
    rng = np.random.default_rng(seed)
    model = DctEv(cfg, seed=seed)
    names = list(model.params)
    # nonzero biases and perturbed gains so every path is exercised
    for k in names:
        if k.endswith(("bias", "b1", "b2", "head_b")):
            model.params[k] = 0.1 * rng.standard_normal(model.params[k].shape)
        elif k.endswith("gain"):
            model.params[k] = 1.0 + 0.1 * rng.standard_normal(model.params[k].shape)
    x = rng.standard_normal((batch, cfg.T))

    def full(*arrays):
        return model.forward_graph(x, dict(zip(names, arrays)))

    rep = tk.grad_check(
        tk.GraphOp(full, "dctev"), [model.params[k] for k in names], eps, tol, seed=seed, max_coords=max_coords
    )
    return CheckRow("dctev[all params]", f"T={cfg.T},L={cfg.L},D={cfg.D},H={cfg.H}", rep.max_rel_error, rep.passed)


def full_suite(cfg: ModelConfig = MICRO, eps: float = 1e-5, tol: float = 1e-4, seed: int = 0,
               max_coords: int | None = None) -> list[CheckRow]:
    return op_suite(eps, tol, seed) + component_suite(cfg, eps, tol, seed) + [
        model_check(cfg, eps, tol, seed, max_coords=max_coords)
    ]
