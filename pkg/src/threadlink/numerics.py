"""Dense float64 building blocks with hand-written backward passes.

All layer functions operate row-wise on arrays shaped ``(..., rows, features)``
so a batch of candidates can share one call. Forward functions return
``(output, cache)``; the matching backward takes the upstream gradient and
that cache and returns ``(param_grads, input_grad)`` where ``param_grads``
uses the same names as the parameter object's ``arrays()``.
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LN_EPS = 1e-5
ACTIVATIONS = ("tanh", "relu", "linear")


class DimensionError(ValueError):
    pass


class StateError(RuntimeError):
    """Backward called without a matching forward cache."""


class NumericalError(ArithmeticError):
    pass


class CheckpointError(ValueError):
    pass


def as_float(x) -> np.ndarray:
    """``x`` as an array, keeping float64 or wider precision and promoting anything else to float64."""
    x = np.asarray(x)
    return x if x.dtype.kind == "f" and x.dtype.itemsize >= 8 else x.astype(np.float64)


def cast_arrays(obj, dtype):
    """Copy of a parameter dataclass (possibly nested, with array lists) with every array cast to ``dtype``."""
    if isinstance(obj, np.ndarray):
        return obj.astype(dtype)
    if isinstance(obj, list):
        return [cast_arrays(x, dtype) for x in obj]
    if dataclasses.is_dataclass(obj):
        return dataclasses.replace(obj, **{f.name: cast_arrays(getattr(obj, f.name), dtype)
                                           for f in dataclasses.fields(obj) if f.init})
    return obj


def softmax(v, axis: int = -1) -> np.ndarray:
    v = as_float(v)
    if v.size == 0 or v.shape[axis] == 0:
        raise DimensionError("softmax of an empty vector")
    z = v - v.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray, axis: int = -1) -> np.ndarray:
    return probs * (dprobs - (dprobs * probs).sum(axis=axis, keepdims=True))


def entropy(p: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shannon entropy in nats with 0 log 0 = 0."""
    p = as_float(p)
    logs = np.log(np.where(p > 0, p, 1.0))
    return -(p * logs).sum(axis=axis)


def _linear_grads(x: np.ndarray, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return x2.T @ dy2, dy2.sum(axis=0)


# ---------------------------------------------------------------------- MLP


@dataclass
class MlpParams:
    """Weights are stored ``(in, out)`` so a layer is ``x @ W + b``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]  # one per hidden layer; the output layer is linear

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases) or len(self.activations) != len(self.weights) - 1:
            raise DimensionError("MLP layer lists do not line up")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[1],):
                raise DimensionError(f"layer {k}: bias shape {b.shape} vs weight {w.shape}")
            if k and self.weights[k - 1].shape[1] != w.shape[0]:
                raise DimensionError(f"layer {k}: input dim does not chain")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{k}"] = w
            out[f"b{k}"] = b
        return out


@dataclass
class _MlpCache:
    params: MlpParams
    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name: str, z: np.ndarray, out: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - out * out
    if name == "relu":
        return (z > 0).astype(np.float64)
    return np.ones_like(z)


def mlp_forward(p: MlpParams, x: np.ndarray) -> tuple[np.ndarray, _MlpCache]:
    if x.shape[-1] != p.in_dim:
        raise DimensionError(f"MLP expects {p.in_dim} input features, got {x.shape[-1]}")
    cache = _MlpCache(p)
    h = x
    last = len(p.weights) - 1
    for k, (w, b) in enumerate(zip(p.weights, p.biases)):
        cache.inputs.append(h)
        z = h @ w + b
        cache.preacts.append(z)
        h = z if k == last else _act(p.activations[k], z)
    return h, cache


def mlp_backward(p: MlpParams, dy: np.ndarray, cache: _MlpCache | None):
    if cache is None or cache.params is not p or len(cache.inputs) != len(p.weights):
        raise StateError("no forward cache for these MLP parameters")
    grads = {}
    d = dy
    for k in range(len(p.weights) - 1, -1, -1):
        if k != len(p.weights) - 1:
            z = cache.preacts[k]
            d = d * _act_grad(p.activations[k], z, _act(p.activations[k], z))
        grads[f"w{k}"], grads[f"b{k}"] = _linear_grads(cache.inputs[k], d)
        d = d @ p.weights[k].T
    return grads, d


# --------------------------------------------------------------- layer norm


def layer_norm_forward(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layer_norm_backward(dy: np.ndarray, cache):
    xhat, inv, gain = cache
    d = xhat.shape[-1]
    dgain = (dy * xhat).reshape(-1, d).sum(axis=0)
    dbias = dy.reshape(-1, d).sum(axis=0)
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


# -------------------------------------------------------------- transformer


@dataclass
class TransformerLayerParams:
    """One pre-norm encoder layer.

    Query/key/value projections are ``(model_dim, model_dim)``; head ``h`` owns
    column block ``h*d_head:(h+1)*d_head`` of each.
    """

    n_heads: int
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    ff: MlpParams

    def __post_init__(self) -> None:
        d = self.wq.shape[0]
        if d % self.n_heads:
            raise DimensionError(f"model_dim {d} not divisible by {self.n_heads} heads")
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (d, d):
                raise DimensionError(f"{name} must be {d}x{d}")
        if self.ff.in_dim != d or self.ff.weights[-1].shape[1] != d:
            raise DimensionError("feed-forward block must map model_dim to model_dim")

    @property
    def model_dim(self) -> int:
        return self.wq.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {
            name: getattr(self, name)
            for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b", "ln2_g", "ln2_b")
        }
        out.update({f"ff.{k}": v for k, v in self.ff.arrays().items()})
        return out


@dataclass
class _TransformerCache:
    params: TransformerLayerParams
    ln1: tuple
    h1: np.ndarray
    qh: np.ndarray
    kh: np.ndarray
    vh: np.ndarray
    attn: np.ndarray
    o: np.ndarray
    ln2: tuple
    ff: _MlpCache


def _split_heads(a: np.ndarray, n_heads: int) -> np.ndarray:
    *lead, t, d = a.shape
    return a.reshape(*lead, t, n_heads, d // n_heads).swapaxes(-2, -3)


def _merge_heads(a: np.ndarray) -> np.ndarray:
    *lead, h, t, dh = a.shape
    return a.swapaxes(-2, -3).reshape(*lead, t, h * dh)


def transformer_layer_forward(p: TransformerLayerParams, x: np.ndarray):
    if x.ndim < 2 or x.shape[-1] != p.model_dim:
        raise DimensionError(f"expected (..., rows, {p.model_dim}) input, got {x.shape}")
    h = p.n_heads
    scale = 1.0 / math.sqrt(p.model_dim // h)
    h1, ln1 = layer_norm_forward(x, p.ln1_g, p.ln1_b)
    qh = _split_heads(h1 @ p.wq + p.bq, h)
    kh = _split_heads(h1 @ p.wk + p.bk, h)
    vh = _split_heads(h1 @ p.wv + p.bv, h)
    attn = softmax((qh @ kh.swapaxes(-1, -2)) * scale)
    o = _merge_heads(attn @ vh)
    x1 = x + o @ p.wo + p.bo
    h2, ln2 = layer_norm_forward(x1, p.ln2_g, p.ln2_b)
    f, ff_cache = mlp_forward(p.ff, h2)
    cache = _TransformerCache(p, ln1, h1, qh, kh, vh, attn, o, ln2, ff_cache)
    return x1 + f, cache


def transformer_layer_backward(p: TransformerLayerParams, dy: np.ndarray, cache: _TransformerCache | None):
    if cache is None or cache.params is not p:
        raise StateError("no forward cache for these transformer parameters")
    grads: dict[str, np.ndarray] = {}
    ff_grads, dh2 = mlp_backward(p.ff, dy, cache.ff)
    grads.update({f"ff.{k}": v for k, v in ff_grads.items()})
    dx1_ln, grads["ln2_g"], grads["ln2_b"] = layer_norm_backward(dh2, cache.ln2)
    dx1 = dy + dx1_ln

    grads["wo"], grads["bo"] = _linear_grads(cache.o, dx1)
    doh = _split_heads(dx1 @ p.wo.T, p.n_heads)
    dattn = doh @ cache.vh.swapaxes(-1, -2)
    dvh = cache.attn.swapaxes(-1, -2) @ doh
    dscores = softmax_backward(cache.attn, dattn) / math.sqrt(p.model_dim // p.n_heads)
    dqh = dscores @ cache.kh
    dkh = dscores.swapaxes(-1, -2) @ cache.qh

    dh1 = np.zeros_like(cache.h1)
    for name, dproj in (("q", dqh), ("k", dkh), ("v", dvh)):
        dm = _merge_heads(dproj)
        grads[f"w{name}"], grads[f"b{name}"] = _linear_grads(cache.h1, dm)
        dh1 += dm @ getattr(p, f"w{name}").T
    dx_ln, grads["ln1_g"], grads["ln1_b"] = layer_norm_backward(dh1, cache.ln1)
    return grads, dx1 + dx_ln


# ----------------------------------------------------------- gradient check


def grad_check(
    f: Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
    theta: dict[str, np.ndarray] | np.ndarray,
    h: float = 1e-5,
    coords: dict[str, np.ndarray] | None = None,
    value: Callable[[dict[str, np.ndarray]], float] | None = None,
) -> float:
    """Max relative error between ``f``'s analytic gradient and central differences.

    ``f(theta)`` returns ``(value, grads)`` with ``grads`` keyed like ``theta``.
    ``theta`` arrays are perturbed in place and restored. ``coords`` optionally
    restricts the check to given flat indices per array. ``value`` is an
    optional cheaper function returning only the scalar, used for the
    perturbed evaluations.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    single = isinstance(theta, np.ndarray)
    params = {"theta": theta} if single else theta
    call = (lambda p: _wrap_single(f, p)) if single else f
    if value is not None:
        evaluate = (lambda p: value(p["theta"])) if single else value
    else:
        evaluate = lambda p: call(p)[0]  # noqa: E731

    value, analytic = call(params)
    if not np.isfinite(value):
        raise NumericalError(f"f(theta) is not finite: {value}")
    worst = 0.0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        ga = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        idx = range(flat.size) if coords is None or name not in coords else coords[name]
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = evaluate(params)
            flat[i] = old - h
            fm = evaluate(params)
            flat[i] = old
            numeric = (fp - fm) / (2 * h)
            a = ga[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def _wrap_single(f, params):
    value, g = f(params["theta"])
    return value, {"theta": g}


# --------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "threadlink-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write a numpy ``.npz`` container (written to ``path`` exactly, no suffix added).

    Each tensor is stored as a float64 ``.npy`` member under its stable name;
    ``__meta__`` holds UTF-8 JSON with the format tag, version and ``meta``.
    """
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, **meta}
    payload = {name: np.ascontiguousarray(arrays[name], dtype=np.float64) for name in sorted(arrays)}
    payload["__meta__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with np.load(path, allow_pickle=False) as z:
            if "__meta__" not in z.files:
                raise CheckpointError(f"{path}: missing metadata")
            meta = json.loads(z["__meta__"].tobytes().decode())
            arrays = {k: z[k].astype(np.float64) for k in z.files if k != "__meta__"}
    except (OSError, ValueError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from None
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    return arrays, meta
