"""Polynomial graph-filter GNN with hand-written reverse-mode gradients.

Layer l computes ``rho(sum_k S^k X_{l-1} H_{l,k})``; the final layer skips
the nonlinearity and produces logits. ``S^k X`` is always built by repeated
sparse products, never by forming ``S^k``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NONLINEARITIES = ("relu", "tanh", "identity")

_CKPT_MAGIC = b"VRCOCKPT"
_CKPT_VERSION = 1


@dataclass
class ModelParams:
    layers: list[list[np.ndarray]]

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def K(self) -> int:
        return len(self.layers[0])

    @property
    def dims(self) -> list[int]:
        return [self.layers[0][0].shape[0]] + [layer[0].shape[1] for layer in self.layers]

    @property
    def size(self) -> int:
        return sum(H.size for layer in self.layers for H in layer)

    def copy(self) -> "ModelParams":
        return ModelParams([[H.copy() for H in layer] for layer in self.layers])

    def flat(self) -> np.ndarray:
        return np.concatenate([H.ravel() for layer in self.layers for H in layer])

    def validate(self) -> None:
        dims = self.dims
        for l, layer in enumerate(self.layers):
            if len(layer) != self.K:
                raise ValueError(f"layer {l} has {len(layer)} taps, expected {self.K}")
            for H in layer:
                if H.shape != (dims[l], dims[l + 1]):
                    raise ValueError(f"layer {l} tap shape {H.shape} breaks the dims chain {dims}")

    def same_shape(self, other) -> bool:
        return len(self.layers) == len(other.layers) and all(
            len(a) == len(b) and all(x.shape == y.shape for x, y in zip(a, b))
            for a, b in zip(self.layers, other.layers)
        )


@dataclass
class Gradients:
    layers: list[list[np.ndarray]]
    input_grad: np.ndarray | None = None

    def flat(self) -> np.ndarray:
        return np.concatenate([G.ravel() for layer in self.layers for G in layer])

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))


@dataclass
class LayerTape:
    diffused: list[np.ndarray]  # S^k X_{l-1}, k = 0..K-1
    pre: np.ndarray
    post: np.ndarray


@dataclass
class ActivationTape:
    inputs: np.ndarray
    layers: list[LayerTape] = field(default_factory=list)
    nonlinearity: str = "relu"


def init_params(dims: list[int], K: int, seed: int) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init, fan_in = K * F_in."""
    rng = np.random.default_rng(seed)
    layers = []
    for f_in, f_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(K * f_in)
        layers.append([rng.uniform(-bound, bound, size=(f_in, f_out)) for _ in range(K)])
    return ModelParams(layers)


def activate(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "identity":
        return x
    raise ValueError(f"unknown nonlinearity {kind!r}")


def activate_grad(pre: np.ndarray, post: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (pre > 0).astype(pre.dtype)
    if kind == "tanh":
        return 1.0 - post * post
    if kind == "identity":
        return np.ones_like(pre)
    raise ValueError(f"unknown nonlinearity {kind!r}")


def _check_taps(X: np.ndarray, H: list[np.ndarray]) -> None:
    if not H:
        raise ValueError("need at least one filter tap")
    for k, Hk in enumerate(H):
        if Hk.ndim != 2 or Hk.shape[0] != X.shape[1] or Hk.shape != H[0].shape:
            raise ValueError(f"tap {k} has shape {Hk.shape}, input has {X.shape[1]} features")


def diffuse(X: np.ndarray, S, K: int) -> list[np.ndarray]:
    out = [X]
    for _ in range(1, K):
        out.append(S @ out[-1])
    return out


def conv_forward(X: np.ndarray, gso, H: list[np.ndarray]) -> np.ndarray:
    """sum_k S^k X H_k by iterated diffusion."""
    _check_taps(X, H)
    S = getattr(gso, "matrix", gso)
    if S.shape[0] != X.shape[0]:
        raise ValueError(f"operator is {S.shape}, signal has {X.shape[0]} rows")
    return sum(Z @ Hk for Z, Hk in zip(diffuse(X, S, len(H)), H))


def layer_forward(X, gso, layer_params, nonlinearity="relu"):
    _check_taps(X, layer_params)
    S = getattr(gso, "matrix", gso)
    Z = diffuse(X, S, len(layer_params))
    pre = sum(Zk @ Hk for Zk, Hk in zip(Z, layer_params))
    post = activate(pre, nonlinearity)
    return post, LayerTape(Z, pre, post)


def sage_layer(X_self, X_agg, W_self, W_neigh):
    """GraphSAGE mean aggregator without bias: the K=2 case with a mean-neighbor operator."""
    if X_self.shape != X_agg.shape or W_self.shape != W_neigh.shape or X_self.shape[1] != W_self.shape[0]:
        raise ValueError("shape mismatch in sage_layer")
    return X_self @ W_self + X_agg @ W_neigh


def model_forward(X, gso, params: ModelParams, nonlinearity="relu"):
    """Returns (logits, tape); the last layer is linear."""
    if X.shape[1] != params.dims[0]:
        raise ValueError(f"input has {X.shape[1]} features, model expects {params.dims[0]}")
    tape = ActivationTape(inputs=X, nonlinearity=nonlinearity)
    out = X
    L = params.num_layers
    for l, layer in enumerate(params.layers):
        kind = nonlinearity if l < L - 1 else "identity"
        out, entry = layer_forward(out, gso, layer, kind)
        tape.layers.append(entry)
    return out, tape


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy_loss(logits, labels, mask, weight: float = 1.0):
    """weight * mean over masked rows of -log softmax(logits)[label], and its gradient."""
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("cross_entropy_loss needs a nonempty mask")
    logp = log_softmax(logits[idx])
    y = labels[idx]
    loss = -weight * logp[np.arange(idx.size), y].mean()
    dlogits = np.zeros_like(logits)
    probs = np.exp(logp)
    probs[np.arange(idx.size), y] -= 1.0
    dlogits[idx] = probs * (weight / idx.size)
    return float(loss), dlogits


def mse_loss(pred, target, mask, weight: float = 1.0):
    """weight * mean over masked rows of 0.5 * ||pred - target||^2."""
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("mse_loss needs a nonempty mask")
    diff = pred[idx] - target[idx]
    loss = 0.5 * weight * float((diff * diff).sum()) / idx.size
    grad = np.zeros_like(pred)
    grad[idx] = diff * (weight / idx.size)
    return loss, grad


def model_backward(tape: ActivationTape, dlogits, gso, params: ModelParams, input_grad: bool = False) -> Gradients:
    if len(tape.layers) != params.num_layers:
        raise ValueError("tape does not match the parameter set")
    S = getattr(gso, "matrix", gso)
    ST = S.T.tocsr()
    L = params.num_layers
    grads: list[list[np.ndarray]] = [None] * L  # type: ignore[list-item]
    dX = dlogits
    for l in range(L - 1, -1, -1):
        entry, layer = tape.layers[l], params.layers[l]
        kind = tape.nonlinearity if l < L - 1 else "identity"
        dpre = dX * activate_grad(entry.pre, entry.post, kind)
        grads[l] = [Z.T @ dpre for Z in entry.diffused]
        if l == 0 and not input_grad:
            break
        # reverse of Z_k = S Z_{k-1}
        dZ = dpre @ layer[-1].T
        for k in range(len(layer) - 2, -1, -1):
            dZ = ST @ dZ + dpre @ layer[k].T
        dX = dZ
    return Gradients(grads, dX if input_grad else None)


def sgd_step(params: ModelParams, grads, eta: float) -> ModelParams:
    glayers = getattr(grads, "layers", grads)
    if not params.same_shape(ModelParams(glayers)):
        raise ValueError("gradient shapes do not match parameters")
    return ModelParams([[H - eta * G for H, G in zip(hl, gl)] for hl, gl in zip(params.layers, glayers)])


def top_singular_value(A: np.ndarray, iters: int = 100, tol: float = 1e-6, seed: int = 0) -> float:
    """Largest singular value of A by power iteration on A^T A."""
    if not np.any(A):
        return 0.0
    v = np.random.default_rng(seed).standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        w = A.T @ (A @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        new = float(np.linalg.norm(A @ v))
        if abs(new - sigma) <= tol * max(new, 1e-300):
            return new
        sigma = new
    return sigma


def spectral_clip(params: ModelParams, lambda_max: float) -> ModelParams:
    """Rescale each layer so its stacked filter [H_0; ...; H_{K-1}] has top singular value <= lambda_max."""
    if lambda_max <= 0:
        raise ValueError("lambda_max must be positive")
    out = []
    for layer in params.layers:
        sigma = top_singular_value(np.vstack(layer))
        if sigma > lambda_max:
            out.append([H * (lambda_max / sigma) for H in layer])
        else:
            out.append([H.copy() for H in layer])
    return ModelParams(out)


def save_checkpoint(params: ModelParams, path) -> None:
    """Header: magic, u32 version, u32 L, u32 K, (L+1) x u32 dims; then float64 matrices row-major."""
    dims = params.dims
    header = _CKPT_MAGIC + struct.pack(f"<III{len(dims)}I", _CKPT_VERSION, params.num_layers, params.K, *dims)
    body = b"".join(np.ascontiguousarray(H, dtype="<f8").tobytes() for layer in params.layers for H in layer)
    Path(path).write_bytes(header + body)


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, L, K = struct.unpack_from("<III", raw, 8)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    dims = struct.unpack_from(f"<{L + 1}I", raw, 20)
    off = 20 + 4 * (L + 1)
    layers = []
    for l in range(L):
        taps = []
        for _ in range(K):
            count = dims[l] * dims[l + 1]
            taps.append(np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(dims[l], dims[l + 1]).copy())
            off += 8 * count
        layers.append(taps)
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes after parameters")
    return ModelParams(layers)
