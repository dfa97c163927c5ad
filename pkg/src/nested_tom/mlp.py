"""Plain feed-forward networks in numpy: forward, backprop, checkpoints.

Nothing here depends on the rest of the package; the training loop lives
in `train` and the proposal wrapper in `proposals`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptFile, DimMismatch, VersionMismatch

FORMAT_VERSION = 1
_ACTIVATIONS = ("relu", "tanh")


@dataclass
class MlpParams:
    """Affine layer stack with a shared elementwise activation.

    `layers` holds (weight, bias) pairs; weight shapes chain so that layer
    k maps dim_k -> dim_{k+1}.  The final layer output is returned as raw
    logits (no activation).
    """

    layers: list[tuple[np.ndarray, np.ndarray]]
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for k, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise DimMismatch(f"layer {k} has shapes {w.shape}, {b.shape}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {k} contains non-finite entries")
        for k in range(len(self.layers) - 1):
            out_k = self.layers[k][0].shape[0]
            in_next = self.layers[k + 1][0].shape[1]
            if out_k != in_next:
                raise DimMismatch(f"layer {k} outputs {out_k}, layer {k + 1} expects {in_next}")

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    def copy(self) -> "MlpParams":
        return MlpParams([(w.copy(), b.copy()) for w, b in self.layers], self.activation)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for w, b in self.layers for a in (w, b)])


def init_params(
    dims: list[int],
    rng: np.random.Generator,
    activation: str = "relu",
    init_scale: float = 0.1,
) -> MlpParams:
    """Gaussian init scaled by fan-in; dims = [input, hidden..., output]."""
    if len(dims) < 2:
        raise ValueError("need at least input and output dims")
    layers = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        w = rng.standard_normal((d_out, d_in)) * init_scale / np.sqrt(max(1, d_in))
        b = np.zeros(d_out)
        layers.append((w, b))
    return MlpParams(layers, activation)


def _act(x: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(x, 0.0) if kind == "relu" else np.tanh(x)


def _act_grad(pre: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (pre > 0).astype(float)
    t = np.tanh(pre)
    return 1.0 - t * t


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Deterministic logits for a single input vector or a batch (N, d)."""
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.shape[1] != params.input_dim:
        raise DimMismatch(f"input has {arr.shape[1]} features, network expects {params.input_dim}")
    h = arr
    for k, (w, b) in enumerate(params.layers):
        h = h @ w.T + b
        if k < len(params.layers) - 1:
            h = _act(h, params.activation)
    return h[0] if single else h


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_and_grads(
    params: MlpParams, x: np.ndarray, targets: np.ndarray
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Mean softmax cross-entropy over a batch plus per-layer gradients."""
    x = np.asarray(x, dtype=float)
    targets = np.asarray(targets, dtype=int)
    n = x.shape[0]
    if x.shape[1] != params.input_dim:
        raise DimMismatch(f"batch has {x.shape[1]} features, network expects {params.input_dim}")

    pre: list[np.ndarray] = []
    post: list[np.ndarray] = [x]
    h = x
    for k, (w, b) in enumerate(params.layers):
        z = h @ w.T + b
        pre.append(z)
        if k < len(params.layers) - 1:
            h = _act(z, params.activation)
            post.append(h)
        else:
            h = z
    probs = softmax(h)
    eps = 1e-300
    loss = float(-np.mean(np.log(probs[np.arange(n), targets] + eps)))

    delta = probs.copy()
    delta[np.arange(n), targets] -= 1.0
    delta /= n
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params.layers)  # type: ignore
    for k in range(len(params.layers) - 1, -1, -1):
        grads[k] = (delta.T @ post[k], delta.sum(axis=0))
        if k > 0:
            delta = (delta @ params.layers[k][0]) * _act_grad(pre[k - 1], params.activation)
    return loss, grads


def save_model(params: MlpParams, path: str | Path) -> None:
    """Versioned JSON checkpoint with row-major weight payloads.

    JSON float serialization round-trips doubles exactly, so a load
    reproduces forward outputs bit for bit.
    """
    payload = {
        "format_version": FORMAT_VERSION,
        "activation": params.activation,
        "dims": [params.input_dim] + [w.shape[0] for w, _ in params.layers],
        "layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in params.layers],
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_model(path: str | Path) -> MlpParams:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CorruptFile(f"checkpoint {path} missing format_version")
    if payload["format_version"] != FORMAT_VERSION:
        raise VersionMismatch(
            f"checkpoint {path} has format {payload['format_version']}, "
            f"supported: {FORMAT_VERSION}"
        )
    try:
        layers = [
            (np.asarray(entry["w"], dtype=float), np.asarray(entry["b"], dtype=float))
            for entry in payload["layers"]
        ]
        params = MlpParams(layers, payload["activation"])
        dims = [params.input_dim] + [w.shape[0] for w, _ in params.layers]
        if dims != payload["dims"]:
            raise DimMismatch(f"checkpoint {path} dims {payload['dims']} do not match payload")
    except (KeyError, TypeError) as exc:
        raise CorruptFile(f"checkpoint {path} malformed: {exc}") from exc
    return params
