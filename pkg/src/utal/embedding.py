"""Camera-shared embedding network with one classifier head per camera.

raw frame feature --(W1, b1, act)--> hidden --(W2, b2)--> embedding (d)
embedding --(head t)--> logits over the M_t tracklet classes of camera t

Gradients are derived by hand; ``backward`` takes upstream gradients with
respect to both the embeddings and the per-sample logits so that the
classification loss and the cross-camera pull loss can share one pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from utal.errors import CorpusFormatError, NumericError, ShapeError

__all__ = ["AdamState", "EmbeddingModel", "adam_step", "load_checkpoint", "save_checkpoint"]

CHECKPOINT_FORMAT = "utal-checkpoint/1"

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "identity": (lambda z: z, lambda z, a: np.ones_like(z)),
}


class EmbeddingModel:
    def __init__(self, W1, b1, W2, b2, heads, activation="tanh"):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.W1 = np.asarray(W1, dtype=float)
        self.b1 = np.asarray(b1, dtype=float)
        self.W2 = np.asarray(W2, dtype=float)
        self.b2 = np.asarray(b2, dtype=float)
        self.heads = [np.asarray(h, dtype=float) for h in heads]
        self.activation = activation
        if self.W1.shape[1] != self.b1.shape[0] or self.W2.shape[0] != self.W1.shape[1]:
            raise ShapeError("hidden layer shapes disagree")
        if self.W2.shape[1] != self.b2.shape[0]:
            raise ShapeError("embedding layer shapes disagree")
        for t, h in enumerate(self.heads):
            if h.ndim != 2 or h.shape[0] != self.embed_dim:
                raise ShapeError(f"head {t} must have shape (embed_dim, M_t), got {h.shape}")

    @classmethod
    def init(cls, raw_dim, num_classes, rng, hidden_dim=64, embed_dim=32, activation="tanh"):
        """Fan-in scaled uniform weights, zero biases."""

        def uniform(fan_in, shape):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        W1 = uniform(raw_dim, (raw_dim, hidden_dim))
        W2 = uniform(hidden_dim, (hidden_dim, embed_dim))
        heads = [uniform(embed_dim, (embed_dim, m)) for m in num_classes]
        return cls(W1, np.zeros(hidden_dim), W2, np.zeros(embed_dim), heads, activation)

    @property
    def raw_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.W2.shape[1]

    @property
    def num_cameras(self) -> int:
        return len(self.heads)

    def parameters(self) -> dict[str, np.ndarray]:
        params = {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}
        for t, h in enumerate(self.heads):
            params[f"head{t}"] = h
        return params

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(
            self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy(), [h.copy() for h in self.heads], self.activation
        )

    def _check_input(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.raw_dim or x.ndim not in (1, 2):
            raise ShapeError(f"expected input of length {self.raw_dim}, got shape {x.shape}")
        return x

    def _hidden(self, x):
        act, _ = _ACTIVATIONS[self.activation]
        z = x @ self.W1 + self.b1
        return z, act(z)

    def forward(self, x) -> np.ndarray:
        """Embedding of one frame (1-D input) or of a batch (2-D input)."""
        x = self._check_input(x)
        _, h = self._hidden(x)
        return h @ self.W2 + self.b2

    def logits(self, embedding, camera: int) -> np.ndarray:
        if not 0 <= camera < self.num_cameras:
            raise IndexError(f"camera {camera} out of range for {self.num_cameras} heads")
        embedding = np.asarray(embedding, dtype=float)
        if embedding.shape[-1] != self.embed_dim:
            raise ShapeError(f"expected embedding of length {self.embed_dim}, got shape {embedding.shape}")
        return embedding @ self.heads[camera]

    def backward(self, x, cameras, grad_embed, grad_logits) -> dict[str, np.ndarray]:
        """Parameter gradients for a batch.

        ``grad_embed`` is (N, d), the direct upstream gradient on each sample's
        embedding; ``grad_logits[n]`` is the gradient on sample n's logits for
        its own camera head (or None when the sample has no logit loss).
        """
        x = self._check_input(x)
        if x.ndim == 1:
            x = x[None, :]
        n = x.shape[0]
        cameras = np.asarray(cameras, dtype=int)
        grad_embed = np.asarray(grad_embed, dtype=float)
        if cameras.shape != (n,) or grad_embed.shape != (n, self.embed_dim) or len(grad_logits) != n:
            raise ShapeError("batch, cameras, grad_embed and grad_logits must all have N rows")

        _, deriv = _ACTIVATIONS[self.activation]
        z, h = self._hidden(x)
        emb = h @ self.W2 + self.b2

        grads = {f"head{t}": np.zeros_like(w) for t, w in enumerate(self.heads)}
        d_emb = grad_embed.copy()
        for t, w in enumerate(self.heads):
            rows = [i for i in range(n) if cameras[i] == t and grad_logits[i] is not None]
            if not rows:
                continue
            g = np.stack([np.asarray(grad_logits[i], dtype=float) for i in rows])
            if g.shape[1] != w.shape[1]:
                raise ShapeError(f"logit gradient for camera {t} must have length {w.shape[1]}")
            grads[f"head{t}"] = emb[rows].T @ g
            d_emb[rows] += g @ w.T

        d_h = d_emb @ self.W2.T
        d_z = d_h * deriv(z, h)
        out = {
            "W1": x.T @ d_z,
            "b1": d_z.sum(axis=0),
            "W2": h.T @ d_emb,
            "b2": d_emb.sum(axis=0),
        }
        out.update(grads)
        return out


@dataclass
class AdamState:
    lr: float = 3.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: EmbeddingModel, **kwargs) -> "AdamState":
        params = model.parameters()
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            **kwargs,
        )


def adam_step(model: EmbeddingModel, state: AdamState, grads: dict[str, np.ndarray]):
    """Bias-corrected Adam update, applied to the model's arrays in place."""
    params = model.parameters()
    if set(grads) != set(params):
        raise ShapeError(f"gradient blocks {sorted(grads)} do not match parameters {sorted(params)}")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient {name} has shape {g.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter block {name}")

    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return model, state


def save_checkpoint(path, model: EmbeddingModel, opt: AdamState, arrays=None, meta=None) -> None:
    """Write parameters, optimizer moments and caller extras to one ``.npz``."""
    payload = {}
    for name, p in model.parameters().items():
        payload[f"param/{name}"] = p
        payload[f"adam_m/{name}"] = opt.m[name]
        payload[f"adam_v/{name}"] = opt.v[name]
    for name, arr in (arrays or {}).items():
        payload[f"extra/{name}"] = np.asarray(arr)
    header = {
        "format": CHECKPOINT_FORMAT,
        "activation": model.activation,
        "num_cameras": model.num_cameras,
        "adam": {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "step": opt.step},
        "meta": meta or {},
    }
    payload["header"] = np.array(json.dumps(header, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns (model, adam_state, arrays, meta)."""
    with np.load(Path(path), allow_pickle=False) as data:
        if "header" not in data.files:
            raise CorpusFormatError(f"{path}: not a checkpoint (no header)")
        header = json.loads(str(data["header"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise CorpusFormatError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
        get = lambda key: np.array(data[key])  # noqa: E731
        T = header["num_cameras"]
        model = EmbeddingModel(
            get("param/W1"),
            get("param/b1"),
            get("param/W2"),
            get("param/b2"),
            [get(f"param/head{t}") for t in range(T)],
            header["activation"],
        )
        names = list(model.parameters())
        opt = AdamState(
            **header["adam"],
            m={k: get(f"adam_m/{k}") for k in names},
            v={k: get(f"adam_v/{k}") for k in names},
        )
        arrays = {k[len("extra/"):]: get(k) for k in data.files if k.startswith("extra/")}
    return model, opt, arrays, header["meta"]
