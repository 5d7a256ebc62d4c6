"""Named parameter store, checkpoint files and the Adam optimizer."""
from __future__ import annotations

from collections.abc import Iterable

import numpy as np

from .. import container
from .tensor import Tensor

CHECKPOINT_FORMAT = "facereg-params"
CHECKPOINT_VERSION = 1


class ModelParams:
    """Hierarchical path -> parameter tensor, with a trainable flag per path."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._tensors: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, path: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if path in self._tensors:
            raise KeyError(f"parameter {path!r} already exists")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True)
        self._tensors[path] = t
        self._trainable[path] = trainable
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._tensors[path]

    def __contains__(self, path: str) -> bool:
        return path in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def paths(self, prefix: str = "") -> list[str]:
        return [p for p in self._tensors if p == prefix or p.startswith(prefix.rstrip("/") + "/")
                or not prefix]

    def is_trainable(self, path: str) -> bool:
        return self._trainable[path]

    def set_trainable(self, prefixes: Iterable[str] | None, trainable: bool = True) -> None:
        """Flag every path under any of ``prefixes`` (all paths when None)."""
        if prefixes is None:
            for p in self._tensors:
                self._trainable[p] = trainable
            return
        for pre in prefixes:
            hit = self.paths(pre)
            if not hit:
                raise KeyError(f"no parameter under {pre!r}")
            for p in hit:
                self._trainable[p] = trainable

    def freeze_all_except(self, prefixes: Iterable[str]) -> None:
        self.set_trainable(None, False)
        self.set_trainable(list(prefixes), True)

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def count(self, prefix: str = "", trainable_only: bool = False) -> int:
        return int(sum(self._tensors[p].value.size for p in self.paths(prefix)
                       if self._trainable[p] or not trainable_only))

    def subtree_counts(self, depth: int = 2) -> dict[str, int]:
        out: dict[str, int] = {}
        for p, t in self._tensors.items():
            key = "/".join(p.split("/")[:depth])
            out[key] = out.get(key, 0) + int(t.value.size)
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p: t.value.copy() for p, t in self._tensors.items()}

    def astype(self, dtype) -> "ModelParams":
        out = ModelParams(dtype)
        for p, t in self._tensors.items():
            out.add(p, t.value, self._trainable[p])
        return out


def save_params(path, params: ModelParams, meta: dict | None = None) -> None:
    arrays = {p: t.value for p, t in params.items()}
    info = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "dtype": params.dtype.str, "trainable": {p: params.is_trainable(p) for p in params},
            "meta": meta or {}}
    container.save(path, arrays, info)


def load_params(path) -> tuple[ModelParams, dict]:
    arrays, info = container.load(path)
    if info.get("format") != CHECKPOINT_FORMAT:
        raise container.ContainerError(f"{path}: not a parameter checkpoint")
    params = ModelParams(np.dtype(info["dtype"]))
    for p, arr in arrays.items():
        params.add(p, arr, info["trainable"].get(p, True))
    return params, info.get("meta", {})


class Adam:
    """Adam with bias correction; only trainable paths with a gradient move."""

    def __init__(self, params: ModelParams, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, grads: dict[str, np.ndarray] | None = None) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for path, tensor in self.params.items():
            if not self.params.is_trainable(path):
                continue
            g = tensor.grad if grads is None else grads.get(path)
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float64)
            m = self.m.get(path)
            if m is None:
                m = self.m[path] = np.zeros(tensor.shape)
                self.v[path] = np.zeros(tensor.shape)
            v = self.v[path]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            tensor.value = (tensor.value - upd).astype(tensor.dtype)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


def adam_step(params: ModelParams, grads: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, state: Adam | None = None) -> Adam:
    """Functional form: one Adam update; pass the returned optimizer back in to continue."""
    opt = state or Adam(params, lr, beta1, beta2, eps)
    opt.lr = lr
    opt.step(grads)
    return opt
