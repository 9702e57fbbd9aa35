"""Flat named parameter blocks with EMA blending, Adam updates, and JSON I/O."""

from __future__ import annotations

import json

import numpy as np


class ParamVector:
    """Ordered mapping of block name to float64 array.

    Teacher and student networks share one block layout; gradient
    accumulators and optimizer slots mirror it.
    """

    def __init__(self, blocks: dict | None = None):
        self.blocks: dict[str, np.ndarray] = {}
        if blocks:
            for name, arr in blocks.items():
                self.blocks[name] = np.asarray(arr, dtype=float).copy()

    def __getitem__(self, name: str) -> np.ndarray:
        return self.blocks[name]

    def __setitem__(self, name: str, value) -> None:
        self.blocks[name] = np.asarray(value, dtype=float)

    def __contains__(self, name: str) -> bool:
        return name in self.blocks

    def names(self):
        return list(self.blocks.keys())

    def copy(self) -> "ParamVector":
        return ParamVector(self.blocks)

    def zeros_like(self) -> "ParamVector":
        out = ParamVector()
        for name, arr in self.blocks.items():
            out.blocks[name] = np.zeros_like(arr)
        return out

    def same_layout(self, other: "ParamVector") -> bool:
        if self.names() != other.names():
            return False
        return all(self.blocks[n].shape == other.blocks[n].shape for n in self.blocks)

    def add_(self, other: "ParamVector", scale: float = 1.0) -> None:
        """Accumulate `other` (all of whose blocks must exist here)."""
        for name, arr in other.blocks.items():
            self.blocks[name] += scale * arr

    def scale_(self, factor: float) -> None:
        for name in self.blocks:
            self.blocks[name] *= factor

    def l2_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(a * a) for a in self.blocks.values())))

    def to_json_obj(self) -> list:
        """Ordered [name, shape, flat data] triples; order survives any
        serializer, unlike dict keys under sort_keys."""
        return [[name, list(arr.shape), arr.ravel().tolist()]
                for name, arr in self.blocks.items()]

    @classmethod
    def from_json_obj(cls, doc: list) -> "ParamVector":
        out = cls()
        for name, shape, data in doc:
            out.blocks[name] = np.asarray(data, dtype=float).reshape(shape)
        return out

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_obj(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "ParamVector":
        with open(path) as fh:
            return cls.from_json_obj(json.load(fh))


class Adam:
    """Adaptive-moment gradient descent over a ParamVector."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: ParamVector | None = None
        self.v: ParamVector | None = None

    def step(self, params: ParamVector, grads: ParamVector) -> None:
        if self.m is None:
            self.m = params.zeros_like()
            self.v = params.zeros_like()
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name in params.blocks:
            g = grads.blocks[name]
            m = self.m.blocks[name]
            v = self.v.blocks[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params.blocks[name] -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def state_dict(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
            "eps": self.eps, "t": self.t,
            "m": None if self.m is None else self.m.to_json_obj(),
            "v": None if self.v is None else self.v.to_json_obj(),
        }

    @classmethod
    def from_state_dict(cls, doc: dict) -> "Adam":
        opt = cls(lr=doc["lr"], beta1=doc["beta1"], beta2=doc["beta2"], eps=doc["eps"])
        opt.t = doc["t"]
        if doc["m"] is not None:
            opt.m = ParamVector.from_json_obj(doc["m"])
            opt.v = ParamVector.from_json_obj(doc["v"])
        return opt
