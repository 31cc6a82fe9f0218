"""Adam with bias correction, operating in place on flat parameter vectors."""

from __future__ import annotations

import numpy as np

from .errors import NumericError


class Adam:
    def __init__(self, size: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float) -> None:
        if not np.all(np.isfinite(grad)):
            raise NumericError("non-finite gradient passed to optimizer", node="adam")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m *= b1
        self.m += (1.0 - b1) * grad
        self.v *= b2
        self.v += (1.0 - b2) * grad * grad
        if lr == 0.0:
            return
        step = lr * np.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        params -= step * self.m / (np.sqrt(self.v) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m.copy(), "v": self.v.copy(),
                "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    def to_json(self) -> dict:
        from .network import encode_floats

        return {"t": self.t, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "m": encode_floats(self.m), "v": encode_floats(self.v)}

    @classmethod
    def from_json(cls, doc: dict) -> "Adam":
        from .network import decode_floats

        return cls.from_state({**doc, "m": decode_floats(doc["m"]), "v": decode_floats(doc["v"])})

    @classmethod
    def from_state(cls, state: dict) -> "Adam":
        opt = cls(len(state["m"]), state["beta1"], state["beta2"], state["eps"])
        opt.t = int(state["t"])
        opt.m = np.array(state["m"], dtype=np.float64)
        opt.v = np.array(state["v"], dtype=np.float64)
        return opt
