"""Parameter containers, layer initializers, and the Adam update rule."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class Module:
    """Minimal parameter container. Submodules and Parameters are attributes."""

    def parameters(self):
        """Yield (name, Tensor) pairs in a stable attribute order."""
        for key in sorted(self.__dict__):
            val = self.__dict__[key]
            if isinstance(val, Tensor) and val.requires_grad:
                yield key, val
            elif isinstance(val, Module):
                for sub, p in val.parameters():
                    yield f"{key}.{sub}", p
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        for sub, p in item.parameters():
                            yield f"{key}.{i}.{sub}", p
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{key}.{i}", item

    def zero_grad(self):
        for _, p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.parameters()}

    def load_state_dict(self, state: dict):
        own = dict(self.parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr

    def num_parameters(self) -> int:
        return sum(p.data.size for _, p in self.parameters())


def param(array, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(array, dtype=dtype), requires_grad=True)


def kaiming_conv(rng: np.random.Generator, c_out, c_in, kh, kw, dtype=np.float32):
    std = math.sqrt(2.0 / (c_in * kh * kw))
    return param(rng.normal(0.0, std, size=(c_out, c_in, kh, kw)), dtype)


def kaiming_linear(rng: np.random.Generator, n_in, n_out, dtype=np.float32):
    std = math.sqrt(2.0 / n_in)
    return param(rng.normal(0.0, std, size=(n_in, n_out)), dtype)


def zeros(*shape, dtype=np.float32):
    return param(np.zeros(shape), dtype)


class Adam:
    """Adaptive-moment gradient descent over a fixed parameter list."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)  # [(name, Tensor)]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.step_count
        bias2 = 1.0 - b2**self.step_count
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            g = g.astype(p.data.dtype, copy=False)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def state_dict(self) -> dict:
        out = {"__step__": np.asarray([self.step_count], dtype=np.float32)}
        for name in self.m:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state_dict(self, state: dict):
        self.step_count = int(state["__step__"][0])
        for name in self.m:
            self.m[name] = np.asarray(state[f"m.{name}"], dtype=np.float32)
            self.v[name] = np.asarray(state[f"v.{name}"], dtype=np.float32)
