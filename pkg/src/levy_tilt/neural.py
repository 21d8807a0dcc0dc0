"""Trainable components: temporal encoder, MLP heads, drifts, flat parameter store.

All parameters live in one float64 vector with a fixed layout map.  A
:class:`Net` binds a torch view of that vector so the same forward code serves
training (with autograd), plain evaluation and finite-difference checks.
"""
from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .rng import Purpose, stream

LN2 = math.log(2.0)
DRIFT_KINDS = ("ou", "double_well", "neural", "zero")


def softplus_inv(v: float) -> float:
    return float(v + math.log(-math.expm1(-v)))


@dataclass
class DriftSpec:
    """A drift with concrete parameter values (ground truth or learned).

    ``kind`` is one of ``ou`` (``theta * (mu - x)``), ``double_well``
    (``theta1 * x - theta2 * x**3``), ``neural`` (one-hidden-layer tanh MLP)
    or ``zero``.  ``params`` maps names to per-dimension arrays; a neural
    drift stores ``w0, b0, w1, b1``.
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in DRIFT_KINDS:
            raise ValueError(f"unknown drift kind {self.kind!r}")
        self.params = {k: np.atleast_1d(np.asarray(v, dtype=float)) for k, v in self.params.items()}
        if self.kind == "ou" and np.any(self.params["theta"] <= 0):
            raise ValueError("OU theta must be positive")
        if self.kind == "double_well" and (np.any(self.params["theta1"] <= 0) or np.any(self.params["theta2"] <= 0)):
            raise ValueError("double-well parameters must be positive")

    @classmethod
    def ou(cls, theta, mu):
        return cls("ou", {"theta": theta, "mu": mu})

    @classmethod
    def double_well(cls, theta1, theta2):
        return cls("double_well", {"theta1": theta1, "theta2": theta2})

    @classmethod
    def zero(cls):
        return cls("zero")

    def eval_numpy(self, x):
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.kind == "ou":
            return p["theta"] * (p["mu"] - x)
        if self.kind == "double_well":
            return p["theta1"] * x - p["theta2"] * x**3
        if self.kind == "neural":
            h = np.tanh(x @ p["w0"].reshape(x.shape[-1], -1) + p["b0"])
            return h @ p["w1"].reshape(h.shape[-1], -1) + p["b1"]
        return np.zeros_like(x)

    __call__ = eval_numpy

    def named_values(self) -> dict:
        """Flat ``name[i] -> value`` map of the interpretable parameters."""
        out = {}
        if self.kind in ("ou", "double_well"):
            for k, v in self.params.items():
                for i, vi in enumerate(v):
                    out[f"{k}[{i}]"] = float(vi)
        return out

    def to_json(self) -> dict:
        return {"kind": self.kind, "params": {k: v.tolist() for k, v in self.params.items()}}

    @classmethod
    def from_json(cls, doc: dict) -> "DriftSpec":
        return cls(doc["kind"], doc.get("params", {}))


def drift_eval(drift: DriftSpec, x):
    return drift.eval_numpy(x)


@dataclass
class MLPParams:
    """Plain-array MLP: ``weights[i]`` has shape ``(fan_in, fan_out)``."""

    weights: list
    biases: list
    activations: list

    def __post_init__(self):
        for (w0, w1) in zip(self.weights[:-1], self.weights[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise ValueError("layer dimensions do not chain")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise ValueError("bias shape mismatch")


_ACT = {"tanh": torch.tanh, "linear": lambda v: v, "relu": torch.relu}
_ACT_NP = {"tanh": np.tanh, "linear": lambda v: v, "relu": lambda v: np.maximum(v, 0.0)}


def mlp_forward(p: MLPParams, inp):
    h = np.asarray(inp, dtype=float)
    if h.shape[-1] != p.weights[0].shape[0]:
        raise ValueError("input dimension mismatch")
    for w, b, act in zip(p.weights, p.biases, p.activations):
        h = _ACT_NP[act](h @ w + b)
    return h


@dataclass
class ModelConfig:
    """Architecture and fixed constants of a model."""

    kind: str = "tilted"  # or "gaussian"
    dim: int = 1
    horizon: float = 1.0
    n_ref: int = 100
    embed_dim: int = 64
    head_width: int = 256
    head_depth: int = 5
    drift: str = "ou"
    drift_width: int = 32
    a_min: float = 1e-3
    learn_sigma_eps: bool = False
    sigma_eps: float = 0.1
    sigma_init: float = 1.0

    def to_json(self) -> dict:
        return dict(self.__dict__)


def _head_names(kind: str):
    return ("head_a", "head_b") if kind == "tilted" else ("head_u",)


def build_layout(cfg: ModelConfig) -> "OrderedDict[str, tuple]":
    lay = OrderedDict()
    d = cfg.dim
    lay["enc.ref_times"] = (cfg.n_ref,)
    lay["enc.embeddings"] = (cfg.n_ref, cfg.embed_dim)
    lay["enc.log_sharpness"] = (1,)
    for head in _head_names(cfg.kind):
        fan = cfg.embed_dim
        for i in range(cfg.head_depth):
            lay[f"{head}.w{i}"] = (fan, cfg.head_width)
            lay[f"{head}.b{i}"] = (cfg.head_width,)
            fan = cfg.head_width
        lay[f"{head}.w{cfg.head_depth}"] = (fan, d)
        lay[f"{head}.b{cfg.head_depth}"] = (d,)
    if cfg.drift == "ou":
        lay["drift.theta_raw"] = (d,)
        lay["drift.mu"] = (d,)
    elif cfg.drift == "double_well":
        lay["drift.theta1_raw"] = (d,)
        lay["drift.theta2_raw"] = (d,)
    elif cfg.drift == "neural":
        lay["drift.w0"] = (d, cfg.drift_width)
        lay["drift.b0"] = (cfg.drift_width,)
        lay["drift.w1"] = (cfg.drift_width, d)
        lay["drift.b1"] = (d,)
    if cfg.kind == "gaussian":
        lay["diffusion.log_sigma"] = (d,)
    if cfg.learn_sigma_eps:
        lay["obs.log_sigma_eps"] = (d,)
    out = OrderedDict()
    off = 0
    for name, shape in lay.items():
        size = int(np.prod(shape))
        out[name] = (off, shape)
        off += size
    return out


class ModelParams:
    """All trainable parameters of one model as a flat float64 vector."""

    def __init__(self, config: ModelConfig, values: Optional[np.ndarray] = None,
                 layout: Optional[OrderedDict] = None, constants: Optional[dict] = None):
        self.config = config
        self.layout = layout if layout is not None else build_layout(config)
        n = self.size_of_layout(self.layout)
        self.values = np.zeros(n) if values is None else np.asarray(values, dtype=float).copy()
        if self.values.shape != (n,):
            raise ValueError("parameter vector does not match layout")
        self.constants = dict(constants or {})

    @staticmethod
    def size_of_layout(layout) -> int:
        if not layout:
            return 0
        off, shape = next(reversed(layout.values()))
        return off + int(np.prod(shape))

    @property
    def a_min(self) -> float:
        return self.config.a_min

    @property
    def size(self) -> int:
        return self.values.size

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.values.copy(), self.layout, self.constants)

    # flat layout -------------------------------------------------------
    def flatten(self, tensors: dict) -> np.ndarray:
        out = np.empty(self.size)
        for name, (off, shape) in self.layout.items():
            out[off:off + int(np.prod(shape))] = np.asarray(tensors[name], dtype=float).reshape(-1)
        return out

    def unflatten(self, flat=None) -> "OrderedDict[str, np.ndarray]":
        flat = self.values if flat is None else flat
        return OrderedDict((name, flat[off:off + int(np.prod(shape))].reshape(shape))
                           for name, (off, shape) in self.layout.items())

    def slices(self):
        return [(name, slice(off, off + int(np.prod(shape)))) for name, (off, shape) in self.layout.items()]

    def __getitem__(self, name):
        off, shape = self.layout[name]
        return self.values[off:off + int(np.prod(shape))].reshape(shape)

    def __setitem__(self, name, value):
        off, shape = self.layout[name]
        self.values[off:off + int(np.prod(shape))] = np.asarray(value, dtype=float).reshape(-1)

    # evaluation helpers --------------------------------------------------
    def bind(self, flat: Optional[torch.Tensor] = None) -> "Net":
        if flat is None:
            flat = torch.from_numpy(self.values.copy())
        return Net(self, flat)

    def tilt_arrays(self, times):
        with torch.no_grad():
            a, b = self.bind().tilt(torch.as_tensor(np.asarray(times, dtype=float)))
        return a.numpy(), b.numpy()

    def drift_numpy(self, x):
        return self.drift_spec().eval_numpy(x)

    def drift_spec(self) -> DriftSpec:
        kind = self.config.drift
        if kind == "ou":
            return DriftSpec.ou(F.softplus(torch.from_numpy(self["drift.theta_raw"].copy())).numpy(), self["drift.mu"])
        if kind == "double_well":
            sp = lambda n: F.softplus(torch.from_numpy(self[n].copy())).numpy()
            return DriftSpec.double_well(sp("drift.theta1_raw"), sp("drift.theta2_raw"))
        if kind == "neural":
            return DriftSpec("neural", {k: self[f"drift.{k}"] for k in ("w0", "b0", "w1", "b1")})
        return DriftSpec.zero()

    def sigma_eps(self) -> np.ndarray:
        if self.config.learn_sigma_eps:
            return np.exp(self["obs.log_sigma_eps"])
        return np.full(self.config.dim, self.config.sigma_eps)

    # persistence ---------------------------------------------------------
    def to_json(self) -> dict:
        return {
            "version": 1,
            "config": self.config.to_json(),
            "layout": [[name, off, list(shape)] for name, (off, shape) in self.layout.items()],
            "values": self.values.tolist(),
            "constants": self.constants,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ModelParams":
        cfg = ModelConfig(**doc["config"])
        layout = OrderedDict((name, (off, tuple(shape))) for name, off, shape in doc["layout"])
        return cls(cfg, np.asarray(doc["values"], dtype=float), layout, doc.get("constants", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "ModelParams":
        return cls.from_json(json.loads(Path(path).read_text()))


def init_params(config: ModelConfig, seed: int = 0, drift_init: Optional[dict] = None) -> ModelParams:
    """Initial parameters.

    Hidden layers are fan-in scaled uniform, head output layers are zero so
    training starts from ``A = -(a_min + ln 2)``, ``B = 0`` (or ``u = 0`` for
    the Gaussian model).  Reference times start on a uniform grid of
    ``[0, horizon]``.
    """
    p = ModelParams(config)
    rng = stream(seed, Purpose.INIT)
    T = config.horizon
    p["enc.ref_times"] = np.linspace(0.0, T, config.n_ref)
    p["enc.embeddings"] = rng.standard_normal((config.n_ref, config.embed_dim))
    p["enc.log_sharpness"] = [math.log(max(config.n_ref - 1, 1) / T)]
    for head in _head_names(config.kind):
        for i in range(config.head_depth):
            fan_in, fan_out = p.layout[f"{head}.w{i}"][1]
            lim = math.sqrt(3.0 / fan_in)
            p[f"{head}.w{i}"] = rng.uniform(-lim, lim, (fan_in, fan_out))
    drift_init = drift_init or {}
    if config.drift == "ou":
        p["drift.theta_raw"] = softplus_inv(drift_init.get("theta", 1.0))
        p["drift.mu"] = drift_init.get("mu", 0.0)
    elif config.drift == "double_well":
        p["drift.theta1_raw"] = softplus_inv(drift_init.get("theta1", 1.0))
        p["drift.theta2_raw"] = softplus_inv(drift_init.get("theta2", 1.0))
    elif config.drift == "neural":
        lim = math.sqrt(3.0 / config.dim)
        p["drift.w0"] = rng.uniform(-lim, lim, p.layout["drift.w0"][1])
    if config.kind == "gaussian":
        p["diffusion.log_sigma"] = math.log(config.sigma_init)
    if config.learn_sigma_eps:
        p["obs.log_sigma_eps"] = math.log(config.sigma_eps)
    return p


class Net:
    """Torch forward passes over a bound flat parameter tensor."""

    def __init__(self, params: ModelParams, flat: torch.Tensor):
        self.params = params
        self.config = params.config
        self.flat = flat
        # one split node instead of a slice per access keeps backward O(size)
        items = sorted(params.layout.items(), key=lambda kv: kv[1][0])
        sizes = [int(np.prod(shape)) for _, (_, shape) in items]
        self._views = {name: v.view(shape) for (name, (_, shape)), v in zip(items, torch.split(flat, sizes))}

    def __getitem__(self, name) -> torch.Tensor:
        return self._views[name]

    def encode(self, t: torch.Tensor) -> torch.Tensor:
        """Laplacian-kernel Nadaraya-Watson embedding, ``(n,) -> (n, embed_dim)``."""
        t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
        s = torch.exp(self["enc.log_sharpness"])
        logits = -s * torch.abs(t[:, None] - self["enc.ref_times"][None, :])
        w = torch.softmax(logits, dim=1)
        return w @ self["enc.embeddings"]

    def weights(self, t: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
        s = torch.exp(self["enc.log_sharpness"])
        return torch.softmax(-s * torch.abs(t[:, None] - self["enc.ref_times"][None, :]), dim=1)

    def head(self, name: str, e: torch.Tensor) -> torch.Tensor:
        h = e
        depth = self.config.head_depth
        for i in range(depth):
            h = torch.tanh(h @ self[f"{name}.w{i}"] + self[f"{name}.b{i}"])
        return h @ self[f"{name}.w{depth}"] + self[f"{name}.b{depth}"]

    def tilt(self, t: torch.Tensor):
        e = self.encode(t)
        a = -(self.config.a_min + F.softplus(self.head("head_a", e)))
        b = self.head("head_b", e)
        return a, b

    def correction(self, t: torch.Tensor) -> torch.Tensor:
        return self.head("head_u", self.encode(t))

    def drift(self, x: torch.Tensor) -> torch.Tensor:
        kind = self.config.drift
        if kind == "ou":
            return F.softplus(self["drift.theta_raw"]) * (self["drift.mu"] - x)
        if kind == "double_well":
            return F.softplus(self["drift.theta1_raw"]) * x - F.softplus(self["drift.theta2_raw"]) * x**3
        if kind == "neural":
            h = torch.tanh(x @ self["drift.w0"] + self["drift.b0"])
            return h @ self["drift.w1"] + self["drift.b1"]
        return torch.zeros_like(x)

    def sigma(self) -> torch.Tensor:
        return torch.exp(self["diffusion.log_sigma"])

    def sigma_eps(self) -> torch.Tensor:
        if self.config.learn_sigma_eps:
            return torch.exp(self["obs.log_sigma_eps"])
        return torch.full((self.config.dim,), float(self.config.sigma_eps), dtype=torch.float64)

    def l2(self) -> torch.Tensor:
        return torch.sum(self.flat * self.flat)


def encode_time(params: ModelParams, t):
    with torch.no_grad():
        return params.bind().encode(torch.as_tensor(np.atleast_1d(np.asarray(t, dtype=float)))).numpy()


def tilt_coeffs(params: ModelParams, t: float):
    from .tilting import TiltCoeffs

    a, b = params.tilt_arrays([t])
    return TiltCoeffs(a[0], b[0])


class GradientError(FloatingPointError):
    def __init__(self, index: int, name: str):
        super().__init__(f"non-finite gradient at flat index {index} ({name})")
        self.index = index
        self.name = name


def backward(loss: torch.Tensor, flat: torch.Tensor, params: Optional[ModelParams] = None) -> np.ndarray:
    """Reverse-mode gradient of a scalar ``loss`` with respect to ``flat``.

    Returns a numpy vector; raises :class:`GradientError` naming the first
    non-finite entry.  Quantities wrapped in ``detach`` (jump counts, accepted
    mixing scales, Gaussian noise) contribute no gradient.
    """
    if loss.requires_grad:
        (g,) = torch.autograd.grad(loss, flat, allow_unused=True)
    else:
        g = None
    grad = np.zeros(flat.numel()) if g is None else g.detach().numpy().copy()
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        name = "?"
        if params is not None:
            for n, sl in params.slices():
                if sl.start <= bad[0] < sl.stop:
                    name = n
        raise GradientError(int(bad[0]), name)
    return grad


def finite_difference_grad(fn, x: np.ndarray, indices, h: float = 1e-5, order: int = 2) -> np.ndarray:
    """Central finite differences of scalar ``fn`` at ``x`` for the given coordinates.

    ``order=4`` uses the five-point stencil.
    """
    x = np.asarray(x, dtype=float)
    out = np.empty(len(indices))
    for n, i in enumerate(indices):
        def at(delta):
            xp = x.copy()
            xp[i] += delta
            return float(fn(xp))
        if order == 2:
            out[n] = (at(h) - at(-h)) / (2 * h)
        else:
            out[n] = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h)
    return out
