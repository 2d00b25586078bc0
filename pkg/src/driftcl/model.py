"""Two-part regressor: a static LSTM feature extractor and a dynamic dense head.

static:  LSTM(1 -> 16) over the window, flatten (L*16), dense -> 64, ReLU
dynamic: dense 64 -> 64, ReLU, dense 64 -> 256, ReLU, dense 256 -> 1

Each part owns its Adam optimizer. A fresh model has all dynamic weights set
to one, dynamic biases at zero, and the dynamic part frozen.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .data import FormatError
from .engine import LSTM, Adam, Dense, DimensionError, Flatten, Parameter, ReLU, Sequential

HIDDEN_SIZE = 16
STATIC_WIDTH = 64
DYNAMIC_WIDTHS = (64, 256)
STATIC_WEIGHT_DECAY = 0.0
DYNAMIC_WEIGHT_DECAY = 1e-4
SNAPSHOT_FORMAT = "driftcl-model"
SNAPSHOT_VERSION = 1
PARTS = ("static", "dynamic")
# An all-ones head with zero biases multiplies the summed static features by
# 64 * 256; dividing it out keeps a fresh model's output on the angle scale.
ONES_GAIN_SCALE = 1.0 / (DYNAMIC_WIDTHS[0] * DYNAMIC_WIDTHS[1])


def parameter_count(window_length: int) -> int:
    """Closed-form parameter count for a window of ``window_length`` samples."""
    H, L = HIDDEN_SIZE, window_length
    lstm = 4 * (H * (1 + H) + H)
    head = H * L * STATIC_WIDTH + STATIC_WIDTH
    d1, d2 = DYNAMIC_WIDTHS
    dynamic = (STATIC_WIDTH * d1 + d1) + (d1 * d2 + d2) + (d2 + 1)
    return lstm + head + dynamic


class TwoPartModel:
    def __init__(self, window_length: int = 30, seed=0, dynamic_init: str = "ones", lr: float = 1e-3,
                 output_scale: float | None = None):
        if window_length < 1:
            raise ValueError("window_length must be positive")
        self.window_length = int(window_length)
        if output_scale is None:
            output_scale = ONES_GAIN_SCALE if dynamic_init == "ones" else 1.0
        self.output_scale = float(output_scale)
        rng = np.random.default_rng(seed)
        self.lstm = LSTM(1, HIDDEN_SIZE, rng, name="static.lstm")
        self.static = Sequential(self.lstm, Flatten(),
                                 Dense(HIDDEN_SIZE * window_length, STATIC_WIDTH, rng, "static.head"), ReLU())
        d1, d2 = DYNAMIC_WIDTHS
        self.dynamic = Sequential(Dense(STATIC_WIDTH, d1, rng, "dynamic.l1"), ReLU(),
                                  Dense(d1, d2, rng, "dynamic.l2"), ReLU(),
                                  Dense(d2, 1, rng, "dynamic.out"))
        if dynamic_init == "ones":
            for p in self.dynamic.parameters():
                p.value[...] = 1.0 if p.name.endswith("weight") else 0.0
            self.set_frozen("dynamic", True)
        elif dynamic_init != "random":
            raise ValueError(f"unknown dynamic_init {dynamic_init!r}")
        self.static_optimizer = Adam(self.static.parameters(), lr=lr, weight_decay=STATIC_WEIGHT_DECAY)
        self.dynamic_optimizer = Adam(self.dynamic.parameters(), lr=lr, weight_decay=DYNAMIC_WEIGHT_DECAY)

    # -- parameters -----------------------------------------------------

    def parameters(self, part: str | None = None) -> list[Parameter]:
        if part is None:
            return self.static.parameters() + self.dynamic.parameters()
        if part not in PARTS:
            raise ValueError(f"part must be one of {PARTS}")
        return getattr(self, part).parameters()

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def set_frozen(self, part: str, frozen: bool) -> None:
        for p in self.parameters(part):
            p.frozen = bool(frozen)

    def is_frozen(self, part: str) -> bool:
        return all(p.frozen for p in self.parameters(part))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- inference --------------------------------------------------------

    def _check_windows(self, windows: np.ndarray) -> np.ndarray:
        w = np.asarray(windows, dtype=np.float64)
        if w.ndim == 2:
            w = w[:, :, None]
        if w.ndim != 3 or w.shape[1] != self.window_length or w.shape[2] != 1:
            raise DimensionError(f"expected windows of shape (n, {self.window_length}, 1), got {np.shape(windows)}")
        return w

    def features(self, windows: np.ndarray, chunk: int = 2048) -> np.ndarray:
        w = self._check_windows(windows)
        return np.concatenate([self.static(w[i:i + chunk]) for i in range(0, len(w), chunk)] or
                              [np.empty((0, STATIC_WIDTH))])

    def head(self, features: np.ndarray) -> np.ndarray:
        return self.dynamic(features)[:, 0] * self.output_scale

    def predict(self, windows: np.ndarray) -> np.ndarray:
        """Angles in degrees for a stack of windows, shape (n,)."""
        return self.head(self.features(windows))

    def forward(self, window: np.ndarray) -> float:
        w = np.asarray(window, dtype=np.float64).reshape(-1)
        if w.size != self.window_length:
            raise DimensionError(f"window has {w.size} samples, model expects {self.window_length}")
        return float(self.predict(w[None, :, None])[0])

    # training passes keep the caches for backward
    def forward_train(self, windows: np.ndarray):
        feats, c_static = self.static.forward(self._check_windows(windows))
        out, c_dyn = self.dynamic.forward(feats)
        return out[:, 0] * self.output_scale, (c_static, c_dyn)

    def backward(self, cache, grad_pred: np.ndarray) -> None:
        c_static, c_dyn = cache
        g = self.dynamic.backward(c_dyn, grad_pred[:, None] * self.output_scale)
        self.static.backward(c_static, g)

    # -- persistence --------------------------------------------------------

    def snapshot(self) -> "ModelSnapshot":
        return ModelSnapshot.capture(self)

    def save(self, path: str | Path) -> None:
        self.snapshot().save(path)

    @classmethod
    def load(cls, path: str | Path) -> "TwoPartModel":
        return ModelSnapshot.load(path).restore()


def new_model(window_length: int = 30, seed: int = 0) -> TwoPartModel:
    return TwoPartModel(window_length, seed)


def set_frozen(model: TwoPartModel, part: str, frozen: bool) -> None:
    model.set_frozen(part, frozen)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ModelSnapshot:
    """Immutable copy of parameter values, freeze flags and optimizer states."""

    window_length: int
    output_scale: float
    values: Mapping[str, np.ndarray]
    frozen: Mapping[str, bool]
    optimizer: Mapping[str, tuple[np.ndarray, np.ndarray, int]]

    @classmethod
    def capture(cls, model: TwoPartModel) -> "ModelSnapshot":
        values, frozen, opt = {}, {}, {}
        for optimizer in (model.static_optimizer, model.dynamic_optimizer):
            for p, s in zip(optimizer.params, optimizer.state):
                values[p.name] = _readonly(p.value)
                frozen[p.name] = p.frozen
                opt[p.name] = (_readonly(s.m), _readonly(s.v), s.step_count)
        return cls(model.window_length, model.output_scale, MappingProxyType(values), MappingProxyType(frozen),
                   MappingProxyType(opt))

    def restore(self) -> TwoPartModel:
        model = TwoPartModel(self.window_length, seed=0, output_scale=self.output_scale)
        for optimizer in (model.static_optimizer, model.dynamic_optimizer):
            for p, s in zip(optimizer.params, optimizer.state):
                if p.name not in self.values or self.values[p.name].shape != p.value.shape:
                    raise FormatError(f"snapshot has no compatible entry for {p.name}")
                p.value[...] = self.values[p.name]
                p.frozen = bool(self.frozen[p.name])
                m, v, steps = self.optimizer[p.name]
                s.m[...] = m
                s.v[...] = v
                s.step_count = int(steps)
        return model

    def predict(self, windows: np.ndarray) -> np.ndarray:
        return self.restore().predict(windows)

    # on disk: an .npz archive with a JSON header under "__meta__" and arrays
    # "<name>", "<name>.m", "<name>.v"
    def save(self, path: str | Path) -> None:
        meta = {
            "format": SNAPSHOT_FORMAT,
            "version": SNAPSHOT_VERSION,
            "window_length": self.window_length,
            "output_scale": self.output_scale,
            "parameters": [
                {"name": k, "shape": list(v.shape), "frozen": self.frozen[k], "step_count": self.optimizer[k][2]}
                for k, v in self.values.items()
            ],
        }
        arrays = {"__meta__": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
        for k, v in self.values.items():
            arrays[k] = v
            arrays[k + ".m"] = self.optimizer[k][0]
            arrays[k + ".v"] = self.optimizer[k][1]
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path: str | Path) -> "ModelSnapshot":
        try:
            with np.load(path, allow_pickle=False) as z:
                meta = json.loads(bytes(z["__meta__"]).decode())
                if meta.get("format") != SNAPSHOT_FORMAT or meta.get("version") != SNAPSHOT_VERSION:
                    raise FormatError(f"{path}: not a version-{SNAPSHOT_VERSION} model snapshot")
                values, frozen, opt = {}, {}, {}
                for entry in meta["parameters"]:
                    k = entry["name"]
                    v = z[k]
                    if list(v.shape) != entry["shape"]:
                        raise FormatError(f"{path}: shape mismatch for {k}")
                    values[k] = _readonly(v)
                    frozen[k] = bool(entry["frozen"])
                    opt[k] = (_readonly(z[k + ".m"]), _readonly(z[k + ".v"]), int(entry["step_count"]))
        except FormatError:
            raise
        except Exception as exc:  # zip, json and key errors all mean a corrupt file
            raise FormatError(f"{path}: corrupt model snapshot ({exc})") from exc
        snap = cls(int(meta["window_length"]), float(meta["output_scale"]), MappingProxyType(values), MappingProxyType(frozen),
                   MappingProxyType(opt))
        snap.restore()  # validates names and shapes
        return snap


__all__ = [
    "TwoPartModel", "ModelSnapshot", "new_model", "set_frozen", "parameter_count",
]
