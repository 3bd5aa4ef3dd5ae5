"""Weighted atom clouds: the discrete measure type shared by every model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import PhasePoint


@dataclass
class WeightedCloud:
    """Atoms ``(x_i, theta_i)`` with nonnegative weights ``w_i``.

    Stored column-wise: ``x`` and ``theta`` have shape ``(N, n)``.
    ``diagnostics`` carries bookkeeping such as truncation or backscatter mass.
    """

    x: np.ndarray
    theta: np.ndarray
    weights: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.ascontiguousarray(np.asarray(self.x, dtype=float).reshape(len(self.weights), -1))
        self.theta = np.ascontiguousarray(np.asarray(self.theta, dtype=float).reshape(self.x.shape))
        self.weights = np.ascontiguousarray(np.asarray(self.weights, dtype=float).reshape(-1))
        if np.any(self.weights < 0.0) or not np.all(np.isfinite(self.weights)):
            raise ValueError("cloud weights must be finite and nonnegative")

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def mass(self) -> float:
        return float(np.sum(self.weights))

    def __len__(self) -> int:
        return self.weights.size

    def atoms(self):
        for xi, ti in zip(self.x, self.theta):
            yield PhasePoint(xi, ti)

    def scaled(self, factor: float) -> "WeightedCloud":
        return WeightedCloud(self.x, self.theta, self.weights * factor, dict(self.diagnostics))

    @classmethod
    def concatenate(cls, clouds, diagnostics=None) -> "WeightedCloud":
        clouds = list(clouds)
        if not clouds:
            raise ValueError("nothing to concatenate")
        x = np.concatenate([c.x for c in clouds])
        th = np.concatenate([c.theta for c in clouds])
        w = np.concatenate([c.weights for c in clouds])
        if diagnostics is None:
            diagnostics = {}
            for c in clouds:
                for k, v in c.diagnostics.items():
                    if isinstance(v, (int, float)):
                        diagnostics[k] = diagnostics.get(k, 0.0) + v
        return cls(x, th, w, diagnostics)

    @classmethod
    def from_atoms(cls, atoms, weights) -> "WeightedCloud":
        atoms = list(atoms)
        x = np.array([a.x for a in atoms])
        th = np.array([a.theta.components for a in atoms])
        return cls(x, th, np.asarray(weights, dtype=float))
