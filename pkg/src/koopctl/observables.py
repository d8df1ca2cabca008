"""Lifting maps from plant states to observable vectors.

A map is an ordered tuple of primitive features, each the product of

* a monomial in the state components,
* zero or more sine/cosine factors of linear state combinations, and
* an optional rational factor 1 / (offset + scale * cos(c . x)).

The first ``state_dim`` features must be the raw state components in
order, so that the decoding operator [I 0] recovers the state exactly.
Feature ordering is frozen: every downstream matrix is indexed against it
and serialized map descriptors record it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Feature:
    """One scalar observable, evaluated elementwise over state batches."""

    label: str
    poly: tuple = ()     # monomial exponents, one per state component
    trigs: tuple = ()    # ((kind, coeffs), ...) with kind "sin" or "cos"
    denom: tuple = None  # (offset, scale, coeffs) or None

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Evaluate on states x of shape (..., d_x); returns shape (...)."""
        x = np.asarray(x, dtype=float)
        val = np.ones(x.shape[:-1])
        for i, p in enumerate(self.poly):
            if p == 1:
                val = val * x[..., i]
            elif p:
                val = val * x[..., i] ** p
        for kind, coeffs in self.trigs:
            arg = _linear_combination(x, coeffs)
            val = val * (np.sin(arg) if kind == "sin" else np.cos(arg))
        if self.denom is not None:
            offset, scale, coeffs = self.denom
            val = val / (offset + scale * np.cos(_linear_combination(x, coeffs)))
        return val

    def to_descriptor(self) -> dict:
        d = {"label": self.label, "poly": list(self.poly),
             "trigs": [[k, list(c)] for k, c in self.trigs]}
        if self.denom is not None:
            d["denom"] = {"offset": self.denom[0], "scale": self.denom[1],
                          "coeffs": list(self.denom[2])}
        return d


def _linear_combination(x, coeffs):
    # Explicit accumulation in index order keeps evaluation bitwise
    # reproducible across batch shapes (no dot-product reductions).
    acc = np.zeros(x.shape[:-1])
    for i, c in enumerate(coeffs):
        if c:
            acc = acc + c * x[..., i]
    return acc


def feature_from_descriptor(d: dict) -> Feature:
    denom = None
    if d.get("denom") is not None:
        dd = d["denom"]
        denom = (float(dd["offset"]), float(dd["scale"]), tuple(dd["coeffs"]))
    return Feature(
        label=d["label"],
        poly=tuple(int(p) for p in d.get("poly", [])),
        trigs=tuple((k, tuple(c)) for k, c in d.get("trigs", [])),
        denom=denom,
    )


def state_feature(i: int, d_x: int, label: str) -> Feature:
    exps = [0] * d_x
    exps[i] = 1
    return Feature(label=label, poly=tuple(exps))


@dataclass(frozen=True)
class ObservableMap:
    """Ordered finite basis psi with the raw state as its leading block."""

    name: str
    state_dim: int
    features: tuple = field(default_factory=tuple)

    def __post_init__(self):
        for i in range(self.state_dim):
            f = self.features[i]
            want = tuple(1 if j == i else 0 for j in range(self.state_dim))
            if f.poly != want or f.trigs or f.denom is not None:
                raise ValueError(
                    f"feature {i} must be the raw state component x[{i}]"
                )

    @property
    def dim(self) -> int:
        return len(self.features)

    @property
    def labels(self):
        return [f.label for f in self.features]

    def __call__(self, x) -> np.ndarray:
        """Lift a single state (d_x,) or a batch (..., d_x) to (..., d_psi)."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.state_dim:
            raise ValueError(
                f"state has dimension {x.shape[-1]}, map expects {self.state_dim}"
            )
        return np.stack([f.evaluate(x) for f in self.features], axis=-1)

    def to_descriptor(self) -> dict:
        return {"name": self.name, "state_dim": self.state_dim,
                "features": [f.to_descriptor() for f in self.features]}


def map_from_descriptor(d: dict) -> ObservableMap:
    return ObservableMap(
        name=d["name"],
        state_dim=int(d["state_dim"]),
        features=tuple(feature_from_descriptor(f) for f in d["features"]),
    )


def descriptor_hash(descriptor: dict) -> str:
    blob = json.dumps(descriptor, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def map_hash(m: ObservableMap) -> str:
    return descriptor_hash(m.to_descriptor())


def single_pendulum_map() -> ObservableMap:
    """9-feature map [x; 1; x^2; sin(x); cos(x)] with blocks elementwise."""
    feats = [
        state_feature(0, 2, "theta"),
        state_feature(1, 2, "theta_dot"),
        Feature(label="1"),
        Feature(label="theta^2", poly=(2, 0)),
        Feature(label="theta_dot^2", poly=(0, 2)),
        Feature(label="sin(theta)", trigs=(("sin", (1.0, 0.0)),)),
        Feature(label="sin(theta_dot)", trigs=(("sin", (0.0, 1.0)),)),
        Feature(label="cos(theta)", trigs=(("cos", (1.0, 0.0)),)),
        Feature(label="cos(theta_dot)", trigs=(("cos", (0.0, 1.0)),)),
    ]
    return ObservableMap(name="single_pendulum", state_dim=2,
                         features=tuple(feats))


def double_pendulum_map() -> ObservableMap:
    """14-feature map with rational terms scaled by D = 1/(3 - 2 cos(th_r)).

    th_r = th1 - th2; the denominator stays inside [1, 5], so every
    feature is bounded on bounded states.
    """
    D = (3.0, -2.0, (1.0, -1.0, 0.0, 0.0))  # 1 / (3 - 2 cos(th1 - th2))

    def rational(label, poly=(), trigs=()):
        return Feature(label=label, poly=poly, trigs=trigs, denom=D)

    feats = [
        state_feature(0, 4, "th1"),
        state_feature(1, 4, "th2"),
        state_feature(2, 4, "th1_dot"),
        state_feature(3, 4, "th2_dot"),
        Feature(label="1"),
        rational("D*sin(th1)", trigs=(("sin", (1, 0, 0, 0)),)),
        rational("D*sin(th_r)", trigs=(("sin", (1, -1, 0, 0)),)),
        rational("D*sin(th1-2*th2)", trigs=(("sin", (1, -2, 0, 0)),)),
        rational("D*sin(th_r)*cos(th1)",
                 trigs=(("sin", (1, -1, 0, 0)), ("cos", (1, 0, 0, 0)))),
        rational("D*cos(th_r)*sin(th1)",
                 trigs=(("cos", (1, -1, 0, 0)), ("sin", (1, 0, 0, 0)))),
        rational("D*th1_dot^2*sin(th_r)", poly=(0, 0, 2, 0),
                 trigs=(("sin", (1, -1, 0, 0)),)),
        rational("D*th2_dot^2*sin(th_r)", poly=(0, 0, 0, 2),
                 trigs=(("sin", (1, -1, 0, 0)),)),
        rational("D*th1_dot^2*sin(2*th_r)", poly=(0, 0, 2, 0),
                 trigs=(("sin", (2, -2, 0, 0)),)),
        rational("D*th2_dot^2*sin(2*th_r)", poly=(0, 0, 0, 2),
                 trigs=(("sin", (2, -2, 0, 0)),)),
    ]
    return ObservableMap(name="double_pendulum", state_dim=4,
                         features=tuple(feats))


def decoding_operator(m: ObservableMap) -> np.ndarray:
    """Binary [I_{d_x} 0] extracting the state from the lifted vector."""
    a = np.zeros((m.state_dim, m.dim))
    a[:, : m.state_dim] = np.eye(m.state_dim)
    return a


def evaluate_batch(m: ObservableMap, states) -> np.ndarray:
    """Lift a list of states into a (d_psi, N) matrix, one column per state.

    Raises on non-finite feature values, naming the offending state index.
    """
    states = np.asarray(states, dtype=float)
    if states.size == 0:
        return np.zeros((m.dim, 0))
    if states.ndim == 1:
        states = states.reshape(1, -1)
    with np.errstate(all="ignore"):  # non-finite values are flagged below
        cols = m(states).T
    bad = np.nonzero(~np.all(np.isfinite(cols), axis=0))[0]
    if bad.size:
        raise ValueError(
            f"non-finite feature values at state index {int(bad[0])}"
        )
    return cols


def polynomial_map(name: str, degrees, d_x: int = 1) -> ObservableMap:
    """Monomial map for scalar-state systems, e.g. degrees (1, 2, 3).

    The first degree must be 1 so the state leads the feature list.
    """
    if d_x != 1:
        raise ValueError("polynomial_map only supports scalar states")
    feats = [state_feature(0, 1, "x")]
    for d in degrees[1:]:
        feats.append(Feature(label=f"x^{d}", poly=(int(d),)))
    if tuple(degrees[:1]) != (1,):
        raise ValueError("first degree must be 1 (raw state leads)")
    return ObservableMap(name=name, state_dim=1, features=tuple(feats))
