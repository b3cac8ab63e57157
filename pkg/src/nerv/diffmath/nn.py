"""Dense networks and sinusoidal positional encoding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GradientTape, Tensor

ACTIVATIONS = {
    "relu": ad.relu,
    "softplus": ad.softplus,
    "sigmoid": ad.sigmoid,
    "identity": lambda x: x,
}


@dataclass(frozen=True)
class PositionalEncodingSpec:
    num_frequencies: int
    include_identity: bool = True

    def __post_init__(self):
        if self.num_frequencies < 1:
            raise ValueError("num_frequencies must be >= 1")

    def width(self, in_dim: int) -> int:
        return in_dim * (2 * self.num_frequencies + int(self.include_identity))


def positional_encode(x, spec: PositionalEncodingSpec) -> Tensor:
    """Lift ``x`` of shape (..., d) to [x, sin(2^0 pi x), cos(2^0 pi x), ...].

    Each frequency contributes a block of d sines followed by d cosines.
    """
    xv = ad.value_of(x)
    if not np.all(np.isfinite(xv)):
        raise ValueError("positional_encode: non-finite input")
    x = ad.as_tensor(x)
    d = x.shape[-1]
    lead = x.shape[:-1]
    freqs = (2.0 ** np.arange(spec.num_frequencies)) * np.pi
    xb = ad.reshape(x, lead + (1, d)) * freqs[:, None]
    sc = ad.stack([ad.sin(xb), ad.cos(xb)], axis=-2)  # (..., L, 2, d)
    feats = ad.reshape(sc, lead + (2 * spec.num_frequencies * d,))
    if spec.include_identity:
        feats = ad.concatenate([x, feats], axis=-1)
    return feats


class DenseNetwork:
    """Stack of affine layers, each followed by its own activation."""

    def __init__(self, widths, activations, rng=None, name="net"):
        widths = [int(w) for w in widths]
        if len(activations) != len(widths) - 1:
            raise ValueError("need one activation per layer")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.name = name
        self.activations = list(activations)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(
                Tensor(rng.uniform(-lim, lim, (fan_in, fan_out)), requires_grad=True)
            )
            self.biases.append(Tensor(np.zeros(fan_out), requires_grad=True))

    @classmethod
    def mlp(cls, in_dim, hidden_width, hidden_layers, out_dim, rng=None, name="net"):
        """``hidden_layers`` ReLU layers of ``hidden_width`` then a linear output."""
        widths = [in_dim] + [hidden_width] * hidden_layers + [out_dim]
        acts = ["relu"] * hidden_layers + ["identity"]
        return cls(widths, acts, rng=rng, name=name)

    @property
    def in_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def widths(self) -> list[int]:
        return [self.in_width] + [w.shape[1] for w in self.weights]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{self.name}.{i}.weight"] = w
            out[f"{self.name}.{i}.bias"] = b
        return out

    def __call__(self, x) -> Tensor:
        return forward(self, x)


def forward(net: DenseNetwork, x, tape: GradientTape | None = None) -> Tensor:
    """Evaluate ``net`` on x of shape (..., in_width).

    Passing a tape simply records the evaluation on it; any already active
    tape records it as well.
    """
    if tape is not None:
        with tape:
            return forward(net, x)
    x = ad.as_tensor(x)
    if x.shape[-1] != net.in_width:
        raise ValueError(f"{net.name}: expected width {net.in_width}, got {x.shape[-1]}")
    h = x
    for w, b, act in zip(net.weights, net.biases, net.activations):
        h = ACTIVATIONS[act](ad.matmul(h, w) + b)
    if not np.all(np.isfinite(h.value)):
        raise FloatingPointError(f"{net.name}: non-finite activation")
    return h
