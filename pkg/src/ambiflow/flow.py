"""Conditional RealNVP flow over pose parameters: affine coupling layers with
soft-clamped log-scales, exact log-density, inverse sampling, and the
all-zeros-latent mode.

Batched throughout: latent/pose rows (R, D), conditions (R, D_c).
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import diffcore as dc
from .diffcore import Node, ParamStore


@dataclass(frozen=True)
class FlowConfig:
    dim: int = 96
    cond_dim: int = 51
    n_layers: int = 8
    hidden: int = 128
    alpha: float = 2.0
    affine: bool = True  # False: additive (volume-preserving) couplings

    def to_dict(self) -> dict:
        return asdict(self)


# paper-scale preset kept for reference (not the desk-scale default)
PAPER_FLOW = FlowConfig(hidden=1024)


def soft_clamp(s_raw, alpha: float = 2.0):
    """(2a/pi) * arctan(s/a): odd, strictly monotone, bounded in (-a, a)."""
    if isinstance(s_raw, Node):
        return dc.mul(dc.arctan(dc.div(s_raw, alpha)), 2.0 * alpha / np.pi)
    return (2.0 * alpha / np.pi) * np.arctan(np.asarray(s_raw, dtype=np.float64) / alpha)


class CouplingLayer:
    """One affine coupling step: the active half is scaled/shifted by MLPs of
    the passive half concatenated with the condition. Partitions alternate
    between even and odd coordinates across consecutive layers."""

    def __init__(self, store: ParamStore, prefix: str, cfg: FlowConfig,
                 active_idx: np.ndarray, passive_idx: np.ndarray,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.active_idx = active_idx
        self.passive_idx = passive_idx
        perm = np.concatenate([passive_idx, active_idx])
        self.unperm = np.argsort(perm)
        d_in = len(passive_idx) + cfg.cond_dim
        d_out = len(active_idx)
        dims = [d_in, cfg.hidden, cfg.hidden, d_out]
        self.shift_mlp = dc.init_mlp(store, f"{prefix}.shift", dims, rng, zero_last=True)
        self.scale_mlp = (
            dc.init_mlp(store, f"{prefix}.scale", dims, rng, zero_last=True)
            if cfg.affine else None
        )

    def _nets(self, passive: Node, cond: Node) -> tuple[Node | None, Node]:
        h = dc.concat([passive, cond], axis=1)
        t = dc.mlp_forward(h, self.shift_mlp)
        s = None
        if self.scale_mlp is not None:
            s = soft_clamp(dc.mlp_forward(h, self.scale_mlp), self.cfg.alpha)
        return s, t

    def forward(self, x: Node, cond: Node) -> tuple[Node, Node]:
        """z-side -> x-side; returns (output, per-row log|det|)."""
        passive = dc.gather(x, (slice(None), self.passive_idx))
        active = dc.gather(x, (slice(None), self.active_idx))
        s, t = self._nets(passive, cond)
        if s is None:
            new_active = dc.add(active, t)
            log_det = Node(np.zeros(x.data.shape[0]))
        else:
            new_active = dc.add(dc.mul(active, dc.exp(s)), t)
            log_det = dc.sum_(s, axis=1)
        out = dc.gather(dc.concat([passive, new_active], axis=1), (slice(None), self.unperm))
        return out, log_det

    def inverse(self, y: Node, cond: Node) -> tuple[Node, Node]:
        """Exact analytic inverse; returns (input, per-row log|det| of the
        inverse map), which is the negated forward log-det."""
        passive = dc.gather(y, (slice(None), self.passive_idx))
        active = dc.gather(y, (slice(None), self.active_idx))
        s, t = self._nets(passive, cond)
        if s is None:
            old_active = dc.sub(active, t)
            log_det_inv = Node(np.zeros(y.data.shape[0]))
        else:
            old_active = dc.mul(dc.sub(active, t), dc.exp(dc.neg(s)))
            log_det_inv = dc.neg(dc.sum_(s, axis=1))
        out = dc.gather(dc.concat([passive, old_active], axis=1), (slice(None), self.unperm))
        return out, log_det_inv


class FlowModel:
    """Stack of coupling layers mapping N(0, I) latents to pose parameters,
    conditioned on a context vector."""

    def __init__(self, cfg: FlowConfig, store: ParamStore | None = None,
                 rng: np.random.Generator | None = None, prefix: str = "flow"):
        self.cfg = cfg
        self.store = store if store is not None else ParamStore()
        rng = rng if rng is not None else np.random.default_rng(0)
        even = np.arange(cfg.dim)[::2]
        odd = np.arange(cfg.dim)[1::2]
        self.layers = []
        for l in range(cfg.n_layers):
            active, passive = (odd, even) if l % 2 == 0 else (even, odd)
            self.layers.append(
                CouplingLayer(self.store, f"{prefix}.l{l}", cfg, active, passive, rng)
            )

    def forward(self, z, cond) -> tuple[Node, Node]:
        """f(z; c) -> (theta, log|det df/dz|) accumulated over all layers."""
        x = dc.as_node(z)
        cond = dc.as_node(cond)
        log_det = Node(np.zeros(x.data.shape[0]))
        for i, layer in enumerate(self.layers):
            x, ld = layer.forward(x, cond)
            if not np.all(np.isfinite(x.data)):
                raise FloatingPointError(f"non-finite flow output at layer {i}")
            log_det = dc.add(log_det, ld)
        return x, log_det

    def inverse(self, theta, cond) -> tuple[Node, Node]:
        """f^{-1}(theta; c) -> (z, log|det| of the inverse)."""
        y = dc.as_node(theta)
        cond = dc.as_node(cond)
        log_det_inv = Node(np.zeros(y.data.shape[0]))
        for i, layer in enumerate(reversed(self.layers)):
            y, ld = layer.inverse(y, cond)
            if not np.all(np.isfinite(y.data)):
                raise FloatingPointError(f"non-finite flow inverse at layer {i}")
            log_det_inv = dc.add(log_det_inv, ld)
        return y, log_det_inv

    def log_prob(self, theta, cond) -> Node:
        """Exact log-density via the change of variables: standard-normal
        base log-density of z = f^{-1}(theta) minus the forward log-det."""
        z, log_det_inv = self.inverse(theta, cond)
        base = dc.sub(
            dc.mul(dc.sumsq(z, axis=1), -0.5),
            0.5 * self.cfg.dim * np.log(2.0 * np.pi),
        )
        return dc.add(base, log_det_inv)

    def sample(self, cond, n: int, rng: np.random.Generator) -> tuple[Node, Node]:
        """n i.i.d. draws per condition row.

        cond has shape (B, D_c); the result pairs row b of the latent block
        [b*n, (b+1)*n) with condition row b. Returns (theta (B*n, D), z).
        """
        cond = dc.as_node(cond)
        b = cond.data.shape[0]
        z = Node(rng.standard_normal((b * n, self.cfg.dim)))
        cond_rep = dc.repeat_rows(cond, n) if n > 1 else cond
        theta, _ = self.forward(z, cond_rep)
        return theta, z

    def mode(self, cond) -> Node:
        """Pose at the all-zeros latent: the distribution's approximated mode."""
        cond = dc.as_node(cond)
        z = Node(np.zeros((cond.data.shape[0], self.cfg.dim)))
        theta, _ = self.forward(z, cond)
        return theta
