"""Minimal learned-router MoE-LoRA baseline.

Per targeted projection each block holds N expert LoRA pairs; one trainable
router matrix per block gates them from the block input. Unlike the
clustering router, the gate lives on the gradient tape, so router weights
receive gradients. Trainable count per block: 2*E*N*d*r adapters + N*d router.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import tensor as tz
from .tensor import Tensor
from .model import ModelConfig, ProjectionId


@dataclass
class MoEConfig:
    n_experts: int = 4
    top_k: int = 2
    r: int = 2
    alpha: float = 5.0
    dropout: float = 0.05

    def __post_init__(self):
        if self.n_experts < 1:
            raise ValueError("n_experts must be >= 1")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError("top_k must satisfy 1 <= top_k <= n_experts")
        if self.r < 1:
            raise ValueError("rank must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


class MoEAdapterBank:
    """N expert LoRA pairs per targeted projection plus one router per block."""

    def __init__(
        self,
        model_cfg: ModelConfig,
        cfg: MoEConfig,
        projections: tuple[ProjectionId, ...],
        layers: list[int] | None = None,
        seed: int = 0,
    ):
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.projections = tuple(projections)
        self.layers = list(range(model_cfg.n_layers)) if layers is None else sorted(layers)
        rng = np.random.default_rng(seed)
        self.experts: dict[tuple[int, ProjectionId], list[tuple[Tensor, Tensor]]] = {}
        self.routers: dict[int, Tensor] = {}
        for layer in self.layers:
            self.routers[layer] = Tensor(
                rng.normal(0.0, 1.0 / np.sqrt(model_cfg.d_model), size=(cfg.n_experts, model_cfg.d_model)),
                requires_grad=True,
            )
            for proj in self.projections:
                d_out, d_in = model_cfg.proj_dims(proj)
                pairs = []
                for _ in range(cfg.n_experts):
                    a = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(cfg.r, d_in)), requires_grad=True)
                    b = Tensor(np.zeros((d_out, cfg.r)), requires_grad=True)
                    pairs.append((a, b))
                self.experts[(layer, proj)] = pairs
        self.training = True
        self._drop_rng: np.random.Generator | None = None

    def begin_step(self, seed: int) -> None:
        self._drop_rng = np.random.default_rng(seed)

    def train(self) -> None:
        self.training = True

    def eval(self) -> None:
        self.training = False
        self._drop_rng = None

    @property
    def drop_rng(self):
        return self._drop_rng if self.training else None

    def trainable_tensors(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.append(self.routers[layer])
            for proj in self.projections:
                for a, b in self.experts[(layer, proj)]:
                    out.extend([a, b])
        return out

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for layer in self.layers:
            out[f"layer{layer}.router"] = self.routers[layer]
            for proj in self.projections:
                for n, (a, b) in enumerate(self.experts[(layer, proj)]):
                    out[f"layer{layer}.{proj.name}.e{n}.a"] = a
                    out[f"layer{layer}.{proj.name}.e{n}.b"] = b
        return out

    def router_param_count(self) -> int:
        return sum(self.routers[layer].data.size for layer in self.layers)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        named = self.named_tensors()
        for name, t in named.items():
            tz.save_tensor(directory / f"{name}.bin", t.data)
        manifest = {
            "moe": asdict(self.cfg),
            "projections": [p.name for p in self.projections],
            "layers": self.layers,
            "tensors": sorted(named),
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    def load_weights(self, directory) -> None:
        directory = Path(directory)
        for name, t in self.named_tensors().items():
            t.data = tz.load_tensor(directory / f"{name}.bin")


def moe_gates(bank: MoEAdapterBank, layer: int, h: Tensor) -> Tensor:
    """softmax(R h) with top-k masking, kept weights renormalized to sum 1.

    `h` may be (T, d) or (B, T, d); gates stay on the tape so the router
    trains by gradient descent.
    """
    r = bank.routers[layer]
    g = tz.softmax(tz.matmul(h, tz.transpose(r)), axis=-1)
    flat = g.data.reshape(-1, bank.cfg.n_experts)
    order = np.argsort(-flat, axis=1, kind="stable")
    mask = np.zeros_like(flat)
    np.put_along_axis(mask, order[:, : bank.cfg.top_k], 1.0, axis=1)
    kept = tz.mul(g, Tensor(mask.reshape(g.shape)))
    denom = tz.tsum(kept, axis=-1, keepdims=True)
    return tz.div(kept, denom)


def moe_mix(bank: MoEAdapterBank, layer: int, proj: ProjectionId, x: Tensor, gates: Tensor) -> Tensor:
    """Gate-weighted sum of expert LoRA outputs on input x."""
    cfg = bank.cfg
    scale = cfg.alpha / cfg.r
    drop_rng = bank.drop_rng
    out = None
    for n, (a, b) in enumerate(bank.experts[(layer, proj)]):
        xin = x
        if drop_rng is not None and cfg.dropout > 0.0:
            xin = tz.dropout(xin, cfg.dropout, drop_rng)
        delta = tz.mul(tz.matmul(tz.matmul(xin, tz.transpose(a)), tz.transpose(b)), scale)
        gn = tz.select_index(gates, gates.ndim - 1, n)
        term = tz.mul(delta, gn)
        out = term if out is None else tz.add(out, term)
    return out


def moe_forward(bank: MoEAdapterBank, layer: int, proj: ProjectionId, h: Tensor) -> Tensor:
    """Single-site MoE contribution with gates computed from the same input."""
    return moe_mix(bank, layer, proj, h, moe_gates(bank, layer, h))


class MoEHooks:
    """Forward hooks: per-block gates from the block input, experts on x."""

    def __init__(self, bank: MoEAdapterBank):
        self.bank = bank
        self._gates: dict[int, Tensor] = {}

    def set_batch(self, task_experts=None) -> None:
        self._gates = {}

    def begin_block(self, layer: int, h: Tensor) -> None:
        if layer in self.bank.routers:
            self._gates[layer] = moe_gates(self.bank, layer, h)

    def contribution(self, layer: int, proj: ProjectionId, x: Tensor, base: Tensor):
        if (layer, proj) not in self.bank.experts:
            return None
        return moe_mix(self.bank, layer, proj, x, self._gates[layer])
