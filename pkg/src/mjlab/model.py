"""Small causal Transformer backbone with named per-block projections.

Blocks are pre-LN with multi-head causal attention and a gated FFN, so each
block exposes exactly the seven projection sites {q, k, v, o, up, gate, down}
to which adapters and routing attach via hooks. After `freeze()` the backbone
participates in forward passes only; no gradient buffers remain.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import NamedTuple, Protocol

import numpy as np

from . import tensor as tz
from .tensor import Tensor


class ProjectionId(enum.IntEnum):
    """The seven adapter sites of a block, in stable ordinal order."""

    q = 0
    k = 1
    v = 2
    o = 3
    up = 4
    gate = 5
    down = 6


PROJECTIONS: tuple[ProjectionId, ...] = tuple(ProjectionId)
ATTN_PROJECTIONS = (ProjectionId.q, ProjectionId.k, ProjectionId.v, ProjectionId.o)


@dataclass
class ModelConfig:
    d_model: int = 32
    d_ff: int = 64
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = 64
    max_seq_len: int = 64

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, int) or value <= 0:
                raise ValueError(f"ModelConfig.{name} must be a positive integer")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")

    def proj_dims(self, proj: ProjectionId) -> tuple[int, int]:
        """(d_out, d_in) of a projection's weight matrix."""
        if proj in (ProjectionId.up, ProjectionId.gate):
            return self.d_ff, self.d_model
        if proj is ProjectionId.down:
            return self.d_model, self.d_ff
        return self.d_model, self.d_model


class ForwardHooks(Protocol):
    """Adapter/routing callbacks consulted during the block forward pass."""

    def begin_block(self, layer: int, h: Tensor) -> None:
        """Called once per block with the residual-stream input (B, T, d)."""

    def contribution(
        self, layer: int, proj: ProjectionId, x: Tensor, base: Tensor
    ) -> Tensor | None:
        """Additive correction to `base = W x`, or None for no effect."""


class ForwardResult(NamedTuple):
    hidden: list[Tensor]  # length n_layers + 1; hidden[l] is the input of block l
    logits: Tensor  # (B, T, vocab)


class BlockWeights:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.w: dict[ProjectionId, Tensor] = {}
        for proj in PROJECTIONS:
            d_out, d_in = cfg.proj_dims(proj)
            self.w[proj] = Tensor(
                rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_out, d_in)),
                requires_grad=True,
            )
        d = cfg.d_model
        self.ln1_g = Tensor(np.ones(d), requires_grad=True)
        self.ln1_b = Tensor(np.zeros(d), requires_grad=True)
        self.ln2_g = Tensor(np.ones(d), requires_grad=True)
        self.ln2_b = Tensor(np.zeros(d), requires_grad=True)

    def tensors(self) -> dict[str, Tensor]:
        out = {proj.name: self.w[proj] for proj in PROJECTIONS}
        out.update(ln1_g=self.ln1_g, ln1_b=self.ln1_b, ln2_g=self.ln2_g, ln2_b=self.ln2_b)
        return out


class Backbone:
    """Decoder-only transformer with learned absolute position embeddings."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.frozen = False
        rng = np.random.default_rng(seed)
        self.tok_emb = Tensor(
            rng.normal(0.0, 0.1, size=(cfg.vocab_size, cfg.d_model)), requires_grad=True
        )
        self.pos_emb = Tensor(
            rng.normal(0.0, 0.1, size=(cfg.max_seq_len, cfg.d_model)), requires_grad=True
        )
        self.blocks = [BlockWeights(cfg, rng) for _ in range(cfg.n_layers)]
        self.ln_f_g = Tensor(np.ones(cfg.d_model), requires_grad=True)
        self.ln_f_b = Tensor(np.zeros(cfg.d_model), requires_grad=True)
        self.lm_head = Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(cfg.d_model), size=(cfg.vocab_size, cfg.d_model)),
            requires_grad=True,
        )

    # -- parameter bookkeeping ------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out = {
            "tok_emb": self.tok_emb,
            "pos_emb": self.pos_emb,
            "ln_f_g": self.ln_f_g,
            "ln_f_b": self.ln_f_b,
            "lm_head": self.lm_head,
        }
        for i, blk in enumerate(self.blocks):
            for name, t in blk.tensors().items():
                out[f"block{i}.{name}"] = t
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def freeze(self) -> None:
        for t in self.parameters():
            t.requires_grad = False
            t.grad = None
        self.frozen = True

    def snapshot(self) -> dict[str, np.ndarray]:
        """Bitwise copies of every parameter, for freeze-contract checks."""
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    # -- forward ----------------------------------------------------------------

    def _project(self, layer: int, proj: ProjectionId, x: Tensor, hooks) -> Tensor:
        base = tz.matmul(x, tz.transpose(self.blocks[layer].w[proj]))
        if hooks is not None:
            extra = hooks.contribution(layer, proj, x, base)
            if extra is not None:
                base = tz.add(base, extra)
        return base

    def _attention(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        b, t, d = q.shape
        nh = self.cfg.n_heads
        hd = d // nh
        qh = tz.swapaxes(tz.reshape(q, (b, t, nh, hd)), 1, 2)
        kh = tz.swapaxes(tz.reshape(k, (b, t, nh, hd)), 1, 2)
        vh = tz.swapaxes(tz.reshape(v, (b, t, nh, hd)), 1, 2)
        scores = tz.mul(tz.matmul(qh, tz.swapaxes(kh, -1, -2)), 1.0 / np.sqrt(hd))
        mask = np.where(np.arange(t)[:, None] < np.arange(t)[None, :], -1e9, 0.0)
        scores = tz.add(scores, Tensor(mask[None, None, :, :]))
        att = tz.softmax(scores, axis=-1)
        ctx = tz.matmul(att, vh)
        return tz.reshape(tz.swapaxes(ctx, 1, 2), (b, t, d))

    def forward(self, tokens: np.ndarray, hooks: ForwardHooks | None = None) -> ForwardResult:
        """Causal forward pass; returns all residual-stream states and logits.

        hidden[l] is the representation entering block l (hidden[0] is the
        embedding output, hidden[n_layers] the final block output), which is
        what routing and probes consume.
        """
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ValueError("tokens must be (batch, time)")
        b, t = tokens.shape
        if t > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {t} exceeds max_seq_len {self.cfg.max_seq_len}")
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size:
            raise ValueError("token id out of vocabulary range")

        x = tz.add(tz.embedding(self.tok_emb, tokens), tz.embedding(self.pos_emb, np.arange(t)))
        hidden = [x]
        for layer in range(self.cfg.n_layers):
            blk = self.blocks[layer]
            if hooks is not None:
                hooks.begin_block(layer, x)
            a = tz.layer_norm(x, blk.ln1_g, blk.ln1_b)
            q = self._project(layer, ProjectionId.q, a, hooks)
            k = self._project(layer, ProjectionId.k, a, hooks)
            v = self._project(layer, ProjectionId.v, a, hooks)
            attn = self._attention(q, k, v)
            x = tz.add(x, self._project(layer, ProjectionId.o, attn, hooks))
            f_in = tz.layer_norm(x, blk.ln2_g, blk.ln2_b)
            up = self._project(layer, ProjectionId.up, f_in, hooks)
            gate = self._project(layer, ProjectionId.gate, f_in, hooks)
            x = tz.add(x, self._project(layer, ProjectionId.down, tz.mul(tz.silu(gate), up), hooks))
            hidden.append(x)
        final = tz.layer_norm(x, self.ln_f_g, self.ln_f_b)
        logits = tz.matmul(final, tz.transpose(self.lm_head))
        return ForwardResult(hidden=hidden, logits=logits)

    def final_states(self, tokens: np.ndarray, hooks: ForwardHooks | None = None) -> Tensor:
        """LayerNormed last-block output (B, T, d), the classifier-head input."""
        result = self.forward(tokens, hooks)
        return tz.layer_norm(result.hidden[-1], self.ln_f_g, self.ln_f_b)

    # -- checkpointing ------------------------------------------------------------

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        named = self.named_parameters()
        for name, t in named.items():
            tz.save_tensor(directory / f"{name}.bin", t.data)
        manifest = {
            "config": asdict(self.cfg),
            "projections": [p.name for p in PROJECTIONS],
            "frozen": self.frozen,
            "tensors": sorted(named),
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "Backbone":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        model = cls(ModelConfig(**manifest["config"]))
        for name, t in model.named_parameters().items():
            t.data = tz.load_tensor(directory / f"{name}.bin")
        if manifest["frozen"]:
            model.freeze()
        return model


def next_token_loss(model: Backbone, tokens: np.ndarray) -> Tensor:
    """Mean cross entropy of predicting token t+1 from the prefix."""
    b, t = tokens.shape
    logits = model.forward(tokens).logits
    flat = tz.reshape(logits, (b * t, model.cfg.vocab_size))
    targets = np.zeros((b, t), dtype=np.int64)
    targets[:, :-1] = tokens[:, 1:]
    weights = np.ones((b, t), dtype=np.float64)
    weights[:, -1] = 0.0
    return tz.cross_entropy(flat, targets.reshape(-1), weights.reshape(-1))


def pretrain_backbone(
    model: Backbone,
    corpus: list[np.ndarray],
    steps: int,
    lr: float,
    batch_size: int = 16,
    holdout_fraction: float = 0.1,
    seed: int = 0,
) -> dict:
    """Brief self-supervised next-token phase, then freeze.

    The corpus is split into train/holdout; returns the holdout cross entropy
    before and after training. Aborts with a diagnostic on a non-finite loss.
    """
    from .optim import AdamW

    if not corpus:
        raise ValueError("pretraining corpus is empty")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(corpus))
    n_hold = max(1, int(round(len(corpus) * holdout_fraction))) if len(corpus) > 1 else 0
    hold_idx = order[:n_hold]
    train_idx = order[n_hold:] if n_hold else order

    def batches(idx_pool):
        by_len: dict[int, list[int]] = {}
        for i in idx_pool:
            by_len.setdefault(len(corpus[i]), []).append(int(i))
        chunks = []
        for length in sorted(by_len):
            group = by_len[length]
            for j in range(0, len(group), batch_size):
                chunks.append(np.stack([corpus[i] for i in group[j : j + batch_size]]))
        return chunks

    def holdout_ce() -> float:
        if not len(hold_idx):
            return float("nan")
        total, count = 0.0, 0
        for batch in batches(hold_idx):
            b, t = batch.shape
            n_pred = b * (t - 1)
            try:
                total += float(next_token_loss(model, batch).data) * n_pred
            except FloatingPointError as err:
                raise RuntimeError(f"pretraining diverged at holdout evaluation: {err}") from err
            count += n_pred
        return total / count

    ce_before = holdout_ce()
    opt = AdamW(model.parameters(), lr=lr, weight_decay=0.0)
    train_batches = batches(train_idx)
    step = 0
    while step < steps:
        epoch_order = rng.permutation(len(train_batches))
        for bi in epoch_order:
            if step >= steps:
                break
            with tz.Tape():
                try:
                    loss = next_token_loss(model, train_batches[bi])
                except FloatingPointError as err:
                    raise RuntimeError(f"pretraining diverged at step {step}: {err}") from err
                tz.backward(loss)
            opt.step()
            opt.zero_grad()
            step += 1
    ce_after = holdout_ce()
    model.freeze()
    return {"holdout_ce_before": ce_before, "holdout_ce_after": ce_after, "steps": step}
