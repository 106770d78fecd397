"""Gradient-free token routing among per-projection adapters.

Per block, an (E, d) buffer of routing centers scores every token by
similarity; softmax over experts plus top-k masking yields the sparse
coefficients that gate each routed adapter. Centers are k-means-initialized
and tracked by EMA entirely outside the gradient tape: they never own a
gradient buffer and backward passes leave them bitwise untouched.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as tz
from .tensor import NORM_FLOOR, Tensor, _softmax_rows
from .model import ProjectionId
from .adapters import AdapterBank

SIMILARITIES = ("cosine", "dot", "euclidean", "l1")
GRANULARITIES = ("token", "sequence", "task")

DEFAULT_ROUTED = (ProjectionId.q, ProjectionId.k, ProjectionId.v)
DEFAULT_SHARED = (ProjectionId.o, ProjectionId.gate)


@dataclass
class RouterState:
    """Routing state of a single block.

    `permutation[e]` is the center index scored for routed slot e, so
    shuffling it re-assigns centers to projections without touching either.
    """

    centers: np.ndarray
    tau: float = 1.0
    top_k: int = 2
    beta: float = 0.5
    update_every: int = 2
    stop_step: int = 0
    similarity: str = "cosine"
    granularity: str = "token"
    routed: tuple[ProjectionId, ...] = DEFAULT_ROUTED
    shared: tuple[ProjectionId, ...] = DEFAULT_SHARED
    permutation: tuple[int, ...] = ()

    def __post_init__(self):
        self.centers = np.ascontiguousarray(self.centers, dtype=np.float64)
        self.routed = tuple(self.routed)
        self.shared = tuple(self.shared)
        n = len(self.routed)
        if not self.permutation:
            self.permutation = tuple(range(n))
        self.permutation = tuple(int(i) for i in self.permutation)
        if self.centers.ndim != 2 or self.centers.shape[0] != n:
            raise ValueError("centers must be (n_routed, d)")
        if set(self.routed) & set(self.shared):
            raise ValueError("routed and shared projection sets overlap")
        if not 1 <= self.top_k <= n:
            raise ValueError("top_k must satisfy 1 <= top_k <= n_routed")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must be in [0, 1]")
        if self.update_every < 1:
            raise ValueError("update_every must be >= 1")
        if self.stop_step < 0:
            raise ValueError("stop_step must be >= 0")
        if self.similarity not in SIMILARITIES:
            raise ValueError(f"unknown similarity {self.similarity!r}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if sorted(self.permutation) != list(range(n)):
            raise ValueError("permutation must be a bijection over routed slots")
        if np.any(np.sqrt((self.centers * self.centers).sum(axis=1)) == 0.0):
            raise ValueError("centers must have nonzero norm")

    @property
    def n_experts(self) -> int:
        return len(self.routed)

    def permuted_centers(self) -> np.ndarray:
        return self.centers[np.asarray(self.permutation)]

    def with_permutation(self, permutation) -> "RouterState":
        return replace(self, permutation=tuple(permutation))


@dataclass
class RoutingDecision:
    z: np.ndarray  # (T, E) similarity logits
    p: np.ndarray  # (T, E) softmax probabilities
    m: np.ndarray  # (T, E) sparse coefficients
    selected: np.ndarray  # (T, k) expert indices, ascending per row


def similarity_logits(state: RouterState, rows: np.ndarray) -> np.ndarray:
    """(T, E) logits; identical arithmetic to the tape-side similarity ops."""
    c = state.permuted_centers()
    scale = 1.0 / state.tau
    if state.similarity == "cosine":
        hn = _normalize_rows(rows)
        cn = _normalize_rows(c)
        return (hn @ cn.T) * scale
    if state.similarity == "dot":
        return (rows @ c.T) * scale
    diff = rows[:, None, :] - c[None, :, :]
    if state.similarity == "euclidean":
        return -np.sqrt((diff * diff).sum(axis=2)) * scale
    return -np.abs(diff).sum(axis=2) * scale


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return x / np.maximum(norms, NORM_FLOOR)


def topk_mask(p: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k columns per row; ties break toward the lowest expert index."""
    order = np.argsort(-p, axis=1, kind="stable")
    selected = np.sort(order[:, :k], axis=1)
    mask = np.zeros_like(p)
    np.put_along_axis(mask, selected, 1.0, axis=1)
    return mask, selected


def route(state: RouterState, H: np.ndarray, task_expert: int | None = None) -> RoutingDecision:
    """Routing coefficients for the T tokens (rows) of one sequence.

    Sequence granularity scores only the last row and broadcasts the decision
    over all rows; task granularity pins the caller-supplied expert with
    coefficient 1 (supervised oracle mode), keeping z and p informational.
    Pure and read-only: safe to call concurrently against one state.
    """
    H = np.ascontiguousarray(H, dtype=np.float64)
    if H.ndim != 2:
        raise ValueError("H must be (tokens, d)")
    if H.shape[1] != state.centers.shape[1]:
        raise ValueError("token width does not match center width")
    if not np.all(np.isfinite(H)):
        raise FloatingPointError("non-finite hidden states")
    t = H.shape[0]
    e = state.n_experts

    if state.granularity == "task":
        if task_expert is None:
            raise ValueError("task granularity requires a task expert index")
        if not 0 <= task_expert < e:
            raise ValueError("task expert index out of range")
        z = similarity_logits(state, H)
        p = _softmax_rows(z, 1)
        m = np.zeros((t, e))
        m[:, task_expert] = 1.0
        selected = np.full((t, 1), task_expert, dtype=np.int64)
        return RoutingDecision(z=z, p=p, m=m, selected=selected)

    rows = H[-1:, :] if state.granularity == "sequence" else H
    z = similarity_logits(state, rows)
    p = _softmax_rows(z, 1)
    mask, selected = topk_mask(p, state.top_k)
    m = p * mask
    if state.granularity == "sequence":
        z = np.repeat(z, t, axis=0)
        p = np.repeat(p, t, axis=0)
        m = np.repeat(m, t, axis=0)
        selected = np.repeat(selected, t, axis=0)
    return RoutingDecision(z=z, p=p, m=m, selected=selected)


# ---------------------------------------------------------------------------
# k-means initialization
# ---------------------------------------------------------------------------


@dataclass
class KMeansResult:
    centers: np.ndarray
    objective_trace: list[float]


def kmeans_init(samples: np.ndarray, n_centers: int, iters: int = 50, seed: int = 0) -> KMeansResult:
    """Spherical k-means (cosine assignment on L2-normalized samples).

    k-means++ seeding; each iteration's objective sum(1 - cos) is recorded
    before the center update, so the trace is non-increasing. Returns unit
    norm centers. Degenerate all-identical inputs fall back to jittered
    re-seeding so n_centers distinct (if nearly parallel) centers exist.
    """
    samples = np.ascontiguousarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ValueError("samples must be (n, d)")
    n = samples.shape[0]
    if n < n_centers:
        raise ValueError(f"need at least {n_centers} samples, got {n}")
    if not np.all(np.isfinite(samples)):
        raise FloatingPointError("non-finite samples")
    rng = np.random.default_rng(seed)
    x = _normalize_rows(samples)

    centers = _plus_plus_seeds(x, n_centers, rng)
    trace: list[float] = []
    prev_assign = None
    for _ in range(max(iters, 1)):
        sims = x @ centers.T
        assign = np.argmax(sims, axis=1)
        cost = float((1.0 - sims[np.arange(n), assign]).sum())
        trace.append(cost)
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign.copy()
        for e in range(n_centers):
            members = assign == e
            if not members.any():
                worst = int(np.argmin(sims[np.arange(n), assign]))
                centers[e] = x[worst]
                continue
            mean = x[members].mean(axis=0)
            norm = np.sqrt((mean * mean).sum())
            if norm > NORM_FLOOR:
                centers[e] = mean / norm
    return KMeansResult(centers=centers, objective_trace=trace)


def _plus_plus_seeds(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[int(rng.integers(n))]
    cost = 1.0 - x @ centers[0]
    for e in range(1, k):
        weights = np.maximum(cost, 0.0) ** 2
        total = weights.sum()
        if total <= 1e-24:
            # all remaining points coincide with chosen centers: jitter
            jitter = rng.normal(0.0, 1e-6, size=x.shape[1])
            centers[e] = _normalize_rows((centers[0] + jitter)[None, :])[0]
            continue
        idx = int(rng.choice(n, p=weights / total))
        centers[e] = x[idx]
        cost = np.minimum(cost, 1.0 - x @ centers[e])
    return centers


# ---------------------------------------------------------------------------
# EMA updates
# ---------------------------------------------------------------------------


def ema_update(state: RouterState, decision: RoutingDecision, H: np.ndarray, step: int) -> bool:
    """c_e <- beta * c_e + (1 - beta) * mean(tokens routed to e).

    Fires only when step % update_every == 0 and step < stop_step. Experts
    with no routed tokens keep a bitwise-identical center; beta = 1 is an
    exact no-op. Means use the raw (unnormalized) hidden states. Returns
    whether an update fired. Single writer per state: order after the step's
    route() reads.
    """
    if step % state.update_every != 0 or step >= state.stop_step:
        return False
    if state.beta == 1.0:
        return True
    H = np.asarray(H, dtype=np.float64)
    perm = np.asarray(state.permutation)
    for e in range(state.n_experts):
        members = decision.m[:, e] > 0.0
        if not members.any():
            continue
        mean = H[members].mean(axis=0)
        cidx = perm[e]
        state.centers[cidx] = state.beta * state.centers[cidx] + (1.0 - state.beta) * mean
    return True


# ---------------------------------------------------------------------------
# usage statistics
# ---------------------------------------------------------------------------


class UsageRecorder:
    """Accumulates routed-token fractions per (layer, expert)."""

    def __init__(self):
        self.counts: dict[int, np.ndarray] = {}
        self.tokens: dict[int, int] = {}

    def add(self, layer: int, decision: RoutingDecision) -> None:
        sel = (decision.m > 0.0).sum(axis=0).astype(np.float64)
        if layer not in self.counts:
            self.counts[layer] = np.zeros_like(sel)
            self.tokens[layer] = 0
        self.counts[layer] += sel
        self.tokens[layer] += decision.m.shape[0]

    @property
    def empty(self) -> bool:
        return not self.counts

    def fractions(self) -> dict[int, np.ndarray]:
        return {layer: self.counts[layer] / self.tokens[layer] for layer in sorted(self.counts)}


@dataclass
class RoutingHistory:
    init: UsageRecorder = field(default_factory=UsageRecorder)
    final: UsageRecorder = field(default_factory=UsageRecorder)


@dataclass
class UsageStats:
    layers: list[int]
    init_fractions: np.ndarray  # (L, E)
    final_fractions: np.ndarray  # (L, E)
    rho: np.ndarray  # (E,) init-vs-final correlation per expert across layers


def usage_report(history: RoutingHistory) -> UsageStats:
    if history.init.empty or history.final.empty:
        raise ValueError("usage_report needs at least one recorded decision per phase")
    layers = sorted(history.init.counts)
    init = np.stack([history.init.fractions()[l] for l in layers])
    final = np.stack([history.final.fractions()[l] for l in layers])
    n_exp = init.shape[1]
    rho = np.empty(n_exp)
    for e in range(n_exp):
        rho[e] = _pearson(init[:, e], final[:, e])
    return UsageStats(layers=layers, init_fractions=init, final_fractions=final, rho=rho)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    if np.array_equal(a, b):
        return 1.0
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0.0:
        return 0.0
    return float((da * db).sum() / denom)


def write_usage_csv(stats: UsageStats, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "expert", "phase", "fraction", "rho"])
        for phase, fracs in (("init", stats.init_fractions), ("final", stats.final_fractions)):
            for li, layer in enumerate(stats.layers):
                for e in range(fracs.shape[1]):
                    writer.writerow([layer, e, phase, repr(float(fracs[li, e])), repr(float(stats.rho[e]))])


def export_embeddings(path, per_layer: dict[int, tuple[np.ndarray, RoutingDecision]], limit: int = 2000) -> None:
    """Token embeddings with their top-1 expert, for external visualization."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for layer in sorted(per_layer):
            H, decision = per_layer[layer]
            top1 = decision.selected[:, 0] if decision.selected.size else np.argmax(decision.p, axis=1)
            for t in range(min(H.shape[0], limit)):
                writer.writerow([layer, t, int(top1[t])] + [repr(float(v)) for v in H[t]])


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def save_router(directory, states: dict[int, RouterState]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for layer, state in states.items():
        tz.save_tensor(directory / f"centers_layer{layer}.bin", state.centers)
        manifest[str(layer)] = {
            "tau": state.tau,
            "top_k": state.top_k,
            "beta": state.beta,
            "update_every": state.update_every,
            "stop_step": state.stop_step,
            "similarity": state.similarity,
            "granularity": state.granularity,
            "routed": [p.name for p in state.routed],
            "shared": [p.name for p in state.shared],
            "permutation": list(state.permutation),
        }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_router(directory) -> dict[int, RouterState]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    states = {}
    for key, meta in manifest.items():
        layer = int(key)
        states[layer] = RouterState(
            centers=tz.load_tensor(directory / f"centers_layer{layer}.bin"),
            tau=meta["tau"],
            top_k=meta["top_k"],
            beta=meta["beta"],
            update_every=meta["update_every"],
            stop_step=meta["stop_step"],
            similarity=meta["similarity"],
            granularity=meta["granularity"],
            routed=tuple(ProjectionId[n] for n in meta["routed"]),
            shared=tuple(ProjectionId[n] for n in meta["shared"]),
            permutation=tuple(meta["permutation"]),
        )
    return states


# ---------------------------------------------------------------------------
# forward hooks
# ---------------------------------------------------------------------------


class MonkeyJumpHooks:
    """Wires routing coefficients into the adapter contributions.

    Coefficients are differentiable with respect to the hidden states (the
    similarity and softmax run on the tape), while the centers enter as
    constants, so backward passes can never touch them. Blocks without a
    RouterState fall back to uniform application (standard PEFT).
    """

    def __init__(self, bank: AdapterBank, states: dict[int, RouterState], record: bool = True):
        self.bank = bank
        self.states = states
        self.record = record
        self.collected: list[tuple[int, RoutingDecision, np.ndarray]] = []
        self._coeff: dict[int, Tensor] = {}
        self._task_experts: np.ndarray | None = None

    def set_batch(self, task_experts: np.ndarray | None = None) -> None:
        """Per-sequence expert indices, required for task granularity."""
        self._task_experts = task_experts
        self.collected = []
        self._coeff = {}

    def _tape_logits(self, state: RouterState, rows: Tensor) -> Tensor:
        c = state.permuted_centers()
        scale = 1.0 / state.tau
        if state.similarity == "cosine":
            hn = tz.l2_normalize_rows(rows)
            z = tz.matmul(hn, Tensor(_normalize_rows(c).T))
        elif state.similarity == "dot":
            z = tz.matmul(rows, Tensor(c.T))
        elif state.similarity == "euclidean":
            z = tz.neg_l2_distance(rows, c)
        else:
            z = tz.neg_l1_distance(rows, c)
        return tz.mul(z, scale)

    def begin_block(self, layer: int, h: Tensor) -> None:
        state = self.states.get(layer)
        if state is None:
            return
        b, t, d = h.shape
        n_exp = state.n_experts
        flat = h.data.reshape(b * t, d)

        if state.granularity == "task":
            if self._task_experts is None:
                raise ValueError("task granularity requires set_batch(task_experts)")
            m = np.zeros((b, t, n_exp))
            z_rows, p_rows = [], []
            for i in range(b):
                dec = route(state, h.data[i], task_expert=int(self._task_experts[i]))
                m[i] = dec.m
                z_rows.append(dec.z)
                p_rows.append(dec.p)
            decision = RoutingDecision(
                z=np.concatenate(z_rows),
                p=np.concatenate(p_rows),
                m=m.reshape(b * t, n_exp),
                selected=np.argmax(m.reshape(b * t, n_exp), axis=1)[:, None],
            )
            self._coeff[layer] = Tensor(m)
        elif state.granularity == "sequence":
            last = tz.select_index(h, 1, t - 1)  # (B, 1, d)
            rows = tz.reshape(last, (b, d))
            z = self._tape_logits(state, rows)
            p = tz.softmax(z, axis=-1)
            mask, selected = topk_mask(p.data, state.top_k)
            m_seq = tz.mul(p, Tensor(mask))  # (B, E)
            m_tape = tz.broadcast_to(tz.reshape(m_seq, (b, 1, n_exp)), (b, t, n_exp))
            decision = RoutingDecision(
                z=np.repeat(z.data, t, axis=0),
                p=np.repeat(p.data, t, axis=0),
                m=np.repeat(m_seq.data, t, axis=0).reshape(b * t, n_exp),
                selected=np.repeat(selected, t, axis=0),
            )
            self._coeff[layer] = m_tape
        else:
            rows = tz.reshape(h, (b * t, d))
            z = self._tape_logits(state, rows)
            p = tz.softmax(z, axis=-1)
            mask, selected = topk_mask(p.data, state.top_k)
            m_flat = tz.mul(p, Tensor(mask))
            decision = RoutingDecision(z=z.data, p=p.data, m=m_flat.data, selected=selected)
            self._coeff[layer] = tz.reshape(m_flat, (b, t, n_exp))

        if self.record:
            self.collected.append((layer, decision, flat.copy()))

    def contribution(self, layer: int, proj: ProjectionId, x: Tensor, base: Tensor):
        adapter = self.bank.get(layer, proj)
        if adapter is None:
            return None
        state = self.states.get(layer)
        if state is None or proj in state.shared or proj not in state.routed:
            # shared experts are always active; unrouted blocks/projections
            # degrade to standard uniform PEFT
            return adapter.apply(x, 1.0, base=base, drop_rng=self.bank.drop_rng)
        slot = state.routed.index(proj)
        mcol = tz.select_index(self._coeff[layer], 2, slot)  # (B, T, 1)
        return adapter.apply(x, mcol, base=base, drop_rng=self.bank.drop_rng)
