"""Synthetic multi-task sequence datasets with controllable cluster structure.

Each task owns a disjoint slice of marker symbols; filler symbols are shared.
Labels are forced during generation, so a rule-following classifier on raw
symbols recovers them exactly, and the task id itself is always recoverable
from which marker slice appears.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RULES = ("majority", "last_marker", "count_threshold")


@dataclass
class TaskSpec:
    task_id: int
    rule: str
    markers: tuple[int, ...]
    n_classes: int
    min_len: int = 16
    max_len: int = 48
    threshold: int = 6  # count_threshold only
    filler_lo: int = 1
    filler_hi: int = 31  # inclusive; markers must live above this

    def __post_init__(self):
        self.markers = tuple(int(m) for m in self.markers)
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}")
        if self.rule == "count_threshold":
            if self.n_classes != 2:
                raise ValueError("count_threshold is a binary rule")
            if len(self.markers) < 1:
                raise ValueError("count_threshold needs one marker")
            if not 1 <= self.threshold < self.min_len:
                raise ValueError("threshold must fit in the shortest sequence")
        else:
            if len(self.markers) != self.n_classes:
                raise ValueError("need one marker per class")
        if self.rule == "majority" and self.min_len < self.n_classes + 2:
            raise ValueError("majority sequences too short for a clear winner")
        if self.min_len < 4 or self.max_len < self.min_len:
            raise ValueError("bad sequence length range")
        if not 0 <= self.filler_lo <= self.filler_hi:
            raise ValueError("bad filler range")
        if min(self.markers) <= self.filler_hi:
            raise ValueError("markers must not overlap the filler range")


def default_task_specs() -> list[TaskSpec]:
    """Three tasks with distinct rules and disjoint marker slices."""
    return [
        TaskSpec(task_id=0, rule="majority", markers=(32, 33, 34), n_classes=3, min_len=12, max_len=24),
        TaskSpec(task_id=1, rule="last_marker", markers=(40, 41, 42), n_classes=3, min_len=12, max_len=24),
        TaskSpec(task_id=2, rule="count_threshold", markers=(48,), n_classes=2, min_len=12, max_len=24,
                 threshold=4),
    ]


@dataclass
class Example:
    tokens: np.ndarray
    label: int
    task: int


@dataclass
class Dataset:
    examples: list[Example]
    specs: list[TaskSpec] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.examples)

    def total_tokens(self) -> int:
        return sum(len(ex.tokens) for ex in self.examples)

    def label_offsets(self) -> dict[int, int]:
        """Task id -> offset into the global (concatenated) label space."""
        offsets, acc = {}, 0
        for spec in self.specs:
            offsets[spec.task_id] = acc
            acc += spec.n_classes
        return offsets

    @property
    def n_global_classes(self) -> int:
        return sum(spec.n_classes for spec in self.specs)

    def global_label(self, ex: Example) -> int:
        return self.label_offsets()[ex.task] + ex.label

    def subset(self, task_id: int) -> "Dataset":
        return Dataset(
            examples=[ex for ex in self.examples if ex.task == task_id],
            specs=[s for s in self.specs if s.task_id == task_id],
        )

    def save_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for ex in self.examples:
                record = {"tokens": [int(t) for t in ex.tokens], "label": ex.label, "task": ex.task}
                fh.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")

    @classmethod
    def load_jsonl(cls, path, specs: list[TaskSpec]) -> "Dataset":
        examples = []
        for line in Path(path).read_text().splitlines():
            rec = json.loads(line)
            examples.append(
                Example(tokens=np.asarray(rec["tokens"], dtype=np.int64), label=rec["label"], task=rec["task"])
            )
        return cls(examples=examples, specs=specs)


def evaluate_rule(spec: TaskSpec, tokens: np.ndarray) -> int:
    """Label of a token sequence under the task's rule.

    majority: class of the most frequent marker (lowest class wins ties);
    last_marker: class of the final marker occurrence; count_threshold:
    whether markers[0] occurs at least `threshold` times.
    """
    tokens = np.asarray(tokens)
    if spec.rule == "majority":
        counts = [(tokens == m).sum() for m in spec.markers]
        return int(np.argmax(counts))
    if spec.rule == "last_marker":
        marker_pos = [(tokens == m).nonzero()[0] for m in spec.markers]
        last = [(pos[-1] if len(pos) else -1) for pos in marker_pos]
        if max(last) < 0:
            raise ValueError("sequence contains no marker")
        return int(np.argmax(last))
    return int((tokens == spec.markers[0]).sum() >= spec.threshold)


def _gen_sequence(spec: TaskSpec, label: int, rng: np.random.Generator, vocab: int) -> np.ndarray:
    length = int(rng.integers(spec.min_len, spec.max_len + 1))
    seq = rng.integers(spec.filler_lo, spec.filler_hi + 1, size=length).astype(np.int64)

    if spec.rule == "majority":
        # winner beats every other marker by at least a factor of two so the
        # count gap is readable from mixed representations
        winner = spec.markers[label]
        cap = max(3, length // spec.n_classes)
        win_count = int(rng.integers(3, cap + 1))
        counts = [
            win_count if c == label else int(rng.integers(0, win_count // 2 + 1))
            for c in range(spec.n_classes)
        ]
        symbols = np.concatenate([np.full(counts[c], spec.markers[c], dtype=np.int64) for c in range(spec.n_classes)])
        symbols = rng.permutation(symbols)
        pos = rng.choice(length, size=len(symbols), replace=False)
        seq[pos] = symbols
        assert (seq == winner).sum() > max(
            ((seq == m).sum() for m in spec.markers if m != winner), default=0
        )
    elif spec.rule == "last_marker":
        # the label marker arrives as a short run ending in the final few
        # positions, keeping the deciding occurrence within reach of the
        # last-token readout; earlier sparse markers act as distractors
        run = int(rng.integers(2, 5))
        end = int(rng.integers(length - 3, length))
        start = max(0, end - run + 1)
        n_early = int(rng.integers(1, 4))
        if start > n_early:
            earlier = rng.choice(start, size=n_early, replace=False)
            seq[earlier] = rng.choice(spec.markers, size=n_early)
        seq[start : end + 1] = spec.markers[label]
    else:  # count_threshold
        marker = spec.markers[0]
        if label == 1:
            count = int(rng.integers(spec.threshold, min(spec.threshold + 4, length) + 1))
        else:
            count = int(rng.integers(0, spec.threshold))
        if count:
            pos = rng.choice(length, size=count, replace=False)
            seq[pos] = marker

    if seq.max() >= vocab:
        raise ValueError("marker symbol exceeds vocabulary size")
    return seq


def generate(specs: list[TaskSpec], n_per_task: int, seed: int, vocab: int = 64) -> Dataset:
    """Deterministic dataset; labels stratified (balanced within one sample)."""
    if n_per_task < 1:
        raise ValueError("n_per_task must be >= 1")
    used: set[int] = set()
    for spec in specs:
        overlap = used & set(spec.markers)
        if overlap:
            raise ValueError(f"marker slices overlap across tasks: {sorted(overlap)}")
        used.update(spec.markers)
    rng = np.random.default_rng(seed)
    examples = []
    for spec in specs:
        for i in range(n_per_task):
            label = i % spec.n_classes
            examples.append(Example(tokens=_gen_sequence(spec, label, rng, vocab), label=label, task=spec.task_id))
    return Dataset(examples=examples, specs=list(specs))


def length_buckets(dataset: Dataset, batch_size: int) -> list[np.ndarray]:
    """Example-index batches grouped by sequence length (no padding needed)."""
    by_len: dict[int, list[int]] = {}
    for i, ex in enumerate(dataset.examples):
        by_len.setdefault(len(ex.tokens), []).append(i)
    batches = []
    for length in sorted(by_len):
        group = by_len[length]
        for j in range(0, len(group), batch_size):
            batches.append(np.asarray(group[j : j + batch_size], dtype=np.int64))
    return batches


def batch_arrays(dataset: Dataset, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(tokens BxT, global labels B, task ids B) for one same-length batch."""
    tokens = np.stack([dataset.examples[i].tokens for i in idx])
    labels = np.asarray([dataset.global_label(dataset.examples[i]) for i in idx], dtype=np.int64)
    tasks = np.asarray([dataset.examples[i].task for i in idx], dtype=np.int64)
    return tokens, labels, tasks


def sample_init_tokens(dataset: Dataset, budget: int, seed: int, model) -> dict:
    """Uniform without-replacement (sequence, position) sample pushed through
    the frozen backbone; returns per-layer hidden vectors for center init.

    Output: {"features": {layer: (budget, d)}, "meta": (budget, 3) array of
    (sequence index, position, task id)} with layer l holding the block-l
    input representation.
    """
    total = dataset.total_tokens()
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if budget > total:
        raise ValueError(f"budget {budget} exceeds corpus tokens {total}")
    rng = np.random.default_rng(seed)
    pairs = []
    for si, ex in enumerate(dataset.examples):
        for pos in range(len(ex.tokens)):
            pairs.append((si, pos))
    chosen = rng.choice(len(pairs), size=budget, replace=False)
    chosen_pairs = [pairs[int(c)] for c in chosen]

    needed: dict[int, list[int]] = {}
    for si, pos in chosen_pairs:
        needed.setdefault(si, []).append(pos)

    n_layers = model.cfg.n_layers
    feats = {layer: np.empty((budget, model.cfg.d_model)) for layer in range(n_layers)}
    meta = np.empty((budget, 3), dtype=np.int64)

    by_len: dict[int, list[int]] = {}
    for si in needed:
        by_len.setdefault(len(dataset.examples[si].tokens), []).append(si)
    row_of = {pair: i for i, pair in enumerate(chosen_pairs)}
    for length in sorted(by_len):
        seqs = sorted(by_len[length])
        for j in range(0, len(seqs), 32):
            chunk = seqs[j : j + 32]
            tokens = np.stack([dataset.examples[si].tokens for si in chunk])
            hidden = model.forward(tokens).hidden
            for bi, si in enumerate(chunk):
                for pos in needed[si]:
                    row = row_of[(si, pos)]
                    for layer in range(n_layers):
                        feats[layer][row] = hidden[layer].data[bi, pos]
                    meta[row] = (si, pos, dataset.examples[si].task)
    return {"features": feats, "meta": meta}


def pretraining_corpus(dataset: Dataset) -> list[np.ndarray]:
    """Raw token sequences for the self-supervised backbone phase."""
    return [ex.tokens for ex in dataset.examples]
