"""Fine-tuning pipeline wiring backbone + adapters + routing.

Three stages: (i) k-means initialization of routing centers from sampled
frozen representations, (ii) adapter/head training with per-step routing and
scheduled EMA center updates, (iii) evaluation with frozen centers. Also
hosts the shared-vs-task-specific comparison and the ablation sweep driver.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import tensor as tz
from .tensor import Tensor
from .model import Backbone, pretrain_backbone
from .adapters import AdapterBank, UniformAdapterHooks, count_trainable
from .moe_baseline import MoEAdapterBank, MoEHooks
from .router import (
    MonkeyJumpHooks,
    RouterState,
    RoutingDecision,
    RoutingHistory,
    UsageRecorder,
    ema_update,
    export_embeddings,
    kmeans_init,
    save_router,
    usage_report,
    write_usage_csv,
)
from .optim import AdamW, lr_at_step
from .config import ExperimentConfig, config_hash
from .data import Dataset, generate, length_buckets, batch_arrays, pretraining_corpus, sample_init_tokens

ABLATION_AXES = (
    "similarity",
    "tau",
    "beta",
    "topk",
    "update_every",
    "stop_frac",
    "shared",
    "routed",
    "rank",
    "permutation",
    "routed_layers",
    "kmeans_samples",
)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("MJLAB_THREADS", "1")))
    except ValueError:
        return 1


def make_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    specs = cfg.data.task_specs()
    train_ds = generate(specs, cfg.data.n_per_task, cfg.data.seed, vocab=cfg.model.vocab_size)
    val_ds = generate(specs, cfg.data.n_val_per_task, cfg.data.seed + 1, vocab=cfg.model.vocab_size)
    return train_ds, val_ds


def prepare_backbone(cfg: ExperimentConfig, seed: int, corpus: list[np.ndarray] | None = None) -> Backbone:
    """Init + brief next-token pretraining + freeze, fully seeded."""
    model = Backbone(cfg.model, seed=_derive(seed, 1))
    if corpus is None:
        corpus = pretraining_corpus(make_datasets(cfg)[0])
    usable = [c for c in corpus if len(c) <= cfg.model.max_seq_len]
    pretrain_backbone(
        model,
        usable,
        steps=cfg.pretrain.steps,
        lr=cfg.pretrain.lr,
        batch_size=cfg.pretrain.batch_size,
        holdout_fraction=cfg.pretrain.holdout_fraction,
        seed=_derive(seed, 2),
    )
    return model


def _derive(seed: int, stream: int, extra: int = 0) -> int:
    return int(np.random.SeedSequence([seed, stream, extra]).generate_state(1)[0])


class ClassifierHead:
    """Trainable linear head on the last-token representation."""

    def __init__(self, d_model: int, n_classes: int):
        self.w = Tensor(np.zeros((n_classes, d_model)), requires_grad=True)
        self.b = Tensor(np.zeros(n_classes), requires_grad=True)

    def logits(self, final_states: Tensor) -> Tensor:
        b, t, d = final_states.shape
        last = tz.reshape(tz.select_index(final_states, 1, t - 1), (b, d))
        return tz.add(tz.matmul(last, tz.transpose(self.w)), self.b)

    def trainable_tensors(self) -> list[Tensor]:
        return [self.w, self.b]


def build_method(cfg: ExperimentConfig, seed: int, adapter_layers: list[int] | None = None):
    """(bank, hooks, router_states) for the configured method."""
    targeted = cfg.router.targeted_projections()
    if cfg.method == "frozen":
        return None, None, {}
    if cfg.method == "moe":
        bank = MoEAdapterBank(cfg.model, cfg.moe, targeted, layers=adapter_layers, seed=_derive(seed, 3))
        return bank, MoEHooks(bank), {}
    bank = AdapterBank(cfg.model, cfg.adapter, targeted, layers=adapter_layers, seed=_derive(seed, 3))
    if cfg.method == "peft":
        return bank, UniformAdapterHooks(bank), {}
    return bank, None, {}  # mj: hooks built after center initialization


def init_router_states(
    cfg: ExperimentConfig,
    model: Backbone,
    train_ds: Dataset,
    seed: int,
    total_steps: int,
    adapter_layers: list[int] | None = None,
) -> dict[int, RouterState]:
    routed = cfg.router.routed_projections()
    layer_pool = list(range(cfg.model.n_layers)) if adapter_layers is None else sorted(adapter_layers)
    if cfg.router.routed_layers is not None:
        layer_pool = [l for l in layer_pool if l in cfg.router.routed_layers]
    budget = min(cfg.router.kmeans_samples, train_ds.total_tokens())
    sample = sample_init_tokens(train_ds, budget, _derive(seed, 4), model)
    stop_step = int(round(cfg.router.stop_frac * total_steps))
    states = {}
    for layer in layer_pool:
        result = kmeans_init(
            sample["features"][layer], len(routed), iters=cfg.router.kmeans_iters, seed=_derive(seed, 5, layer)
        )
        states[layer] = RouterState(
            centers=result.centers,
            tau=cfg.router.tau,
            top_k=cfg.router.top_k,
            beta=cfg.router.beta,
            update_every=cfg.router.update_every,
            stop_step=stop_step,
            similarity=cfg.router.similarity,
            granularity=cfg.router.granularity,
            routed=routed,
            shared=cfg.router.shared_projections(),
            permutation=tuple(cfg.router.permutation) if cfg.router.permutation else (),
        )
    return states


def _task_expert_row(cfg: ExperimentConfig, tasks: np.ndarray) -> np.ndarray:
    n_slots = len(cfg.router.routed)
    if cfg.router.task_experts is not None:
        table = np.asarray(cfg.router.task_experts, dtype=np.int64)
        return table[tasks]
    return tasks % n_slots


def evaluate(
    cfg: ExperimentConfig,
    model: Backbone,
    hooks,
    head: ClassifierHead,
    dataset: Dataset,
    usage: UsageRecorder | None = None,
    capture_embeddings: bool = False,
) -> dict:
    """Per-task accuracy on length-bucketed batches; optionally records usage."""
    correct: dict[int, int] = {}
    totals: dict[int, int] = {}
    captured: dict[int, tuple[np.ndarray, RoutingDecision]] = {}
    for idx in length_buckets(dataset, cfg.train.batch_size):
        tokens, labels, tasks = batch_arrays(dataset, idx)
        if hooks is not None:
            hooks.set_batch(_task_expert_row(cfg, tasks))
        final = model.final_states(tokens, hooks)
        pred = np.argmax(head.logits(final).data, axis=1)
        for task, y, yhat in zip(tasks, labels, pred):
            totals[int(task)] = totals.get(int(task), 0) + 1
            correct[int(task)] = correct.get(int(task), 0) + int(yhat == y)
        if usage is not None and isinstance(hooks, MonkeyJumpHooks):
            for layer, decision, flat in hooks.collected:
                usage.add(layer, decision)
                if capture_embeddings and layer not in captured:
                    captured[layer] = (flat, decision)
    per_task = {task: correct[task] / totals[task] for task in sorted(totals)}
    overall = sum(correct.values()) / sum(totals.values())
    out = {"per_task_accuracy": per_task, "overall_accuracy": overall}
    if capture_embeddings:
        out["embeddings"] = captured
    return out


def run_pipeline(
    cfg: ExperimentConfig,
    seed: int,
    out_dir=None,
    backbone: Backbone | None = None,
    train_ds: Dataset | None = None,
    val_ds: Dataset | None = None,
    adapter_layers: list[int] | None = None,
) -> dict:
    """Full fine-tuning run; deterministic given (cfg, seed)."""
    if train_ds is None or val_ds is None:
        gen_train, gen_val = make_datasets(cfg)
        train_ds = train_ds if train_ds is not None else gen_train
        val_ds = val_ds if val_ds is not None else gen_val
    if backbone is None:
        backbone = prepare_backbone(cfg, seed, corpus=pretraining_corpus(train_ds))
    if not backbone.frozen:
        raise ValueError("run_pipeline requires a frozen backbone")

    batches = length_buckets(train_ds, cfg.train.batch_size)
    steps_per_epoch = math.ceil(len(batches) / cfg.train.grad_accum)
    total_steps = cfg.train.epochs * steps_per_epoch

    bank, hooks, states = build_method(cfg, seed, adapter_layers)
    if cfg.method == "mj":
        states = init_router_states(cfg, backbone, train_ds, seed, total_steps, adapter_layers)
        hooks = MonkeyJumpHooks(bank, states, record=True)

    head = ClassifierHead(cfg.model.d_model, train_ds.n_global_classes)
    params = head.trainable_tensors() + (bank.trainable_tensors() if bank is not None else [])
    opt = AdamW(params, lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)

    history = RoutingHistory()
    if isinstance(hooks, MonkeyJumpHooks):
        if bank is not None:
            bank.eval()
        evaluate(cfg, backbone, hooks, head, val_ds, usage=history.init)

    if bank is not None:
        bank.train()
    metrics: list[dict] = []
    order_rng = np.random.default_rng(_derive(seed, 6))
    step = 0
    for _epoch in range(cfg.train.epochs):
        epoch_order = order_rng.permutation(len(batches))
        micro = 0
        step_loss = 0.0
        step_decisions: list[tuple[int, RoutingDecision, np.ndarray]] = []
        for bi in epoch_order:
            tokens, labels, tasks = batch_arrays(train_ds, batches[bi])
            if bank is not None:
                bank.begin_step(_derive(seed, 7, step * 10000 + micro))
            if hooks is not None:
                hooks.set_batch(_task_expert_row(cfg, tasks))
            with tz.Tape():
                try:
                    final = backbone.final_states(tokens, hooks)
                    loss = tz.cross_entropy(head.logits(final), labels)
                    scaled = tz.mul(loss, 1.0 / cfg.train.grad_accum)
                    tz.backward(scaled)
                except FloatingPointError as err:
                    raise RuntimeError(f"training diverged at step {step}: {err}") from err
            step_loss += float(scaled.data)
            if isinstance(hooks, MonkeyJumpHooks):
                step_decisions.extend(hooks.collected)
            micro += 1
            if micro == cfg.train.grad_accum or bi == epoch_order[-1]:
                opt.lr = lr_at_step(step, total_steps, cfg.train.lr, cfg.train.warmup_ratio)
                opt.step()
                opt.zero_grad()
                fired = _apply_ema(states, step_decisions, step)
                row = {"step": step, "loss": step_loss, "lr": opt.lr, "ema_fired": fired}
                if step_decisions:
                    row["usage"] = _step_usage(step_decisions)
                metrics.append(row)
                step += 1
                micro = 0
                step_loss = 0.0
                step_decisions = []

    if bank is not None:
        bank.eval()
    final_usage = UsageRecorder()
    result = evaluate(
        cfg, backbone, hooks, head, val_ds,
        usage=final_usage if isinstance(hooks, MonkeyJumpHooks) else None,
        capture_embeddings=isinstance(hooks, MonkeyJumpHooks),
    )
    history.final = final_usage

    report = {
        "config_hash": config_hash(cfg),
        "method": cfg.method,
        "seed": seed,
        "steps": step,
        "final_loss": metrics[-1]["loss"] if metrics else None,
        "per_task_accuracy": {str(k): v for k, v in result["per_task_accuracy"].items()},
        "overall_accuracy": result["overall_accuracy"],
        "trainable_params": int(sum(p.data.size for p in params)),
    }
    stats = None
    if isinstance(hooks, MonkeyJumpHooks) and not history.init.empty and not history.final.empty:
        stats = usage_report(history)
        report["usage_rho"] = [float(r) for r in stats.rho]

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(cfg.to_json())
        with open(out_dir / "metrics.jsonl", "w") as fh:
            for row in metrics:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        backbone.save(out_dir / "backbone")
        if bank is not None:
            bank.save(out_dir / "adapters")
        tz.save_tensor(out_dir / "head_w.bin", head.w.data)
        tz.save_tensor(out_dir / "head_b.bin", head.b.data)
        if states:
            save_router(out_dir / "router", states)
        if stats is not None:
            write_usage_csv(stats, out_dir / "usage.csv")
        if "embeddings" in result and result["embeddings"]:
            export_embeddings(out_dir / "embeddings.csv", result["embeddings"])

    report["metrics"] = metrics
    report["router_states"] = states
    report["bank"] = bank
    report["head"] = head
    return report


def _step_usage(decisions) -> dict:
    """Per-layer routed-token fractions over one optimizer step's batches."""
    rec = UsageRecorder()
    for layer, decision, _flat in decisions:
        rec.add(layer, decision)
    return {str(layer): [float(f) for f in fracs] for layer, fracs in rec.fractions().items()}


def _apply_ema(states: dict[int, RouterState], decisions, step: int) -> bool:
    if not states or not decisions:
        return False
    merged: dict[int, tuple[list[np.ndarray], list[np.ndarray]]] = {}
    for layer, decision, flat in decisions:
        ms, hs = merged.setdefault(layer, ([], []))
        ms.append(decision.m)
        hs.append(flat)
    fired = False
    for layer, (ms, hs) in merged.items():
        m = np.vstack(ms)
        pooled = RoutingDecision(z=np.empty((0, m.shape[1])), p=np.empty((0, m.shape[1])), m=m,
                                 selected=np.empty((0, 1), dtype=np.int64))
        fired = ema_update(states[layer], pooled, np.vstack(hs), step) or fired
    return fired


# ---------------------------------------------------------------------------
# experiment drivers
# ---------------------------------------------------------------------------


def shared_vs_specific(cfg: ExperimentConfig, seeds: list[int] | None = None) -> dict:
    """One bank on the task mixture vs per-task banks at the same total budget.

    The adapter rank is partitioned: the shared arm trains one bank at the
    configured rank on the mixture; the specific arm gives each task its own
    bank at rank r / n_tasks, trained only on that task, so the total
    trainable count is exactly equal. Each specific run gets n_tasks times
    the epochs so every bank sees the same optimizer budget as the shared
    one (comparisons are at parameter parity, not compute parity).
    """
    seeds = seeds if seeds is not None else cfg.seeds
    specs = cfg.data.task_specs()
    n_tasks = len(specs)
    if cfg.adapter.variant not in ("lora", "lorafa"):
        raise ValueError("shared_vs_specific partitions rank; use a LoRA-family adapter")
    if cfg.adapter.r % n_tasks != 0:
        raise ValueError(
            f"adapter budget not divisible across tasks: rank {cfg.adapter.r}, {n_tasks} tasks"
        )
    shared_cfg = replace_config(cfg, method="peft")
    raw = shared_cfg.to_dict()
    raw["adapter"]["r"] = cfg.adapter.r // n_tasks
    raw["train"]["epochs"] = cfg.train.epochs * n_tasks
    specific_cfg = ExperimentConfig.from_dict(raw)
    rows = []
    for seed in seeds:
        train_ds, val_ds = make_datasets(cfg)
        backbone = prepare_backbone(cfg, seed, corpus=pretraining_corpus(train_ds))
        shared_run = run_pipeline(shared_cfg, seed, backbone=backbone, train_ds=train_ds, val_ds=val_ds)
        shared_count = count_trainable(shared_run["bank"])
        specific_accs = {}
        specific_count = 0
        for spec in specs:
            sub_train = train_ds.subset(spec.task_id)
            sub_val = val_ds.subset(spec.task_id)
            run = run_pipeline(specific_cfg, seed, backbone=backbone, train_ds=sub_train, val_ds=sub_val)
            specific_count += count_trainable(run["bank"])
            specific_accs[spec.task_id] = run["per_task_accuracy"][str(spec.task_id)]
        rows.append(
            {
                "seed": seed,
                "shared": {int(k): v for k, v in shared_run["per_task_accuracy"].items()},
                "specific": specific_accs,
                "parity": shared_count == specific_count,
                "shared_params": shared_count,
                "specific_params": specific_count,
            }
        )
    table = {"rows": rows, "median_shared": {}, "median_specific": {}}
    for spec in specs:
        tid = spec.task_id
        table["median_shared"][tid] = float(np.median([r["shared"][tid] for r in rows]))
        table["median_specific"][tid] = float(np.median([r["specific"][tid] for r in rows]))
    table["parity"] = all(r["parity"] for r in rows)
    return table


def replace_config(cfg: ExperimentConfig, **kwargs) -> ExperimentConfig:
    """Rebuild a config with top-level fields swapped (revalidates)."""
    raw = cfg.to_dict()
    raw.update(kwargs)
    return ExperimentConfig.from_dict(raw)


def apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    """New config with one ablation knob set."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; known: {ABLATION_AXES}")
    raw = cfg.to_dict()
    router = raw["router"]
    if axis == "similarity":
        router["similarity"] = str(value)
    elif axis == "tau":
        router["tau"] = float(value)
    elif axis == "beta":
        router["beta"] = float(value)
    elif axis == "topk":
        router["top_k"] = int(value)
    elif axis == "update_every":
        router["update_every"] = int(value)
    elif axis == "stop_frac":
        router["stop_frac"] = float(value)
    elif axis == "kmeans_samples":
        router["kmeans_samples"] = int(value)
    elif axis == "rank":
        raw["adapter"]["r"] = int(value)
    elif axis == "permutation":
        router["permutation"] = [int(v) for v in value]
    elif axis == "routed_layers":
        if isinstance(value, int):
            router["routed_layers"] = list(range(value))
        else:
            router["routed_layers"] = [int(v) for v in value]
    elif axis == "shared":
        shared = _parse_projection_list(value)
        targeted = set(router["routed"]) | set(router["shared"])
        router["shared"] = shared
        router["routed"] = sorted(targeted - set(shared))
        router["top_k"] = min(router["top_k"], len(router["routed"]))
    elif axis == "routed":
        routed = _parse_projection_list(value)
        router["routed"] = routed
        router["shared"] = sorted(set(router["shared"]) - set(routed))
        router["top_k"] = min(router["top_k"], len(routed))
    if router.get("permutation") is not None and axis in ("shared", "routed"):
        router["permutation"] = None
    return ExperimentConfig.from_dict(raw)


def _parse_projection_list(value) -> list[str]:
    if isinstance(value, str):
        return [v for v in value.split(",") if v]
    return [str(v) for v in value]


def _ablate_one(payload: tuple) -> dict:
    raw, axis, value, seed = payload
    cfg = apply_axis(ExperimentConfig.from_dict(raw), axis, value)
    run = run_pipeline(cfg, seed)
    rho = run.get("usage_rho")
    return {
        "axis": axis,
        "value": json.dumps(value) if not isinstance(value, (int, float, str)) else value,
        "seed": seed,
        "per_task_accuracy": run["per_task_accuracy"],
        "overall_accuracy": run["overall_accuracy"],
        "usage_rho_mean": float(np.mean(rho)) if rho else float("nan"),
    }


def ablate(cfg: ExperimentConfig, axis: str, values: list, seeds: list[int] | None = None) -> list[dict]:
    """Sweep one knob over `values` x `seeds`; MJLAB_THREADS>1 parallelizes."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; known: {ABLATION_AXES}")
    seeds = seeds if seeds is not None else cfg.seeds
    payloads = [(cfg.to_dict(), axis, value, seed) for value in values for seed in seeds]
    workers = worker_count()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_ablate_one, payloads))
    return [_ablate_one(p) for p in payloads]


def write_ablation_csv(rows: list[dict], path) -> None:
    import csv

    tasks = sorted({t for row in rows for t in row["per_task_accuracy"]})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis", "value", "seed", "task", "accuracy", "usage_rho_mean"])
        for row in rows:
            for task in tasks:
                acc = row["per_task_accuracy"].get(task)
                if acc is None:
                    continue
                writer.writerow([row["axis"], row["value"], row["seed"], task, repr(acc),
                                 repr(row["usage_rho_mean"])])
