"""Losses, Adam with linear warmup, train/eval loops, metrics, and run artifacts.

Runs are reproducible: all randomness flows from the config seed, artifacts
carry no wall-clock data, and reruns in float64 match bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import __version__
from .batched import batch_state_tensors, padded_tree_rows
from .minilang import operator_nodes
from .model import ModelConfig, init_params
from .numerics import (
    MASK_FILL,
    ParamStore,
    Tensor,
    add,
    backward,
    constant,
    gather_rows,
    linear,
    load_checkpoint,
    log_softmax,
    matmul,
    neg,
    reshape,
    save_checkpoint,
    scale,
    select_columns,
    set_check_finite,
    sum_all,
)
from .synth import Corpus
from .trees import branching_stats


class NonFiniteGradient(RuntimeError):
    pass


class DigestMismatch(ValueError):
    pass


@dataclass
class TrainConfig:
    task: str = "classify"
    d: int = 256
    heads: int = 4
    ffn_hidden: int | None = None
    max_children: int = 16
    base_lr: float = 0.002
    warmup_steps: int = 2000
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    precision: str = "float32"
    use_position_encoding: bool = True
    use_fraternal_attention: bool = True
    pe_before_parental: bool = False
    use_top_down: bool = True
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = final only
    target: dict | None = None  # e.g. {"accuracy": 0.95}: stop once all reached

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.precision not in ("float64", "float32"):
            raise ValueError(f"unknown precision {self.precision!r}")
        if self.task not in ("classify", "wrongop", "node-classify"):
            raise ValueError(f"unknown task {self.task!r}")


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear ramp from 0 to base_lr over warmup_steps, constant afterwards."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return config.base_lr * min(1.0, step / config.warmup_steps)


class AdamState:
    def __init__(self, params: ParamStore):
        self.m = {n: np.zeros_like(params.params[n].data) for n in params.names()}
        self.v = {n: np.zeros_like(params.params[n].data) for n in params.names()}
        self.t = 0


def adam_step(
    params: ParamStore,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard bias-corrected Adam update; missing gradients count as zero."""
    state.t += 1
    t = state.t
    for name in params.names():
        p = params.params[name]
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.isfinite(g.sum()):
            raise NonFiniteGradient(
                f"non-finite gradient in {name!r} at optimizer step {t}"
            )
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1**t)
        vhat = v / (1.0 - beta2**t)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


# ---------------------------------------------------------------------------
# losses

def _as_logits(x) -> Tensor:
    t = x if isinstance(x, Tensor) else constant(np.asarray(x, dtype=np.float64))
    return reshape(t, (1, t.data.size)) if t.data.ndim == 1 else t


def cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy over rows of ``logits``."""
    logits = _as_logits(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError(f"label outside [0, {c})")
    picked = select_columns(log_softmax(logits), labels)
    return scale(neg(sum_all(picked)), 1.0 / n)


def loss_classify(logits, label) -> Tensor:
    return cross_entropy(logits, label)


def loss_wrongop(pointer_logits, repair_logits, target_index, repair_label) -> Tensor:
    """Localization plus repair cross-entropies, summed unweighted."""
    return add(
        cross_entropy(pointer_logits, target_index),
        cross_entropy(repair_logits, repair_label),
    )


def loss_node_classify(logits, labels) -> Tensor:
    return cross_entropy(logits, labels)


# ---------------------------------------------------------------------------
# metrics

@dataclass
class Metrics:
    task: str
    mean_loss: float
    samples: int
    accuracy: float | None = None
    loc_accuracy: float | None = None
    joint_accuracy: float | None = None

    def __post_init__(self):
        if self.loc_accuracy is not None and self.joint_accuracy is not None:
            assert self.joint_accuracy <= self.loc_accuracy + 1e-12

    def to_dict(self) -> dict:
        out = {"task": self.task, "mean_loss": self.mean_loss, "samples": self.samples}
        for key in ("accuracy", "loc_accuracy", "joint_accuracy"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out


def model_config_for(config: TrainConfig, corpus: Corpus) -> ModelConfig:
    max_branch = max(branching_stats(t).max_children for t in corpus.trees)
    if max_branch > config.max_children:
        raise ValueError(
            f"corpus branching factor {max_branch} exceeds max_children={config.max_children}"
        )
    head = {}
    if config.task == "classify":
        head["classify_classes"] = int(
            corpus.meta.get("classes") or 1 + max(t.tree_label for t in corpus.trees)
        )
    elif config.task == "wrongop":
        head["operator_classes"] = len(corpus.meta["operators"])
    else:
        classes = corpus.meta.get("node_classes")
        if classes is None:
            classes = 1 + max(max(t.node_labels.values()) for t in corpus.trees if t.node_labels)
        head["node_classes"] = int(classes)
    return ModelConfig(
        d=config.d,
        heads=config.heads,
        type_vocab_size=corpus.vocab.n_types,
        token_vocab_size=corpus.vocab.n_tokens,
        max_children=config.max_children,
        ffn_hidden=config.ffn_hidden,
        use_position_encoding=config.use_position_encoding,
        use_fraternal_attention=config.use_fraternal_attention,
        pe_before_parental=config.pe_before_parental,
        use_top_down=config.use_top_down,
        **head,
    )


# ---------------------------------------------------------------------------
# batched task forwards

def _np_dtype(params: ParamStore):
    return np.float64 if params.dtype == "float64" else np.float32


def _pooled_logits(trees, params, cfg) -> Tensor:
    _, _, D, schedule = batch_state_tensors(trees, params, cfg)
    idx, mask = padded_tree_rows(schedule)
    b, width = idx.shape
    rows = reshape(gather_rows(D, idx.reshape(-1)), (b, width, cfg.d))
    gates = reshape(matmul(rows, params["pool.gate"]), (b, width))
    gates = add(gates, constant(((1.0 - mask) * MASK_FILL).astype(_np_dtype(params))))
    from .numerics import softmax as _softmax

    weights = reshape(_softmax(gates), (b, 1, width))
    pooled = reshape(matmul(weights, rows), (b, cfg.d))
    return linear(pooled, params["head.classify.w"], params["head.classify.b"])


def _wrongop_forward(records, params, cfg):
    """Returns (pointer_logits [B,K] Tensor, cand rows/ids, D, schedule)."""
    trees = [r.tree for r in records]
    _, _, D, schedule = batch_state_tensors(trees, params, cfg)
    cands = [operator_nodes(r.tree) for r in records]
    width = max(len(c) for c in cands)
    b = len(records)
    cidx = np.zeros((b, width), dtype=np.intp)
    cmask = np.zeros((b, width), dtype=np.float64)
    for i, cand in enumerate(cands):
        rows = [schedule.row_index[i][nid] for nid in cand]
        cidx[i, : len(rows)] = rows
        cmask[i, : len(rows)] = 1.0
    crows = reshape(gather_rows(D, cidx.reshape(-1)), (b, width, cfg.d))
    plogits = reshape(matmul(crows, params["head.pointer.w"]), (b, width))
    plogits = add(
        plogits, constant(((1.0 - cmask) * MASK_FILL).astype(_np_dtype(params)))
    )
    return plogits, cands, D, schedule


def _labeled_node_logits(trees, params, cfg):
    _, _, D, schedule = batch_state_tensors(trees, params, cfg)
    rows, labels, where = [], [], []
    for t, tree in enumerate(trees):
        for nid, label in sorted((tree.node_labels or {}).items()):
            rows.append(schedule.row_index[t][nid])
            labels.append(label)
            where.append((t, nid))
    if not rows:
        raise ValueError("node-classify batch contains no labeled nodes")
    picked = gather_rows(D, np.asarray(rows, dtype=np.intp))
    logits = linear(picked, params["head.node.w"], params["head.node.b"])
    return logits, np.asarray(labels, dtype=np.intp), where


def _batch_loss(task, batch, params, cfg) -> Tensor:
    if task == "classify":
        logits = _pooled_logits([t for t in batch], params, cfg)
        labels = [t.tree_label for t in batch]
        return loss_classify(logits, labels)
    if task == "wrongop":
        plogits, cands, D, schedule = _wrongop_forward(batch, params, cfg)
        targets = np.array(
            [cands[i].index(rec.target_node) for i, rec in enumerate(batch)],
            dtype=np.intp,
        )
        gold_rows = np.array(
            [schedule.row_index[i][rec.target_node] for i, rec in enumerate(batch)],
            dtype=np.intp,
        )
        rlogits = linear(
            gather_rows(D, gold_rows), params["head.repair.w"], params["head.repair.b"]
        )
        labels = np.array([rec.original_op for rec in batch], dtype=np.intp)
        return loss_wrongop(plogits, rlogits, targets, labels)
    logits, labels, _ = _labeled_node_logits(batch, params, cfg)
    return loss_node_classify(logits, labels)


# ---------------------------------------------------------------------------
# evaluation

def _evaluate_params(
    params: ParamStore,
    cfg: ModelConfig,
    corpus: Corpus,
    batch_size: int = 64,
    predictions: list | None = None,
) -> Metrics:
    task = corpus.task
    total_loss = 0.0
    correct = 0
    loc_correct = 0
    joint_correct = 0
    n_nodes = 0
    data = corpus.records if task == "wrongop" else corpus.trees
    n = len(data)
    base = 0
    for start in range(0, n, batch_size):
        batch = data[start : start + batch_size]
        if task == "classify":
            logits = _pooled_logits(batch, params, cfg)
            labels = [t.tree_label for t in batch]
            total_loss += loss_classify(logits, labels).item() * len(batch)
            preds = np.argmax(logits.data, axis=1)
            for i, (p, g) in enumerate(zip(preds, labels)):
                correct += int(p == g)
                if predictions is not None:
                    predictions.append({"sample": base + i, "pred": int(p), "gold": int(g)})
        elif task == "wrongop":
            plogits, cands, D, schedule = _wrongop_forward(batch, params, cfg)
            targets = np.array(
                [cands[i].index(rec.target_node) for i, rec in enumerate(batch)],
                dtype=np.intp,
            )
            gold_rows = np.array(
                [schedule.row_index[i][rec.target_node] for i, rec in enumerate(batch)],
                dtype=np.intp,
            )
            rlogits_gold = linear(
                gather_rows(D, gold_rows), params["head.repair.w"], params["head.repair.b"]
            )
            labels = np.array([rec.original_op for rec in batch], dtype=np.intp)
            total_loss += loss_wrongop(plogits, rlogits_gold, targets, labels).item() * len(batch)

            loc_pred = np.argmax(plogits.data, axis=1)
            located_rows = np.array(
                [schedule.row_index[i][cands[i][loc_pred[i]]] for i in range(len(batch))],
                dtype=np.intp,
            )
            rlogits_located = linear(
                gather_rows(D, located_rows),
                params["head.repair.w"],
                params["head.repair.b"],
            )
            op_pred = np.argmax(rlogits_located.data, axis=1)
            for i, rec in enumerate(batch):
                pred_node = cands[i][loc_pred[i]]
                loc_ok = pred_node == rec.target_node
                joint_ok = loc_ok and int(op_pred[i]) == rec.original_op
                loc_correct += int(loc_ok)
                joint_correct += int(joint_ok)
                if predictions is not None:
                    predictions.append(
                        {
                            "sample": base + i,
                            "pred_node": int(pred_node),
                            "pred_op": int(op_pred[i]),
                            "gold_node": int(rec.target_node),
                            "gold_op": int(rec.original_op),
                        }
                    )
        else:
            logits, labels, where = _labeled_node_logits(batch, params, cfg)
            total_loss += loss_node_classify(logits, labels).item() * len(batch)
            preds = np.argmax(logits.data, axis=1)
            for (t, nid), p, g in zip(where, preds, labels):
                correct += int(p == g)
                n_nodes += 1
                if predictions is not None:
                    predictions.append(
                        {"sample": base + t, "node": int(nid), "pred": int(p), "gold": int(g)}
                    )
        base += len(batch)

    if task == "classify":
        return Metrics(task, total_loss / n, n, accuracy=correct / n)
    if task == "wrongop":
        return Metrics(
            task,
            total_loss / n,
            n,
            loc_accuracy=loc_correct / n,
            joint_accuracy=joint_correct / n,
        )
    return Metrics(task, total_loss / n, n, accuracy=correct / max(n_nodes, 1))


def _check_digest(expected: str, corpus: Corpus):
    actual = corpus.vocab.digest()
    if actual != expected:
        raise DigestMismatch(
            f"corpus vocabulary digest {actual[:12]} does not match model {expected[:12]}"
        )


def evaluate(checkpoint, corpus: Corpus, predictions_path=None, batch_size: int = 64) -> Metrics:
    """Metrics of a stored (or in-memory ``(params, config)``) model on a corpus."""
    if isinstance(checkpoint, (str, os.PathLike)):
        params, extra = load_checkpoint(checkpoint)
        cfg = ModelConfig.from_obj(extra["model_config"])
        _check_digest(extra["vocab_digest"], corpus)
    else:
        params, cfg = checkpoint
    if cfg.task != corpus.task:
        raise ValueError(f"model head is {cfg.task!r} but corpus task is {corpus.task!r}")
    predictions = [] if predictions_path else None
    metrics = _evaluate_params(params, cfg, corpus, batch_size, predictions)
    if predictions_path:
        with open(predictions_path, "w", encoding="utf-8") as fh:
            for row in predictions:
                fh.write(json.dumps(row, separators=(",", ":")))
                fh.write("\n")
    return metrics


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    params: ParamStore
    model_config: ModelConfig
    history: list
    final_eval: Metrics | None
    checkpoint_path: str | None
    steps: int


def code_version() -> str:
    """Content hash of the installed package sources (git-style short id)."""
    root = os.path.dirname(os.path.abspath(__file__))
    digest = hashlib.sha256()
    for name in sorted(os.listdir(root)):
        if name.endswith(".py"):
            with open(os.path.join(root, name), "rb") as fh:
                digest.update(name.encode())
                digest.update(fh.read())
    return digest.hexdigest()[:12]


def _target_reached(target: dict | None, metrics: Metrics | None) -> bool:
    if not target or metrics is None:
        return False
    got = metrics.to_dict()
    return all(key in got and got[key] >= threshold for key, threshold in target.items())


def train(
    config: TrainConfig,
    corpus: Corpus,
    eval_corpus: Corpus | None = None,
    out_dir=None,
) -> TrainResult:
    """Train on ``corpus``; deterministic given (config, corpus) in one precision."""
    if corpus.task != config.task:
        raise ValueError(f"corpus task {corpus.task!r} != config task {config.task!r}")
    if eval_corpus is not None and eval_corpus.vocab.digest() != corpus.vocab.digest():
        raise DigestMismatch("train and eval corpora carry different vocabularies")

    cfg = model_config_for(config, corpus)
    params = init_params(cfg, seed=config.seed, dtype=config.precision)
    adam = AdamState(params)
    shuffle_rng = np.random.default_rng(config.seed)
    data = corpus.records if config.task == "wrongop" else corpus.trees
    n = len(data)
    if n == 0:
        raise ValueError("empty training corpus")

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        manifest = {
            "command": "train",
            "train_config": asdict(config),
            "model_config": cfg.to_obj(),
            "vocab_digest": corpus.vocab.digest(),
            "corpus_meta": corpus.meta,
            "eval_corpus_meta": eval_corpus.meta if eval_corpus else None,
            "package_version": __version__,
            "code_version": code_version(),
        }
        with open(os.path.join(out_dir, "run_manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")

    history: list[dict] = []
    step = 0
    final_eval: Metrics | None = None
    checkpoint_path = None

    def save(params, tag="checkpoint"):
        if not out_dir:
            return None
        path = os.path.join(out_dir, f"{tag}.json")
        save_checkpoint(
            params,
            path,
            extra={
                "model_config": cfg.to_obj(),
                "vocab_digest": corpus.vocab.digest(),
                "train_config": asdict(config),
            },
        )
        return path

    epochs_run = 0
    prev_guard = set_check_finite(False)  # re-checked per step on loss and gradients
    try:
        for epoch in range(1, config.epochs + 1):
            order = shuffle_rng.permutation(n)
            epoch_loss = 0.0
            for start in range(0, n, config.batch_size):
                batch = [data[int(i)] for i in order[start : start + config.batch_size]]
                loss = _batch_loss(config.task, batch, params, cfg)
                if not np.isfinite(loss.item()):
                    raise NonFiniteGradient(f"non-finite loss at step {step + 1}")
                params.zero_grads()
                backward(loss)
                step += 1
                adam_step(params, adam, lr_schedule(step, config))
                epoch_loss += loss.item() * len(batch)
            epochs_run = epoch
            row = {"epoch": epoch, "train_loss": epoch_loss / n}
            if eval_corpus is not None:
                final_eval = _evaluate_params(params, cfg, eval_corpus, config.batch_size)
                for key, value in final_eval.to_dict().items():
                    if key not in ("task", "samples"):
                        row[f"eval_{key}"] = value
            history.append(row)
            if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                save(params, tag=f"checkpoint-epoch{epoch}")
            if _target_reached(config.target, final_eval):
                break
    finally:
        set_check_finite(prev_guard)

    checkpoint_path = save(params)
    if out_dir:
        fields = sorted({key for row in history for key in row})
        with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            writer.writerows(history)
        if eval_corpus is not None:
            final_eval = evaluate(
                (params, cfg),
                eval_corpus,
                predictions_path=os.path.join(out_dir, "predictions.jsonl"),
                batch_size=config.batch_size,
            )
        summary = {
            "epochs_run": epochs_run,
            "steps": step,
            "train_loss": history[-1]["train_loss"] if history else None,
            "eval": final_eval.to_dict() if final_eval else None,
        }
        with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=1, sort_keys=True)
            fh.write("\n")

    return TrainResult(params, cfg, history, final_eval, checkpoint_path, step)
