"""Cross-user experiment driver and classification metrics."""

from __future__ import annotations

import csv
import decimal
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import classifier
from .data import SplitPlan, WindowSet
from .model import (ModelConfig, PolicyNetwork, init_policy, rollout_deterministic,
                    rollout_stochastic)
from .numkit import make_rng
from .ppo import PpoConfig, TrainLog, train


class LeakageError(RuntimeError):
    """A target window was used during training."""


@dataclass
class ExperimentResult:
    plan: str
    accuracy: float
    f1: np.ndarray
    confusion: np.ndarray
    classes: list[int]
    config_digest: str
    seed: int
    train_accuracy: float = float("nan")
    trainlog: TrainLog | None = field(default=None, repr=False)


@dataclass
class Summary:
    n: int
    mean_accuracy: float
    stdev: float
    mean_confusion: np.ndarray
    mean_f1: np.ndarray
    classes: list[int]


def confusion_matrix(y_true, y_pred, classes) -> np.ndarray:
    classes = list(classes)
    pos = {c: i for i, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        cm[pos[t], pos[p]] += 1
    return cm


def accuracy(cm) -> float:
    cm = np.asarray(cm)
    total = cm.sum()
    if cm.size == 0 or total <= 0:
        raise ValueError("accuracy of an empty confusion matrix")
    return float(np.trace(cm) / total)


def per_class_f1(cm) -> np.ndarray:
    cm = np.asarray(cm, dtype=np.float64)
    if cm.sum() <= 0:
        raise ValueError("per-class F1 of an empty confusion matrix")
    tp = np.diag(cm)
    pred = cm.sum(axis=0)
    true = cm.sum(axis=1)
    precision = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    recall = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    denom = precision + recall
    return np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)


def aggregate(results) -> Summary:
    """Mean/stdev of accuracy over plans, mean row-normalised confusion, mean F1.

    ``results`` may be ExperimentResults or plain accuracy numbers. The
    stdev is the population (ddof=0) value.
    """
    results = list(results)
    if not results:
        raise ValueError("nothing to aggregate")
    if not isinstance(results[0], ExperimentResult):
        accs = np.array(results, dtype=np.float64)
        return Summary(len(accs), float(accs.mean()), float(accs.std()), np.empty((0, 0)),
                       np.empty(0), [])
    classes = results[0].classes
    if any(r.classes != classes for r in results):
        raise ValueError("cannot aggregate results with different class sets")
    accs = np.array([r.accuracy for r in results])
    rows = []
    for r in results:
        cm = r.confusion.astype(np.float64)
        totals = cm.sum(axis=1, keepdims=True)
        rows.append(np.divide(cm, totals, out=np.zeros_like(cm), where=totals > 0))
    return Summary(len(results), float(accs.mean()), float(accs.std()), np.mean(rows, axis=0),
                   np.mean([r.f1 for r in results], axis=0), list(classes))


def round_report(value: float, digits: int = 2) -> float:
    """Round half up on the shortest decimal repr, the way result tables are written.

    Plain round() works on the binary value, so 88.285 would become 88.28.
    """
    q = decimal.Decimal(1).scaleb(-digits)
    return float(decimal.Decimal(repr(float(value))).quantize(q, rounding=decimal.ROUND_HALF_UP))


def config_digest(*parts) -> str:
    blob = json.dumps([asdict(p) if hasattr(p, "__dataclass_fields__") else p for p in parts],
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def assert_no_leakage(train_ids, eval_ids) -> None:
    overlap = set(train_ids) & set(eval_ids)
    if overlap:
        raise LeakageError(f"{len(overlap)} evaluation windows were used in training, "
                           f"e.g. {sorted(overlap)[0]}")


def probe_features(net: PolicyNetwork, ws: WindowSet, chunk: int = 256, rollouts: int = 0,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Flattened features for the probe.

    rollouts=0 uses the mean tokens; rollouts=M averages M sampled sequences.
    """
    if rollouts == 0:
        feats = [rollout_deterministic(net, ws.x[i:i + chunk]) for i in range(0, len(ws), chunk)]
        return classifier.flatten(np.concatenate(feats))
    if rng is None:
        raise ValueError("stochastic probe features need an rng")
    total = 0.0
    for _ in range(rollouts):
        total = total + np.concatenate([rollout_stochastic(net, ws.x[i:i + chunk], rng).tokens
                                        for i in range(0, len(ws), chunk)])
    return classifier.flatten(total / rollouts)


def evaluate_policy(net: PolicyNetwork, source: WindowSet, target: WindowSet, probe_lambda: float,
                    plan_name: str = "", digest: str = "", seed: int = 0,
                    probe_rollouts: int = 0) -> tuple[ExperimentResult, classifier.LrModel]:
    """Fit the probe on source features, score it on the target windows."""
    assert_no_leakage(source.ids, target.ids)
    rng = make_rng(seed) if probe_rollouts else None
    src_f = probe_features(net, source, rollouts=probe_rollouts, rng=rng)
    probe = classifier.fit(src_f, source.y, probe_lambda)
    classes = [int(c) for c in probe.classes]
    missing = set(np.unique(target.y).tolist()) - set(classes)
    if missing:
        raise ValueError(f"target classes {sorted(missing)} never seen in source training")
    pred, _ = classifier.predict(probe, probe_features(net, target, rollouts=probe_rollouts, rng=rng))
    cm = confusion_matrix(target.y, pred, classes)
    train_pred, _ = classifier.predict(probe, src_f)
    res = ExperimentResult(plan_name, accuracy(cm), per_class_f1(cm), cm, classes, digest, seed,
                           train_accuracy=float(np.mean(train_pred == source.y)))
    return res, probe


def run_split(plan: SplitPlan, data: WindowSet, model_cfg: ModelConfig, ppo_cfg: PpoConfig,
              probe_lambda: float = 1e-2, seed: int | None = None, probe_rollouts: int = 0):
    """Train on source users only, probe on source, score on target users.

    Returns (ExperimentResult, trained policy, probe).
    """
    seed = ppo_cfg.seed if seed is None else seed
    source = data.users(plan.source_users)
    target = data.users(plan.target_users)
    if len(target) == 0:
        raise ValueError(f"plan {plan.name}: target group has no windows")
    if len(source) == 0:
        raise ValueError(f"plan {plan.name}: source groups have no windows")
    assert_no_leakage(source.ids, target.ids)
    rng = make_rng(seed)
    net = init_policy(model_cfg, rng)
    net, trainlog = train(net, source, replace(ppo_cfg, seed=seed), rng)
    digest = config_digest(model_cfg, ppo_cfg, {"probe_lambda": probe_lambda, "plan": plan.name,
                                                      "probe_rollouts": probe_rollouts})
    result, probe = evaluate_policy(net, source, target, probe_lambda, plan.name, digest, seed,
                                    probe_rollouts)
    result.trainlog = trainlog
    return result, net, probe


def plan_seed(master_seed: int, index: int) -> int:
    h = hashlib.sha256(f"{master_seed}:{index}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def write_results_csv(path, results) -> None:
    results = list(results)
    n_cls = max(len(r.classes) for r in results)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["plan", "accuracy", "seed"] + [f"f1_class_{c}" for c in results[0].classes[:n_cls]])
        for r in results:
            w.writerow([r.plan, repr(r.accuracy), r.seed] + [repr(float(v)) for v in r.f1])


def write_confusion_csv(path, cm, classes) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + [str(c) for c in classes])
        for c, row in zip(classes, np.asarray(cm)):
            w.writerow([str(c)] + [repr(float(v)) if np.issubdtype(np.asarray(cm).dtype, np.floating)
                                   else str(int(v)) for v in row])
