"""Clipped-surrogate policy optimisation against batch-level rewards."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numkit as nk
from .data import WindowSet
from .model import Episode, PolicyNetwork, log_prob_graph, rollout_stochastic, rollout_with_noise
from .rewards import RewardBatch, RewardBreakdown, combined_objective

log = logging.getLogger(__name__)

TRAINLOG_FIELDS = ["round", "j", "r_cls", "r_inv", "loss", "clip_frac", "mean_abs_ratio_minus_1",
                   "adv_mean", "adv_std", "mean_logsig"]


class NumericError(RuntimeError):
    """Training produced a non-finite quantity."""


class SamplingError(ValueError):
    """The window pool cannot satisfy the stratified batch shape."""


@dataclass(frozen=True)
class PpoConfig:
    epsilon: float = 0.2
    learning_rate: float = 3e-4
    ppo_epochs_per_round: int = 4
    rounds: int = 25
    buffers_per_round: int = 8
    classes_per_batch: int = 4
    users_per_class: int = 2
    windows_per_cell: int = 2
    w_cls: float = 5.0
    w_inv: float = 0.5
    baseline_decay: float = 0.9
    adv_norm_eps: float = 1e-8
    entropy_coef: float = 0.0
    share_windows: bool = True
    antithetic: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epsilon <= 0 or self.learning_rate <= 0:
            raise ValueError("epsilon and learning_rate must be positive")
        for name in ("ppo_epochs_per_round", "buffers_per_round", "classes_per_batch",
                     "users_per_class", "windows_per_cell"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.antithetic and (self.buffers_per_round % 2 or not self.share_windows):
            raise ValueError("antithetic buffers need share_windows and an even buffers_per_round")
        if not 0 <= self.baseline_decay < 1:
            raise ValueError("baseline_decay must be in [0, 1)")

    @property
    def batch_size(self) -> int:
        return self.classes_per_batch * self.users_per_class * self.windows_per_cell


@dataclass
class RolloutBuffer:
    x: np.ndarray  # (N, l, d)
    y: np.ndarray
    u: np.ndarray
    episode: Episode
    reward: RewardBreakdown

    @property
    def old_logprob(self) -> np.ndarray:
        return self.episode.logprob_per_token


@dataclass
class BaselineState:
    value: float | None = None


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, row: dict) -> None:
        self.rows.append(dict(row))

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=TRAINLOG_FIELDS, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in TRAINLOG_FIELDS})


class StratifiedSampler:
    """Draws classes x users x windows batches from a window pool."""

    def __init__(self, windows: WindowSet):
        self.windows = windows
        self.cells: dict[int, dict[int, np.ndarray]] = {}
        for c in np.unique(windows.y):
            self.cells[int(c)] = {int(u): np.flatnonzero((windows.y == c) & (windows.u == u))
                                  for u in np.unique(windows.u[windows.y == c])}

    def sample(self, rng: np.random.Generator, classes: int, users: int, per_cell: int) -> np.ndarray:
        eligible = []
        for c, by_user in self.cells.items():
            ok = [u for u, idx in by_user.items() if len(idx) >= per_cell]
            if len(ok) >= users:
                eligible.append(c)
            else:
                deficient = c
        if len(eligible) < classes:
            detail = f"; e.g. class {deficient} has < {users} users with >= {per_cell} windows" \
                if len(eligible) < len(self.cells) else ""
            raise SamplingError(f"need {classes} classes with {users} users x {per_cell} windows, "
                                f"only {len(eligible)} qualify{detail}")
        picked = []
        for c in sorted(rng.choice(eligible, size=classes, replace=False)):
            by_user = self.cells[int(c)]
            ok = sorted(u for u, idx in by_user.items() if len(idx) >= per_cell)
            for u in sorted(rng.choice(ok, size=users, replace=False)):
                picked.extend(rng.choice(by_user[int(u)], size=per_cell, replace=False))
        return np.array(picked)


def collect_rollouts(net: PolicyNetwork, sampler: StratifiedSampler, cfg: PpoConfig,
                     rng: np.random.Generator, idx: np.ndarray | None = None,
                     noise: np.ndarray | None = None) -> RolloutBuffer:
    """Stochastic rollouts over one stratified batch, scored once.

    ``idx`` reuses an already drawn batch of window indices; ``noise`` fixes
    the standard-normal draws behind the sampled tokens.
    """
    if idx is None:
        idx = sampler.sample(rng, cfg.classes_per_batch, cfg.users_per_class, cfg.windows_per_cell)
    ws = sampler.windows
    x, y, u = ws.x[idx], ws.y[idx], ws.u[idx]
    ep = rollout_stochastic(net, x, rng) if noise is None else rollout_with_noise(net, x, noise)
    reward = combined_objective(RewardBatch(ep.tokens, y, u), cfg.w_cls, cfg.w_inv)
    return RolloutBuffer(x, y, u, ep, reward)


def compute_advantages(buffers: list[RolloutBuffer], baseline: BaselineState,
                       cfg: PpoConfig) -> list[np.ndarray]:
    """Per-token advantages, one (N, s) array per buffer.

    Each buffer's return minus the running baseline is broadcast to all of
    its tokens; the result is then standardised over the whole round.
    """
    raw = []
    for buf in buffers:
        g = buf.reward.j
        if baseline.value is None:
            baseline.value = g
        raw.append(np.full(buf.old_logprob.shape, g - baseline.value))
        baseline.value = cfg.baseline_decay * baseline.value + (1 - cfg.baseline_decay) * g
    flat = np.concatenate([a.ravel() for a in raw])
    mean, std = flat.mean(), flat.std()
    return [(a - mean) / (std + cfg.adv_norm_eps) for a in raw]


def surrogate_terms(ratio: nk.Node, adv: np.ndarray, epsilon: float) -> nk.Node:
    """Per-token min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)."""
    unclipped = nk.mul(ratio, adv)
    clipped = nk.mul(nk.clip(ratio, 1 - epsilon, 1 + epsilon), adv)
    return nk.minimum(unclipped, clipped)


def ppo_loss(net: PolicyNetwork, buffer: RolloutBuffer, advantages: np.ndarray, epsilon: float,
             params: dict[str, nk.Node] | None = None, entropy_coef: float = 0.0):
    """Negative mean clipped surrogate. Returns (loss node, stats dict)."""
    p = net.nodes() if params is None else params
    lp = log_prob_graph(net, p, buffer.x, buffer.episode.tokens)  # (N, s, 1)
    old = buffer.old_logprob[..., None]
    adv = np.asarray(advantages, dtype=np.float64)[..., None]
    ratio = nk.exp(nk.sub(lp, old))
    loss = nk.scale(nk.mean_all(surrogate_terms(ratio, adv, epsilon)), -1.0)
    if entropy_coef:
        # diagonal Gaussian entropy is sum(logsig) + const; reward it via -mean log-density
        loss = nk.add(loss, nk.scale(nk.mean_all(lp), entropy_coef))
    r = ratio.value
    stats = {
        "clip_frac": float(np.mean(np.abs(r - 1) > epsilon)),
        "mean_abs_ratio_minus_1": float(np.mean(np.abs(r - 1))),
    }
    return loss, stats


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _concat(buffers: list[RolloutBuffer]) -> RolloutBuffer:
    if len(buffers) == 1:
        return buffers[0]
    cat = np.concatenate
    ep = Episode(cat([b.episode.tokens for b in buffers]), cat([b.episode.mus for b in buffers]),
                 cat([b.episode.logsigs for b in buffers]),
                 cat([b.episode.logprob_per_token for b in buffers]))
    return RolloutBuffer(cat([b.x for b in buffers]), cat([b.y for b in buffers]),
                         cat([b.u for b in buffers]), ep, buffers[0].reward)


def _dump(buffer: RolloutBuffer) -> str:
    ep = buffer.episode
    return (f"tokens finite={np.isfinite(ep.tokens).all()} |mu|max={np.abs(ep.mus).max():.3g} "
            f"logsig range=[{ep.logsigs.min():.3g}, {ep.logsigs.max():.3g}] "
            f"old logprob range=[{ep.logprob_per_token.min():.3g}, {ep.logprob_per_token.max():.3g}]")


def train(net: PolicyNetwork, windows: WindowSet, cfg: PpoConfig,
          rng: np.random.Generator | None = None, on_round=None) -> tuple[PolicyNetwork, TrainLog]:
    """Run ``cfg.rounds`` rounds of collect / advantage / clipped updates.

    ``on_round(round_index, net, row)`` is called after every round.
    """
    net = net.copy()
    rng = nk.make_rng(cfg.seed) if rng is None else rng
    trainlog = TrainLog()
    if cfg.rounds == 0:
        return net, trainlog
    sampler = StratifiedSampler(windows)
    opt = Adam(net.params, cfg.learning_rate)
    baseline = BaselineState()
    for rnd in range(cfg.rounds):
        idx = None
        if cfg.share_windows:
            # common windows across the round's buffers: return differences come from actions only
            idx = sampler.sample(rng, cfg.classes_per_batch, cfg.users_per_class, cfg.windows_per_cell)
        if cfg.antithetic:
            # mirrored draws: each pair shares |noise|, which cancels much of the return variance
            shape = (len(idx), net.config.s, net.config.k)
            buffers = []
            for _ in range(cfg.buffers_per_round // 2):
                eps = rng.standard_normal(shape)
                buffers.append(collect_rollouts(net, sampler, cfg, rng, idx, eps))
                buffers.append(collect_rollouts(net, sampler, cfg, rng, idx, -eps))
        else:
            buffers = [collect_rollouts(net, sampler, cfg, rng, idx) for _ in range(cfg.buffers_per_round)]
        advs = compute_advantages(buffers, baseline, cfg)
        merged = _concat(buffers)
        adv = np.concatenate(advs)
        for _ in range(cfg.ppo_epochs_per_round):
            p = net.nodes()
            loss, stats = ppo_loss(net, merged, adv, cfg.epsilon, p, cfg.entropy_coef)
            lval = loss.value.item()
            if not np.isfinite(lval):
                raise NumericError(f"non-finite loss in round {rnd}: {_dump(merged)}")
            loss.backward()
            grads = {k: n.grad for k, n in p.items()}
            if not all(np.isfinite(g).all() for g in grads.values()):
                raise NumericError(f"non-finite gradient in round {rnd}: {_dump(merged)}")
            opt.step(net.params, grads)
        row = {
            "round": rnd,
            "j": float(np.mean([b.reward.j for b in buffers])),
            "r_cls": float(np.mean([b.reward.r_cls for b in buffers])),
            "r_inv": float(np.mean([b.reward.r_inv for b in buffers])),
            "loss": lval,
            "clip_frac": stats["clip_frac"],
            "mean_abs_ratio_minus_1": stats["mean_abs_ratio_minus_1"],
            "adv_mean": float(adv.mean()),
            "adv_std": float(adv.std()),
            "mean_logsig": float(merged.episode.logsigs.mean()),
        }
        trainlog.append(row)
        if on_round is not None:
            on_round(rnd, net, row)
        log.debug("round %d j=%.4f r_cls=%.4f r_inv=%.4f", rnd, row["j"], row["r_cls"], row["r_inv"])
    return net, trainlog


def config_dict(cfg: PpoConfig) -> dict:
    return asdict(cfg)
