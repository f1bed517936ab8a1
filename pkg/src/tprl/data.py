"""Sensor recordings, windowing, per-user normalisation and group splits."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DataError(Exception):
    """Malformed or missing input data."""


@dataclass
class SensorRecording:
    rec_id: str
    user: int
    activity: int
    sample_rate: float
    samples: np.ndarray  # (T, d)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[0] < 1 or self.samples.shape[1] < 1:
            raise DataError(f"recording {self.rec_id}: samples must be T x d with T, d >= 1")


@dataclass
class LabeledWindow:
    x: np.ndarray  # (l, d)
    y: int
    u: int
    origin: tuple[str, int]

    @property
    def window_id(self) -> str:
        return f"{self.origin[0]}@{self.origin[1]}"


@dataclass
class SplitPlan:
    name: str
    groups: dict[str, list[int]]
    held_out: str
    source_users: list[int]
    target_users: list[int]


@dataclass
class SynthSpec:
    num_users: int = 4
    num_classes: int = 4
    channels: int = 6
    sample_rate: float = 25.0
    duration: float = 60.0
    seed: int = 0
    base_freq: float = 0.8  # Hz, frequency of the lowest periodic class
    freq_step: float = 0.6
    amplitude: float = 1.0
    user_amp_jitter: float = 0.3
    user_freq_jitter: float = 0.15
    user_phase_jitter: float = 2 * math.pi  # radians; per-user phase offset drawn from [0, this)
    user_mix: float = 0.5  # strength of a per-user channel mixing (sensor placement)
    user_offset: float = 0.8  # per-user, per-class static offsets
    noise: float = 0.3

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.num_users < 2:
            raise ValueError("num_users must be >= 2")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.channels < 1 or self.sample_rate <= 0 or self.duration <= 0:
            raise ValueError("channels, sample_rate and duration must be positive")


# -- raw dataset ingestion -------------------------------------------------------------

DSADS_RATE = 25.0
DSADS_COLUMNS = 45
# 5 units x (acc xyz, gyro xyz, mag xyz); default keeps acc + gyro
DSADS_DEFAULT_CHANNELS = [u * 9 + i for u in range(5) for i in range(6)]

PAMAP2_RATE = 100.0
PAMAP2_COLUMNS = 54
# activity ids of the public release -> 1..11
PAMAP2_KEEP = {1: 1, 2: 2, 3: 3, 4: 4, 5: 5, 6: 6, 7: 7, 12: 8, 13: 9, 16: 10, 17: 11}
# hand / chest / ankle IMU blocks start at columns 3, 20, 37; acc16 at +1..+3, gyro at +7..+9
PAMAP2_DEFAULT_CHANNELS = [base + off for base in (3, 20, 37) for off in (1, 2, 3, 7, 8, 9)]

DSADS_GROUPS = {"A": [1, 2], "B": [3, 4], "C": [5, 6], "D": [7, 8]}
PAMAP2_GROUPS = {"A": [1, 2], "B": [5, 6], "C": [7, 8]}


def ingest_dsads(root, channels: Sequence[int] | None = None) -> list[SensorRecording]:
    """Read ``root/aNN/pM/sKK.txt`` segment files (45 comma-separated columns)."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"DSADS root {root} is not a directory")
    channels = list(DSADS_DEFAULT_CHANNELS if channels is None else channels)
    recs = []
    act_dirs = sorted(p for p in root.iterdir() if p.is_dir() and re.fullmatch(r"a\d+", p.name))
    if not act_dirs:
        raise DataError(f"no activity directories (aNN) under {root}")
    for act_dir in act_dirs:
        activity = int(act_dir.name[1:])
        for subj_dir in sorted(p for p in act_dir.iterdir() if p.is_dir() and re.fullmatch(r"p\d+", p.name)):
            user = int(subj_dir.name[1:])
            for seg in sorted(subj_dir.glob("s*.txt")):
                rows = []
                with open(seg, encoding="utf-8") as fh:
                    for lineno, line in enumerate(fh, 1):
                        if not line.strip():
                            continue
                        fields = line.strip().split(",")
                        if len(fields) != DSADS_COLUMNS:
                            raise DataError(f"{seg}:{lineno}: expected {DSADS_COLUMNS} fields, got {len(fields)}")
                        try:
                            rows.append([float(v) for v in fields])
                        except ValueError as exc:
                            raise DataError(f"{seg}:{lineno}: {exc}") from None
                if not rows:
                    raise DataError(f"{seg}: empty segment file")
                arr = np.array(rows)[:, channels]
                recs.append(SensorRecording(f"dsads_a{activity:02d}_p{user}_{seg.stem}", user, activity,
                                            DSADS_RATE, arr))
    return recs


def _interp_nans(arr: np.ndarray) -> np.ndarray:
    """Linear interpolation over NaN runs per column; edges hold the nearest value."""
    out = arr.copy()
    idx = np.arange(len(arr))
    for c in range(arr.shape[1]):
        col = out[:, c]
        bad = np.isnan(col)
        if bad.all():
            col[:] = 0.0
        elif bad.any():
            col[bad] = np.interp(idx[bad], idx[~bad], col[~bad])
    return out


def ingest_pamap2(root, groups: dict[str, list[int]] | None = None,
                  channels: Sequence[int] | None = None) -> list[SensorRecording]:
    """Read ``subject1NN.dat`` files (whitespace-delimited, 54 columns)."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"PAMAP2 root {root} is not a directory")
    groups = PAMAP2_GROUPS if groups is None else groups
    wanted = {u for users in groups.values() for u in users}
    channels = list(PAMAP2_DEFAULT_CHANNELS if channels is None else channels)
    files = sorted(root.rglob("subject1*.dat"))
    if not files:
        raise DataError(f"no subject1NN.dat files under {root}")
    recs = []
    for path in files:
        user = int(re.fullmatch(r"subject1(\d+)\.dat", path.name).group(1))
        if user not in wanted:
            continue
        try:
            table = np.loadtxt(path, ndmin=2)
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from None
        if table.shape[1] != PAMAP2_COLUMNS:
            raise DataError(f"{path}: expected {PAMAP2_COLUMNS} columns, got {table.shape[1]}")
        acts = table[:, 1].astype(int)
        cuts = np.flatnonzero(np.diff(acts)) + 1
        starts = np.concatenate([[0], cuts])
        stops = np.concatenate([cuts, [len(acts)]])
        for n, (a, b) in enumerate(zip(starts, stops)):
            raw = acts[a]
            if raw not in PAMAP2_KEEP:
                continue
            samples = _interp_nans(table[a:b][:, channels])
            recs.append(SensorRecording(f"pamap2_s{user}_r{n:04d}", user, PAMAP2_KEEP[raw],
                                        PAMAP2_RATE, samples))
    return recs


# -- synthetic data -------------------------------------------------------------------


def synth_generate(spec: SynthSpec) -> list[SensorRecording]:
    """One recording per (user, class).

    Class 1 is static (constant level plus noise); the others are periodic
    with distinct frequencies and waveforms. Each user perturbs amplitude,
    frequency and phase, mixes channels (a stand-in for sensor placement)
    and adds per-class offsets.
    """
    rng = np.random.default_rng(spec.seed)
    d = spec.channels
    T = int(round(spec.duration * spec.sample_rate))
    t = np.arange(T) / spec.sample_rate
    shapes = ["static"] + [("sine", "square", "saw")[(c - 1) % 3] for c in range(1, spec.num_classes)]
    levels = rng.normal(size=(spec.num_classes, d))
    chan_amp = rng.uniform(0.5, 1.5, size=(spec.num_classes, d))
    chan_phase = rng.uniform(0, 2 * np.pi, size=(spec.num_classes, d))
    users = []
    for _ in range(spec.num_users):
        mix = np.eye(d) + spec.user_mix * rng.normal(size=(d, d)) / np.sqrt(d)
        users.append({
            "amp": 1.0 + spec.user_amp_jitter * rng.uniform(-1, 1),
            "freq": 1.0 + spec.user_freq_jitter * rng.uniform(-1, 1),
            "phase": rng.uniform(0, 1) * spec.user_phase_jitter,
            "mix": mix,
            "offset": spec.user_offset * rng.normal(size=(spec.num_classes, d)),
        })
    recs = []
    for ui, up in enumerate(users):
        for c in range(spec.num_classes):
            if shapes[c] == "static":
                clean = np.broadcast_to(levels[c], (T, d)).copy()
            else:
                f = (spec.base_freq + spec.freq_step * (c - 1)) * up["freq"]
                arg = 2 * np.pi * f * t[:, None] + chan_phase[c] + up["phase"]
                if shapes[c] == "sine":
                    wave = np.sin(arg)
                elif shapes[c] == "square":
                    wave = np.sign(np.sin(arg))
                else:
                    wave = 2 * ((arg / (2 * np.pi)) % 1.0) - 1
                clean = 0.3 * levels[c] + spec.amplitude * up["amp"] * chan_amp[c] * wave
            signal = clean @ up["mix"].T + up["offset"][c]
            signal = signal + spec.noise * rng.normal(size=(T, d))
            recs.append(SensorRecording(f"synth_u{ui + 1}_c{c + 1}", ui + 1, c + 1,
                                        spec.sample_rate, signal))
    return recs


# -- preprocessing ----------------------------------------------------------------------


def zscore_per_user(recordings: Sequence[SensorRecording], eps: float = 1e-8) -> list[SensorRecording]:
    """Standardise each (user, channel) with population statistics over that user's recordings."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    out = []
    stats = {}
    for u in sorted({r.user for r in recordings}):
        pooled = np.concatenate([r.samples for r in recordings if r.user == u])
        mean = pooled.mean(axis=0)
        var = pooled.var(axis=0)
        std = np.sqrt(var)
        stats[u] = (mean, np.where(var > eps, std, np.inf))
    for r in recordings:
        mean, std = stats[r.user]
        out.append(SensorRecording(r.rec_id, r.user, r.activity, r.sample_rate, (r.samples - mean) / std))
    return out


def window_length(window_seconds: float, sample_rate: float) -> int:
    # round half up, so 2.5 -> 3 regardless of banker's rounding
    return int(math.floor(window_seconds * sample_rate + 0.5))


def slide_windows(rec: SensorRecording, window_seconds: float = 3.0, overlap: float = 0.5) -> list[LabeledWindow]:
    l = window_length(window_seconds, rec.sample_rate)
    if l < 1:
        raise ValueError("window must cover at least one sample")
    if not 0 <= overlap < 1:
        raise ValueError("overlap must be in [0, 1)")
    step = max(1, int(math.floor(l * (1 - overlap))))
    T = rec.samples.shape[0]
    return [LabeledWindow(rec.samples[s:s + l].copy(), rec.activity, rec.user, (rec.rec_id, s))
            for s in range(0, T - l + 1, step)]


def window_count(T: int, l: int, step: int) -> int:
    return (T - l) // step + 1 if T >= l else 0


# -- splits -------------------------------------------------------------------------------


def build_logo_splits(groups: dict[str, list[int]]) -> list[SplitPlan]:
    """One plan per group: that group is the target, the rest are sources."""
    if len(groups) < 2:
        raise ValueError("leave-one-group-out needs at least two groups")
    seen: dict[int, str] = {}
    for name, users in groups.items():
        for u in users:
            if u in seen:
                raise ValueError(f"user {u} appears in groups {seen[u]} and {name}")
            seen[u] = name
    names = sorted(groups)
    plans = []
    for held in reversed(names):
        src = [g for g in names if g != held]
        plans.append(SplitPlan(
            name=f"{''.join(src)}->{held}",
            groups={g: list(groups[g]) for g in names},
            held_out=held,
            source_users=sorted(u for g in src for u in groups[g]),
            target_users=sorted(groups[held]),
        ))
    return plans


# -- window sets and the canonical CSV format ------------------------------------------------


@dataclass
class WindowSet:
    """Windows stacked into arrays for batched model evaluation."""

    x: np.ndarray  # (N, l, d)
    y: np.ndarray
    u: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.y)

    @classmethod
    def from_windows(cls, windows: Sequence[LabeledWindow]) -> "WindowSet":
        if not windows:
            raise DataError("no windows")
        return cls(np.stack([w.x for w in windows]), np.array([w.y for w in windows]),
                   np.array([w.u for w in windows]), [w.window_id for w in windows])

    def subset(self, mask) -> "WindowSet":
        idx = np.flatnonzero(mask)
        return WindowSet(self.x[idx], self.y[idx], self.u[idx], [self.ids[i] for i in idx])

    def users(self, users: Iterable[int]) -> "WindowSet":
        return self.subset(np.isin(self.u, list(users)))


def write_windows_csv(path, ws: WindowSet) -> None:
    d = ws.x.shape[2]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "activity", "window_id", "t"] + [f"ch{i}" for i in range(d)])
        for i in range(len(ws)):
            for t, row in enumerate(ws.x[i]):
                w.writerow([int(ws.u[i]), int(ws.y[i]), ws.ids[i], t] + [repr(float(v)) for v in row])


def read_windows_csv(path) -> WindowSet:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing window file {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:4] != ["user", "activity", "window_id", "t"]:
            raise DataError(f"{path}: bad header")
        d = len(header) - 4
        order: list[str] = []
        meta: dict[str, tuple[int, int]] = {}
        frames: dict[str, list[list[float]]] = {}
        for lineno, row in enumerate(reader, 2):
            if len(row) != d + 4:
                raise DataError(f"{path}:{lineno}: expected {d + 4} fields, got {len(row)}")
            wid = row[2]
            if wid not in frames:
                order.append(wid)
                frames[wid] = []
                meta[wid] = (int(row[0]), int(row[1]))
            if int(row[3]) != len(frames[wid]):
                raise DataError(f"{path}:{lineno}: window {wid} rows out of order")
            frames[wid].append([float(v) for v in row[4:]])
    if not order:
        raise DataError(f"{path}: no windows")
    lengths = {len(frames[w]) for w in order}
    if len(lengths) != 1:
        raise DataError(f"{path}: windows have differing lengths {sorted(lengths)}")
    x = np.array([frames[w] for w in order])
    return WindowSet(x, np.array([meta[w][1] for w in order]), np.array([meta[w][0] for w in order]), order)


def prepare_windows(recordings: Sequence[SensorRecording], window_seconds: float = 3.0,
                    overlap: float = 0.5, eps: float = 1e-8) -> WindowSet:
    """Per-user z-score, then sliding windows over every recording."""
    normed = zscore_per_user(recordings, eps)
    windows = [w for r in normed for w in slide_windows(r, window_seconds, overlap)]
    return WindowSet.from_windows(windows)

