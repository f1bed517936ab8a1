"""Command line pipeline: ingest | synth | train | eval | sweep | report.

Every command reads a sectioned INI config (see configs/default.ini), accepts
``--set section.key=value`` overrides and writes into an output directory
named by a digest of the configuration that produced it.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import data as D
from . import evaluation as E
from .model import ModelConfig, init_policy, load_policy, save_policy
from .numkit import make_rng
from .ppo import NumericError, PpoConfig, SamplingError, train

log = logging.getLogger("tprl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_ROOT_ENV = "TPRL_DATA_ROOT"
SWEEP_AXES = {"s": "model", "w_cls": "ppo", "w_inv": "ppo"}


class UsageError(Exception):
    """Bad command line or configuration."""


# -- configuration ------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSection:
    kind: str = "synth"
    root: str = ""
    window_seconds: float = 3.0
    overlap: float = 0.5
    channels: str = ""
    zscore_eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("synth", "dsads", "pamap2"):
            raise ValueError(f"dataset.kind must be synth, dsads or pamap2, not {self.kind!r}")

    def channel_list(self) -> list[int] | None:
        return _int_list(self.channels) if self.channels.strip() else None


@dataclass(frozen=True)
class ModelSection:
    d_model: int = 32
    n_heads: int = 2
    n_layers_enc: int = 1
    n_layers_dec: int = 1
    d_ff: int = 64
    s: int = 5
    k: int = 8
    logsig_min: float = -5.0
    logsig_max: float = 2.0

    def build(self, l: int, d: int) -> ModelConfig:
        return ModelConfig(l=l, d=d, **asdict(self))


@dataclass(frozen=True)
class EvalSection:
    probe_lambda: float = 1e-2
    plans: str = "all"
    probe_rollouts: int = 0

    def __post_init__(self):
        if self.probe_lambda <= 0:
            raise ValueError("eval.probe_lambda must be positive")
        if self.probe_rollouts < 0:
            raise ValueError("eval.probe_rollouts must be >= 0")


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out: str = "runs"
    checkpoint_every: int = 0


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    groups: dict = field(default_factory=dict)
    synth: D.SynthSpec = field(default_factory=D.SynthSpec)
    model: ModelSection = field(default_factory=ModelSection)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    def resolved_groups(self) -> dict[str, list[int]]:
        if self.groups:
            return {k: list(v) for k, v in self.groups.items()}
        if self.dataset.kind == "dsads":
            return dict(D.DSADS_GROUPS)
        if self.dataset.kind == "pamap2":
            return dict(D.PAMAP2_GROUPS)
        return {chr(65 + i): [i + 1] for i in range(self.synth.num_users)}


SECTIONS = {"dataset": DatasetSection, "synth": D.SynthSpec, "model": ModelSection,
            "ppo": PpoConfig, "eval": EvalSection, "run": RunSection}


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.replace("[", "").replace("]", "").split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from None


def _convert(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise UsageError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def load_config(path=None, overrides=()) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise UsageError(f"config file {path} not found")
        cp.read(path, encoding="utf-8")
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, name, value)
    unknown = set(cp.sections()) - set(SECTIONS) - {"groups"}
    if unknown:
        raise UsageError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    built = {}
    for name, cls in SECTIONS.items():
        defaults = cls()
        known = {f.name for f in fields(cls)}
        values = {}
        if cp.has_section(name):
            for key, raw in cp.items(name):
                if key not in known:
                    raise UsageError(f"unknown key {name}.{key}; valid keys: {', '.join(sorted(known))}")
                values[key] = _convert(raw, getattr(defaults, key), f"{name}.{key}")
        try:
            built[name] = cls(**values)
        except ValueError as exc:
            raise UsageError(f"[{name}] {exc}") from None
    groups = {}
    if cp.has_section("groups"):
        groups = {k: _int_list(v) for k, v in cp.items("groups")}
    return RunConfig(groups=groups, **built)


def config_to_dict(cfg: RunConfig) -> dict:
    return {"dataset": asdict(cfg.dataset), "groups": cfg.resolved_groups(),
            "synth": asdict(cfg.synth), "model": asdict(cfg.model), "ppo": asdict(cfg.ppo),
            "eval": asdict(cfg.eval), "run": asdict(cfg.run)}


def digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


# -- data layout --------------------------------------------------------------------------


def plan_dirname(name: str) -> str:
    return name.replace("->", "_to_")


def data_digest(cfg: RunConfig) -> str:
    ds = asdict(cfg.dataset)
    ds.pop("root")  # the same data may live under different mounts
    part = {"dataset": ds, "groups": cfg.resolved_groups()}
    if cfg.dataset.kind == "synth":
        part["synth"] = asdict(cfg.synth)
    return digest(part)


def data_dir(cfg: RunConfig) -> Path:
    return Path(cfg.run.out) / f"data-{cfg.dataset.kind}-{data_digest(cfg)}"


def load_recordings(cfg: RunConfig) -> list[D.SensorRecording]:
    kind = cfg.dataset.kind
    if kind == "synth":
        return D.synth_generate(cfg.synth)
    root = cfg.dataset.root or os.environ.get(DATA_ROOT_ENV, "")
    if not root:
        raise D.DataError(f"no data root: set dataset.root or ${DATA_ROOT_ENV}")
    if kind == "dsads":
        return D.ingest_dsads(root, cfg.dataset.channel_list())
    return D.ingest_pamap2(root, cfg.resolved_groups(), cfg.dataset.channel_list())


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_data(cfg: RunConfig) -> Path:
    """Materialise every LOGO plan as source.csv / target.csv plus a manifest."""
    out = data_dir(cfg)
    recs = load_recordings(cfg)
    groups = cfg.resolved_groups()
    wanted = {u for users in groups.values() for u in users}
    recs = [r for r in recs if r.user in wanted]
    if not recs:
        raise D.DataError("no recordings for the configured groups")
    ws = D.prepare_windows(recs, cfg.dataset.window_seconds, cfg.dataset.overlap, cfg.dataset.zscore_eps)
    manifest = {"dataset": cfg.dataset.kind, "digest": data_digest(cfg), "groups": groups,
                "window_length": int(ws.x.shape[1]), "channels": int(ws.x.shape[2]),
                "recordings": len(recs), "windows": len(ws), "plans": {}}
    for plan in D.build_logo_splits(groups):
        pdir = out / plan_dirname(plan.name)
        pdir.mkdir(parents=True, exist_ok=True)
        src, tgt = ws.users(plan.source_users), ws.users(plan.target_users)
        entry = {"source_users": plan.source_users, "target_users": plan.target_users,
                 "source_windows": len(src), "target_windows": len(tgt), "sha256": {}}
        for split, part in (("source", src), ("target", tgt)):
            if len(part) == 0:
                raise D.DataError(f"plan {plan.name}: {split} split has no windows")
            path = pdir / f"{split}.csv"
            D.write_windows_csv(path, part)
            entry["sha256"][f"{split}.csv"] = sha256_file(path)
        manifest["plans"][plan.name] = entry
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def ensure_data(cfg: RunConfig, explicit: str | None = None) -> Path:
    if explicit:
        path = Path(explicit)
        if not (path / "manifest.json").is_file():
            raise D.DataError(f"{path} has no manifest.json; run ingest or synth first")
        return path
    path = data_dir(cfg)
    if not (path / "manifest.json").is_file():
        write_data(cfg)
    return path


def read_manifest(ddir: Path) -> dict:
    return json.loads((ddir / "manifest.json").read_text())


def selected_plans(cfg: RunConfig, manifest: dict, only: str | None = None) -> list[str]:
    names = list(manifest["plans"])
    spec = only if only is not None else cfg.eval.plans
    if spec.strip().lower() == "all":
        return names
    picked = [p.strip() for p in spec.split(",") if p.strip()]
    bad = [p for p in picked if p not in manifest["plans"]]
    if bad:
        raise UsageError(f"unknown plan(s) {', '.join(bad)}; available: {', '.join(names)}")
    return picked


def read_split(ddir: Path, plan: str, split: str) -> D.WindowSet:
    return D.read_windows_csv(ddir / plan_dirname(plan) / f"{split}.csv")


# -- train / eval -------------------------------------------------------------------------


def plan_seed(cfg: RunConfig, manifest: dict, plan: str) -> int:
    return E.plan_seed(cfg.run.seed, list(manifest["plans"]).index(plan))


def train_dir(cfg: RunConfig, ddir: Path, plan: str, seed: int) -> Path:
    key = {"data": read_manifest(ddir)["digest"], "plan": plan, "seed": seed,
           "model": asdict(cfg.model), "ppo": asdict(cfg.ppo)}
    return Path(cfg.run.out) / f"train-{plan_dirname(plan)}-{digest(key)}"


def train_plan(cfg: RunConfig, ddir: Path, plan: str, seed: int) -> Path:
    source = read_split(ddir, plan, "source")
    model_cfg = cfg.model.build(source.x.shape[1], source.x.shape[2])
    out = train_dir(cfg, ddir, plan, seed)
    out.mkdir(parents=True, exist_ok=True)
    rng = make_rng(seed)
    net = init_policy(model_cfg, rng)
    every = cfg.run.checkpoint_every

    def checkpoint(rnd, current, row):
        if every and (rnd + 1) % every == 0:
            save_policy(current, out / f"policy_round{rnd + 1:04d}.json")

    net, trainlog = train(net, source, replace(cfg.ppo, seed=seed), rng, checkpoint)
    save_policy(net, out / "policy.json")
    trainlog.write_csv(out / "trainlog.csv")
    (out / "config.json").write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")
    return out


def eval_plan(cfg: RunConfig, ddir: Path, plan: str, checkpoint: Path, seed: int,
              sanity: bool = False) -> tuple[E.ExperimentResult, Path]:
    checkpoint = Path(checkpoint)
    if not checkpoint.is_file():
        raise D.DataError(f"checkpoint {checkpoint} not found; run train first")
    net = load_policy(checkpoint)
    source = read_split(ddir, plan, "source")
    expected = cfg.model.build(source.x.shape[1], source.x.shape[2])
    if net.config != expected:
        raise UsageError(f"checkpoint model config {asdict(net.config)} does not match "
                         f"the configured {asdict(expected)}")
    if sanity:
        # memorisation check: score the probe on a copy of one source user
        target = source.users([int(source.u[0])])
        target = D.WindowSet(target.x, target.y, target.u, [f"copy:{i}" for i in target.ids])
    else:
        target = read_split(ddir, plan, "target")
    tag = digest({"checkpoint": sha256_file(checkpoint), "lambda": cfg.eval.probe_lambda,
                  "rollouts": cfg.eval.probe_rollouts, "sanity": sanity})
    res, probe = E.evaluate_policy(net, source, target, cfg.eval.probe_lambda, plan, tag, seed,
                                     cfg.eval.probe_rollouts)
    out = checkpoint.parent / f"eval-{tag}"
    out.mkdir(parents=True, exist_ok=True)
    E.write_results_csv(out / "results.csv", [res])
    E.write_confusion_csv(out / "confusion.csv", res.confusion, res.classes)
    (out / "probe.json").write_text(json.dumps(probe.to_dict()) + "\n")
    return res, out


def run_plan(cfg: RunConfig, ddir: Path, plan: str, seed: int) -> E.ExperimentResult:
    tdir = train_plan(cfg, ddir, plan, seed)
    res, _ = eval_plan(cfg, ddir, plan, tdir / "policy.json", seed)
    res.trainlog = None
    return res


# -- commands -----------------------------------------------------------------------------


def cmd_prepare(cfg: RunConfig, args) -> int:
    if args.command == "synth":
        cfg = replace(cfg, dataset=replace(cfg.dataset, kind="synth"))
    elif cfg.dataset.kind == "synth":
        raise UsageError("ingest reads raw datasets; set dataset.kind to dsads or pamap2 (or use synth)")
    if args.root:
        cfg = replace(cfg, dataset=replace(cfg.dataset, root=args.root))
    out = write_data(cfg)
    manifest = read_manifest(out)
    print(f"{manifest['windows']} windows from {manifest['recordings']} recordings, "
          f"{len(manifest['plans'])} plans -> {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    ddir = ensure_data(cfg, args.data)
    manifest = read_manifest(ddir)
    for plan in selected_plans(cfg, manifest, args.plan):
        out = train_plan(cfg, ddir, plan, plan_seed(cfg, manifest, plan))
        print(f"{plan}: trained -> {out}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    ddir = ensure_data(cfg, args.data)
    manifest = read_manifest(ddir)
    plans = selected_plans(cfg, manifest, args.plan)
    if args.checkpoint and len(plans) != 1:
        raise UsageError("--checkpoint needs exactly one plan (use --plan)")
    for plan in plans:
        seed = plan_seed(cfg, manifest, plan)
        ckpt = Path(args.checkpoint) if args.checkpoint else train_dir(cfg, ddir, plan, seed) / "policy.json"
        res, out = eval_plan(cfg, ddir, plan, ckpt, seed, sanity=args.sanity)
        label = " (sanity: target is a copy of a source user)" if args.sanity else ""
        print(f"{plan}: accuracy {res.accuracy:.4f} (train {res.train_accuracy:.4f}){label} -> {out}")
    return EXIT_OK


def sweep_seed(master: int, axis: str, value: float, plan: str) -> int:
    h = hashlib.sha256(f"{master}|{axis}|{value!r}|{plan}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def _sweep_job(job):
    cfg, ddir, plan, seed = job
    return run_plan(cfg, ddir, plan, seed).accuracy


def cmd_sweep(cfg: RunConfig, args) -> int:
    if args.axis not in SWEEP_AXES:
        raise UsageError(f"invalid sweep axis {args.axis!r}; valid axes: {', '.join(SWEEP_AXES)}")
    cast = int if args.axis == "s" else float
    try:
        values = [cast(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"cannot parse sweep values {args.values!r}") from None
    if len(values) < 2:
        raise UsageError("a sweep needs at least two values")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    ddir = ensure_data(cfg, args.data)
    plans = selected_plans(cfg, read_manifest(ddir), args.plan)
    jobs, rows = [], []
    for value in values:
        section = SWEEP_AXES[args.axis]
        try:
            sub = replace(cfg, **{section: replace(getattr(cfg, section), **{args.axis: value})})
        except ValueError as exc:
            raise UsageError(f"{args.axis}={value}: {exc}") from None
        for plan in plans:
            seed = sweep_seed(cfg.run.seed, args.axis, value, plan)
            jobs.append((sub, ddir, plan, seed))
            rows.append([args.axis, value, plan, None, seed])
    if args.jobs == 1:
        accs = [_sweep_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            accs = list(pool.map(_sweep_job, jobs))
    key = {"config": config_to_dict(cfg), "axis": args.axis, "values": values, "plans": plans}
    out = Path(cfg.run.out) / f"sweep-{args.axis}-{digest(key)}"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis", "value", "plan", "accuracy", "seed"])
        for row, acc in zip(rows, accs):
            row[3] = repr(float(acc))
            w.writerow(row)
    for value in values:
        vals = [a for r, a in zip(rows, accs) if r[1] == value]
        s = E.aggregate(vals)
        print(f"{args.axis}={value}: mean accuracy {s.mean_accuracy:.4f} +- {s.stdev:.4f}")
    print(f"-> {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_report(cfg: RunConfig, args) -> int:
    ddir = ensure_data(cfg, args.data)
    manifest = read_manifest(ddir)
    plans = selected_plans(cfg, manifest, args.plan)
    results = [run_plan(cfg, ddir, p, plan_seed(cfg, manifest, p)) for p in plans]
    summary = E.aggregate(results)
    out = Path(cfg.run.out) / f"report-{digest({'config': config_to_dict(cfg), 'plans': plans})}"
    out.mkdir(parents=True, exist_ok=True)
    E.write_results_csv(out / "results.csv", results)
    for r in results:
        E.write_confusion_csv(out / f"confusion_{plan_dirname(r.plan)}.csv", r.confusion, r.classes)
    E.write_confusion_csv(out / "mean_confusion.csv", summary.mean_confusion, summary.classes)
    pct = [100 * r.accuracy for r in results]
    table = E.aggregate(pct)
    with open(out / "summary.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method"] + plans + ["AVG", "STDEV"])
        w.writerow(["TPRL-DG"] + [f"{E.round_report(v):.2f}" for v in pct]
                   + [f"{E.round_report(table.mean_accuracy):.2f}", f"{E.round_report(table.stdev):.2f}"])
    lines = [f"dataset {manifest['dataset']} ({manifest['digest']}), master seed {cfg.run.seed}",
             f"{'plan':>10}  accuracy"]
    lines += [f"{r.plan:>10}  {100 * r.accuracy:8.2f}" for r in results]
    lines.append(f"{'AVG':>10}  {E.round_report(table.mean_accuracy):8.2f}")
    lines.append(f"{'STDEV':>10}  {E.round_report(table.stdev):8.2f}  (population, n={table.n})")
    lines.append("per-class F1 (mean over plans): "
                 + ", ".join(f"{c}:{f:.3f}" for c, f in zip(summary.classes, summary.mean_f1)))
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text)
    print(text + f"-> {out}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("-c", "--config", help="INI config file (default: built-in defaults)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = _Parser(prog="tprl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    for name, helptext in (("ingest", "window a raw DSADS/PAMAP2 tree into per-plan CSVs"),
                           ("synth", "generate the synthetic dataset as per-plan CSVs")):
        p = sub.add_parser(name, parents=[common], help=helptext, description=helptext)
        p.add_argument("--root", help=f"raw dataset root (default: dataset.root or ${DATA_ROOT_ENV})")

    def with_data(p):
        p.add_argument("--data", help="data directory written by ingest/synth (default: derived from config)")
        p.add_argument("--plan", help="comma-separated plan names (default: eval.plans)")
        return p

    with_data(sub.add_parser("train", parents=[common], help="train the policy on source users",
                             description="Train the policy on each plan's source users."))
    p = with_data(sub.add_parser("eval", parents=[common], help="probe a trained policy on target users",
                                 description="Fit the probe on source features and score the target users."))
    p.add_argument("--checkpoint", help="policy checkpoint (default: the one train wrote for this config)")
    p.add_argument("--sanity", action="store_true",
                   help="score on a copy of a source user instead of the target group")
    p = with_data(sub.add_parser("sweep", parents=[common], help="sensitivity sweep over one hyperparameter",
                                 description="Train and evaluate every plan for each value of one axis."))
    p.add_argument("axis", help=f"one of {', '.join(SWEEP_AXES)}")
    p.add_argument("values", help="comma-separated values, at least two")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs (default 1)")
    with_data(sub.add_parser("report", parents=[common], help="train and evaluate every plan, then summarise",
                             description="Full leave-one-group-out run with summary tables."))
    return parser


COMMANDS = {"ingest": cmd_prepare, "synth": cmd_prepare, "train": cmd_train, "eval": cmd_eval,
            "sweep": cmd_sweep, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"tprl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DataError, SamplingError, E.LeakageError, FileNotFoundError) as exc:
        print(f"tprl: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"tprl: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"tprl: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
