"""Command line harness: verify, train, sweep, export-plot.

Every subcommand draws randomness only from streams derived from ``--seed``.
Outputs default to ``$MOMENTKD_OUT`` (or ``./runs``) unless ``--out`` is given.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import oracle
from .core import FIXTURES, Task, UnknownFixture, fixture_student, load_task, make_fixture_task
from .gradients import OBJECTIVES, check_gradient, population_objective
from .objectives import DISTANCE_KINDS, AdversarialBudget, mm_distance, policy_distance
from .policy import TabularSoftmaxPolicy
from .qvalue import TabularQ, default_bound
from .trainer import (METHODS, TrainConfig, compare_sweep, default_out_root, dumps_row,
                      pretrained_student, run, save_run, seed_streams)

log = logging.getLogger("momentkd")

GRAD_TOL = 1e-5
MODE_NAMES = ("on", "off", "joint")


@dataclass
class ExperimentConfig:
    """Everything needed to repeat one invocation."""

    command: str
    task: str = "FIXTURE-B"
    train: TrainConfig = field(default_factory=TrainConfig)
    out: str | None = None
    cap: int = oracle.DEFAULT_CAP
    options: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["train"] = self.train.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        doc["train"] = TrainConfig.from_dict(doc.get("train", {}))
        return cls(**doc)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def task_label(self) -> str:
        return self.task if self.task in FIXTURES else Path(self.task).stem

    def out_dir(self, leaf: str) -> Path:
        return Path(self.out) if self.out else default_out_root() / leaf


def resolve_task(name: str) -> Task:
    """A fixture name or a path to a task JSON file."""
    if name in FIXTURES:
        return make_fixture_task(name)
    path = Path(name)
    if path.suffix == ".json" or path.exists():
        return load_task(path)
    raise UnknownFixture(name)


# -- verify --------------------------------------------------------------------

def _grad_point(task: Task, rng: np.random.Generator):
    student = TabularSoftmaxPolicy(task, rng.normal(0.0, 0.7, (task.states.size, task.n_tokens)))
    bound = default_bound(task) or 1.0
    f1 = TabularQ(task, rng.normal(0.0, 1.0, (task.states.size, task.n_tokens)), bound)
    f2 = TabularQ(task, rng.normal(0.0, 1.0, (task.states.size, task.n_tokens)), bound)
    return student, f1, f2


def cmd_verify(cfg: ExperimentConfig) -> int:
    task = resolve_task(cfg.task)
    oracle.check_cap(task, cfg.cap)
    report = oracle.certify(task, fixture_student(task), cfg.cap)
    failures = [f"certification check {c.name}: {c.lhs!r} {c.relation} {c.rhs!r} failed"
                for c in report.violations]

    fault = cfg.options.get("inject_fault")
    rng = seed_streams(cfg.train.seed, 6)[5]
    student, f1, f2 = _grad_point(task, rng)
    grads = []
    for name in OBJECTIVES:
        obj = population_objective(name, task, student, f1, f2, cap=cfg.cap)
        if name == fault:
            clean = obj.grad
            obj.grad = lambda x, clean=clean: clean(x) + 1e-3  # test hook
        r = check_gradient(obj)
        ok = r.passed(GRAD_TOL)
        grads.append({"name": name, "max_rel_err": r.max_rel_err, "max_abs_err": r.max_abs_err,
                      "tol": GRAD_TOL, "passed": ok})
        if not ok:
            failures.append(f"gradient check {name}: max_rel_err {r.max_rel_err:.3e} > {GRAD_TOL:g}")

    doc = {"task": cfg.task, "seed": cfg.train.seed, "passed": not failures,
           "first_failure": failures[0] if failures else None,
           "certification": report.to_dict(), "gradients": grads}
    out = cfg.out_dir(f"verify-{cfg.task_label}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(doc, indent=1))
    cfg.save(out / "experiment.json")
    for c in report.checks:
        print(f"{'ok  ' if c.passed else 'FAIL'} {c.name}: {c.lhs:.12g} {c.relation} {c.rhs:.12g}")
    for g in grads:
        print(f"{'ok  ' if g['passed'] else 'FAIL'} grad {g['name']}: rel err {g['max_rel_err']:.2e}")
    if failures:
        print(f"verify failed: {failures[0]}", file=sys.stderr)
        return 1
    print(f"verify passed; report at {out / 'report.json'}")
    return 0


# -- train ---------------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig) -> int:
    task = resolve_task(cfg.task)
    t = cfg.train
    out = cfg.out_dir(f"{cfg.task_label}-{t.method}-{t.mode}-s{t.seed}")
    record = run(task, t)
    save_run(record, out)
    cfg.save(out / "experiment.json")
    if record.status != "ok":
        print(f"training {record.status}: {record.error}", file=sys.stderr)
        return 1
    print(f"final {record.kind} {t.mode} " + dumps_row(record.final))
    return 0


# -- sweep ---------------------------------------------------------------------

def _distance_records(task: Task, cfg: ExperimentConfig):
    n_traj = int(cfg.options.get("n_traj", 1000))
    for seed in cfg.options.get("seeds", [cfg.train.seed]):
        tc = TrainConfig.from_dict({**cfg.train.to_dict(), "seed": seed})
        student, _ = pretrained_student(task, tc)
        rng = seed_streams(seed, 6)[5]
        for kind in cfg.options.get("kinds", list(DISTANCE_KINDS)):
            for mode in cfg.options.get("modes", list(MODE_NAMES)):
                if kind.upper() == "MM":
                    value, n = mm_distance(task, mode, student, AdversarialBudget()).value, None
                else:
                    value, n = policy_distance(task, kind.upper(), mode, student, n_traj, rng), n_traj
                yield {"kind": kind.upper(), "mode": mode, "value": value, "n_traj": n, "seed": seed}


def cmd_sweep(cfg: ExperimentConfig) -> int:
    task = resolve_task(cfg.task)
    out = cfg.out_dir(f"sweep-{cfg.task_label}-{cfg.options.get('what', 'compare')}")
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "experiment.json")
    if cfg.options.get("what") == "distances":
        with open(out / "distances.jsonl", "w") as fh:
            for rec in _distance_records(task, cfg):
                line = dumps_row(rec)
                fh.write(line + "\n")
                print(line)
        return 0

    kinds = cfg.options.get("kinds", ["MM", *DISTANCE_KINDS])
    modes = cfg.options.get("modes", list(MODE_NAMES))
    seeds = cfg.options.get("seeds", [cfg.train.seed])
    result = compare_sweep(task, kinds, modes, seeds, cfg.train, out_dir=out / "cells")
    with open(out / "records.jsonl", "w") as fh:
        for r in result.records:
            line = dumps_row({"kind": r["kind"], "mode": r["mode"], "seed": r["seed"],
                              "status": r["status"], "value": r["final"].get("exact_gap"),
                              "final": r["final"]})
            fh.write(line + "\n")
            print(line)
    with open(out / "table.jsonl", "w") as fh:
        for row in result.table:
            fh.write(dumps_row(row) + "\n")
    failed = [r for r in result.records if r["status"] != "ok"]
    if failed:
        print(f"{len(failed)} of {len(result.records)} cells did not finish cleanly", file=sys.stderr)
        return 1
    return 0


# -- export-plot ---------------------------------------------------------------

def cmd_export_plot(cfg: ExperimentConfig) -> int:
    from .plotting import export_plot

    what = cfg.options["what"]
    runs = [Path(r) for r in cfg.options["runs"]]
    # --out may name a file prefix (foo.csv / foo.png) or a directory
    if cfg.out and Path(cfg.out).suffix in (".csv", ".png"):
        prefix = Path(cfg.out).with_suffix("")
    else:
        prefix = cfg.out_dir("plots") / what
    csv_path, png_path = export_plot(runs, what, prefix)
    print(csv_path)
    print(png_path)
    return 0


COMMANDS = {"verify": cmd_verify, "train": cmd_train, "sweep": cmd_sweep, "export-plot": cmd_export_plot}


def _csv_list(text: str) -> list[str]:
    return [t for t in text.split(",") if t]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="momentkd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--task", default="FIXTURE-B", help="fixture name or task JSON file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=None, help="output directory (default: $MOMENTKD_OUT/...)")
    common.add_argument("--cap", type=int, default=oracle.DEFAULT_CAP,
                        help="maximum number of trajectories the exact oracle may enumerate")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--method", choices=METHODS, default="mm")
    training.add_argument("--mode", choices=MODE_NAMES, default="joint")
    training.add_argument("--steps", type=int, default=2000)
    training.add_argument("--eta", type=float, default=None)
    training.add_argument("--alpha", type=float, default=0.1)
    training.add_argument("--k-inner", type=int, default=5)
    training.add_argument("--batch", type=int, default=1)
    training.add_argument("--eval-every", type=int, default=50)
    training.add_argument("--policy", default="tabular_softmax",
                          choices=("tabular_softmax", "linear_softmax", "mlp"))
    training.add_argument("--critic", default="tabular", choices=("tabular", "linear_head", "mlp_head"))
    training.add_argument("--unbounded-critic", action="store_true",
                          help="drop the tanh bound on critic outputs")
    training.add_argument("--config", default=None, help="JSON file of training settings; flags override")

    p = sub.add_parser("verify", parents=[common], help="certify oracle identities and gradients")
    p.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)

    sub.add_parser("train", parents=[common, training], help="SFT then the selected trainer")

    p = sub.add_parser("sweep", parents=[common, training], help="comparison or distance sweep")
    p.add_argument("--what", choices=("compare", "distances"), default="compare")
    p.add_argument("--kinds", type=_csv_list, default=None)
    p.add_argument("--modes", type=_csv_list, default=None)
    p.add_argument("--seeds", type=lambda s: [int(x) for x in _csv_list(s)], default=None)
    p.add_argument("--n-traj", type=int, default=1000)

    p = sub.add_parser("export-plot", help="write plot tables (CSV) and PNG previews")
    p.add_argument("what", choices=("loss_curve", "mm_curve", "gap_curve", "distance_bars"))
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", default=None, help="output prefix or directory")
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    cmd = args.command
    if cmd == "export-plot":
        return ExperimentConfig(cmd, out=args.out, options={"what": args.what, "runs": args.runs})
    base = {}
    if getattr(args, "config", None):
        base = json.loads(Path(args.config).read_text())
    train = {**base, "seed": args.seed}
    if hasattr(args, "method"):
        train.update(method=args.method, mode=args.mode, max_steps=args.steps, alpha=args.alpha,
                     k_inner=args.k_inner, batch_m=args.batch, eval_every=args.eval_every,
                     policy_kind=args.policy, critic_kind=args.critic)
        if args.unbounded_critic:
            train["critic_bound"] = None
        if args.eta is not None:
            train["eta"] = args.eta
    options = {}
    if cmd == "verify" and args.inject_fault:
        options["inject_fault"] = args.inject_fault
    if cmd == "sweep":
        options = {"what": args.what, "n_traj": args.n_traj}
        for key in ("kinds", "modes", "seeds"):
            if getattr(args, key) is not None:
                options[key] = getattr(args, key)
    return ExperimentConfig(cmd, args.task, TrainConfig.from_dict(train), args.out, args.cap, options)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        return COMMANDS[cfg.command](cfg)
    except oracle.CapExceeded as exc:
        print(f"error: cap exceeded: {exc}", file=sys.stderr)
    except UnknownFixture as exc:
        print(f"error: unknown task {exc.args[0]!r}; fixtures are {sorted(FIXTURES)}", file=sys.stderr)
    except (FileNotFoundError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
