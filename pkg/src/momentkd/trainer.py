"""Adversarial moment-matching training and distribution-matching baselines.

``train_mm`` is gradient descent-ascent on the joint loss: ``k_inner`` ascent
steps on each critic at step size ``alpha * eta``, then one descent step on the
student along ``g_on - g_off``.  ``train_baseline`` descends a step-wise
KL/RKL/JS/TV distance.  Both log exact metrics from the oracle every
``eval_every`` steps.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import oracle
from .core import Task, generate_dataset, rollout, sample_input
from .gradients import g_off, g_on, grad_phi_off, grad_phi_on, trajectory_score
from .objectives import DISTANCE_KINDS, step_distance_logit_grad, step_distances, u_on
from .policy import NonFiniteError, Policy, make_policy, sft_train
from .qvalue import QFunction, default_bound, make_critic

log = logging.getLogger(__name__)

METHODS = ("mm", "kl", "rkl", "js", "tv", "sft")
METRIC_FIELDS = ("step", "seed", "loss", "d_mm_on", "d_mm_off", "exact_gap",
                 "d_tv_off", "d_kl_off", "skips")


@dataclass
class TrainConfig:
    method: str = "mm"
    mode: str = "joint"
    eta: float | None = None  # None: 0.05 for tabular students, 0.01 otherwise
    alpha: float = 0.1
    k_inner: int = 5
    batch_m: int = 1
    max_steps: int = 2000
    eval_every: int = 50
    seed: int = 0
    policy_kind: str = "tabular_softmax"
    critic_kind: str = "tabular"
    critic_bound: float | str | None = "auto"  # "auto": R_max * T; None: unbounded
    reinforce_baseline: bool = False
    full_gradient: bool = True
    inner_expectation: str = "exact"  # next-token expectations are summed over the vocabulary
    dataset_size: int = 32
    sft_steps: int = 100
    sft_lr: float = 0.1
    sft_batch: int = 8
    converge_tol: float = 1e-5
    converge_patience: int = 3

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.mode not in ("on", "off", "joint"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.eta is not None and not self.eta > 0:
            raise ValueError("eta must be positive")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.k_inner < 1 or self.batch_m < 1:
            raise ValueError("k_inner and batch_m must be at least 1")
        if self.inner_expectation != "exact":
            raise ValueError("only exact inner expectations are implemented")
        if self.max_steps < 0 or self.eval_every < 1:
            raise ValueError("max_steps must be >= 0 and eval_every >= 1")

    @property
    def step_size(self) -> float:
        if self.eta is not None:
            return self.eta
        return 0.05 if self.policy_kind == "tabular_softmax" else 0.01

    def bound_for(self, task: Task) -> float | None:
        if self.critic_bound == "auto":
            return default_bound(task) or 1.0
        return None if self.critic_bound is None else float(self.critic_bound)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in names})


@dataclass
class RunRecord:
    config: dict
    rows: list[dict] = field(default_factory=list)
    status: str = "ok"
    error: str | None = None
    student: Policy | None = None
    critics: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    @property
    def kind(self) -> str:
        return str(self.config.get("method", "")).upper()

    @property
    def final(self) -> dict:
        return self.rows[-1] if self.rows else {}

    @property
    def initial(self) -> dict:
        return self.rows[0] if self.rows else {}

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.rows], dtype=float)


# -- metrics -------------------------------------------------------------------

def evaluate(task: Task, student: Policy, step: int, seed: int, loss: float | None,
             skips: int = 0) -> dict:
    """One metrics row; exact values when the task is within the enumeration cap."""
    row = dict.fromkeys(METRIC_FIELDS)
    row.update(step=step, seed=seed, loss=loss, skips=skips)
    try:
        row.update(
            d_mm_on=oracle.box_sup_mm(task, "on_policy", student),
            d_mm_off=oracle.box_sup_mm(task, "off_policy", student),
            exact_gap=oracle.exact_gap(task, student),
            d_tv_off=oracle.exact_distance(task, "TV", "off_policy", student),
            d_kl_off=oracle.exact_distance(task, "KL", "off_policy", student),
        )
    except oracle.CapExceeded:
        pass
    return row


def _mm_loss(task: Task, student: Policy, f1: QFunction, f2: QFunction, mode: str) -> float | None:
    try:
        total = 0.0
        if mode in ("off", "joint"):
            total += oracle.population_u(task, "off_policy", student, f1.table())
        if mode in ("on", "joint"):
            total += oracle.population_u(task, "on_policy", student, f2.table())
        return total
    except oracle.CapExceeded:
        return None


def _converged(rows: list[dict], tol: float, patience: int) -> bool:
    gaps = [r["exact_gap"] for r in rows[-(patience + 1):]]
    if len(gaps) < patience + 1 or any(g is None for g in gaps):
        return False
    return all(abs(b - a) < tol for a, b in zip(gaps, gaps[1:]))


# -- student preparation ---------------------------------------------------------

def seed_streams(seed: int, n: int = 4) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def pretrained_student(task: Task, cfg: TrainConfig) -> tuple[Policy, list[float]]:
    """Initialize the student and fine-tune it on a teacher-sampled dataset."""
    data_rng, sft_rng, init_rng, _ = seed_streams(cfg.seed)
    student = make_policy(task, cfg.policy_kind, rng=init_rng)
    if cfg.sft_steps == 0:
        return student, []
    data = generate_dataset(task, cfg.dataset_size, data_rng)
    return sft_train(task, data, student, cfg.sft_lr, cfg.sft_steps, sft_rng, cfg.sft_batch)


def train_rng(cfg: TrainConfig) -> np.random.Generator:
    return seed_streams(cfg.seed)[3]


# -- adversarial moment matching -------------------------------------------------

def train_mm(task: Task, student: Policy, f1: QFunction, f2: QFunction, cfg: TrainConfig,
             rng: np.random.Generator, inner_hook=None) -> RunRecord:
    """Gradient descent-ascent on the joint moment-matching loss.

    ``inner_hook(student, before, after)``, if given, sees the critic pairs
    around each block of ``k_inner`` ascent steps.
    """
    eta, m = cfg.step_size, cfg.batch_m
    use_off, use_on = cfg.mode in ("off", "joint"), cfg.mode in ("on", "joint")
    teacher = task.teacher
    record = RunRecord(cfg.to_dict())
    start = time.perf_counter()
    record.rows.append(evaluate(task, student, 0, cfg.seed, _mm_loss(task, student, f1, f2, cfg.mode)))

    def draw(pol, source):
        return [rollout(task, pol, sample_input(task, rng), rng, source) for _ in range(m)]

    try:
        for step in range(1, cfg.max_steps + 1):
            before = (f1, f2)
            for _ in range(cfg.k_inner):
                if use_off:
                    g = sum(grad_phi_off(tr, student, f1) for tr in draw(teacher, "teacher")) / m
                    f1 = f1.with_values(f1.values + cfg.alpha * eta * g)
                if use_on:
                    g = sum(grad_phi_on(tr, teacher, f2) for tr in draw(student, "student")) / m
                    f2 = f2.with_values(f2.values + cfg.alpha * eta * g)
            if inner_hook is not None:
                inner_hook(student, before, (f1, f2))
            direction = np.zeros(student.n_params)
            if use_off:
                direction -= sum(g_off(tr, student, f1) for tr in draw(teacher, "teacher")) / m
            if use_on:
                batch = draw(student, "student")
                baseline = 0.0
                if cfg.reinforce_baseline:
                    baseline = float(np.mean([u_on(tr, f2, teacher) for tr in batch]))
                direction += sum(g_on(tr, student, f2, teacher, baseline) for tr in batch) / m
            student = student.with_values(student.values - eta * direction)
            if step % cfg.eval_every == 0 or step == cfg.max_steps:
                loss = _mm_loss(task, student, f1, f2, cfg.mode)
                record.rows.append(evaluate(task, student, step, cfg.seed, loss))
                if _converged(record.rows, cfg.converge_tol, cfg.converge_patience):
                    log.info("converged at step %d", step)
                    break
    except (NonFiniteError, FloatingPointError) as exc:
        record.status, record.error = "aborted", str(exc)
        log.warning("mm training aborted: %s", exc)
    record.student = student
    record.critics = {"off": f1, "on": f2}
    record.wall_clock = time.perf_counter() - start
    return record


# -- distribution-matching baselines ---------------------------------------------

def _own_objective(task: Task, kind: str, mode: str, student: Policy) -> float | None:
    try:
        return oracle.exact_distance(task, kind, mode, student)
    except oracle.CapExceeded:
        return None


def baseline_gradient(task: Task, kind: str, mode: str, student: Policy,
                      batch_off: list, batch_on: list, full_gradient: bool = True) -> tuple[np.ndarray, int]:
    """Sampled gradient of ``d_kind^mode`` and the number of skipped trajectories.

    Off-policy differentiates the per-state distance at teacher-visited states.
    On-policy adds the score-function term for the visitation measure unless
    ``full_gradient`` is off.
    """
    teacher = task.teacher
    grad = np.zeros(student.n_params)
    skips = 0
    for tr in batch_off:
        for p, _ in tr.prefixes():
            grad += student.vjp(p, step_distance_logit_grad(kind, teacher.action_probs(p),
                                                            student.action_probs(p))) / len(batch_off)
    for tr in batch_on:
        p_star = np.array([teacher.action_probs(p) for p, _ in tr.prefixes()])
        p_theta = np.array([student.action_probs(p) for p, _ in tr.prefixes()])
        per_step = step_distances(kind, p_star, p_theta)
        if not np.all(np.isfinite(per_step)):
            skips += 1
            continue
        g = np.zeros(student.n_params)
        for (p, _), ps, pt in zip(tr.prefixes(), p_star, p_theta):
            g += student.vjp(p, step_distance_logit_grad(kind, ps, pt))
        if full_gradient:
            g += per_step.sum() * trajectory_score(tr, student)
        grad += g / len(batch_on)
    return grad, skips


def train_baseline(task: Task, student: Policy, cfg: TrainConfig, rng: np.random.Generator) -> RunRecord:
    kind = cfg.method.upper()
    if kind not in DISTANCE_KINDS:
        raise ValueError(f"baseline kind must be one of {DISTANCE_KINDS}")
    eta, m, mode = cfg.step_size, cfg.batch_m, cfg.mode
    teacher = task.teacher
    record = RunRecord(cfg.to_dict())
    start = time.perf_counter()
    record.rows.append(evaluate(task, student, 0, cfg.seed, _own_objective(task, kind, mode, student)))
    skips = 0
    try:
        for step in range(1, cfg.max_steps + 1):
            batch_off = batch_on = []
            if mode in ("off", "joint"):
                batch_off = [rollout(task, teacher, sample_input(task, rng), rng, "teacher") for _ in range(m)]
            if mode in ("on", "joint"):
                batch_on = [rollout(task, student, sample_input(task, rng), rng, "student") for _ in range(m)]
            grad, skipped = baseline_gradient(task, kind, mode, student, batch_off, batch_on,
                                              cfg.full_gradient)
            skips += skipped
            if not np.all(np.isfinite(grad)):
                skips += 1
            else:
                student = student.with_values(student.values - eta * grad)
            if step % cfg.eval_every == 0 or step == cfg.max_steps:
                record.rows.append(evaluate(task, student, step, cfg.seed,
                                            _own_objective(task, kind, mode, student), skips))
                if _converged(record.rows, cfg.converge_tol, cfg.converge_patience):
                    break
    except (NonFiniteError, FloatingPointError) as exc:
        record.status, record.error = "aborted", str(exc)
    record.student = student
    record.wall_clock = time.perf_counter() - start
    return record


def train_sft_only(task: Task, student: Policy, cfg: TrainConfig, rng: np.random.Generator) -> RunRecord:
    """Continue behavior cloning for ``max_steps`` more steps (the SFT baseline)."""
    data = generate_dataset(task, cfg.dataset_size, seed_streams(cfg.seed)[0])
    record = RunRecord(cfg.to_dict())
    start = time.perf_counter()
    record.rows.append(evaluate(task, student, 0, cfg.seed, None))
    done = 0
    try:
        while done < cfg.max_steps:
            n = min(cfg.eval_every, cfg.max_steps - done)
            student, losses = sft_train(task, data, student, cfg.sft_lr, n, rng, cfg.sft_batch)
            done += n
            record.rows.append(evaluate(task, student, done, cfg.seed, losses[-1]))
    except NonFiniteError as exc:
        record.status, record.error = "aborted", str(exc)
    record.student = student
    record.wall_clock = time.perf_counter() - start
    return record


def run(task: Task, cfg: TrainConfig, student: Policy | None = None) -> RunRecord:
    """SFT-pretrain (unless a student is given) and run the configured method."""
    if student is None:
        student, _ = pretrained_student(task, cfg)
    rng = train_rng(cfg)
    if cfg.method == "mm":
        init = seed_streams(cfg.seed, 5)[4]
        bound = cfg.bound_for(task)
        f1 = make_critic(task, cfg.critic_kind, bound, init)
        f2 = make_critic(task, cfg.critic_kind, bound, init)
        return train_mm(task, student, f1, f2, cfg, rng)
    if cfg.method == "sft":
        return train_sft_only(task, student, cfg, rng)
    return train_baseline(task, student, cfg, rng)


# -- sweeps ---------------------------------------------------------------------

@dataclass
class SweepResult:
    records: list[dict]
    table: list[dict]


def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.array([v for v in values if v is not None], dtype=float)
    if arr.size == 0:
        return math.nan, math.nan
    return float(arr.mean()), float(arr.std())


def compare_sweep(task: Task, kinds: list[str], modes: list[str], seeds: list[int],
                  cfg: TrainConfig, out_dir=None) -> SweepResult:
    """Train every (kind, mode, seed) cell from the same per-seed SFT student.

    Failed cells are recorded and the sweep continues.  With ``out_dir`` each
    cell's run is saved under ``<out_dir>/<kind>-<mode>-s<seed>``.
    """
    if not kinds or not modes or not seeds:
        raise ValueError("need at least one kind, mode and seed")
    students = {}
    records = []
    for kind in kinds:
        for mode in modes:
            for seed in seeds:
                rec = {"kind": kind.upper(), "mode": mode, "seed": seed}
                try:
                    cell = TrainConfig.from_dict({**cfg.to_dict(), "method": kind.lower(),
                                                  "mode": mode, "seed": seed})
                    if seed not in students:
                        students[seed] = pretrained_student(task, cell)[0]
                    result = run(task, cell, students[seed])
                    if out_dir is not None:
                        save_run(result, Path(out_dir) / f"{kind.lower()}-{mode}-s{seed}")
                    rec.update(status=result.status, initial=result.initial, final=result.final)
                except Exception as exc:  # one broken cell must not stop the sweep
                    log.exception("sweep cell %s/%s/%s failed", kind, mode, seed)
                    rec.update(status="failed", error=str(exc), initial={}, final={})
                records.append(rec)
    table = []
    for kind in kinds:
        for mode in modes:
            cells = [r for r in records if r["kind"] == kind.upper() and r["mode"] == mode]
            row = {"kind": kind.upper(), "mode": mode, "n": len(cells)}
            for metric in ("exact_gap", "d_mm_on", "d_mm_off"):
                mean, std = _mean_std([c["final"].get(metric) for c in cells])
                row[f"{metric}_mean"], row[f"{metric}_std"] = mean, std
            table.append(row)
    return SweepResult(records, table)


# -- persistence ----------------------------------------------------------------

def dumps_row(row: dict) -> str:
    return json.dumps(row, sort_keys=False)


def save_run(record: RunRecord, out_dir) -> Path:
    """Write config, line-delimited metrics, checkpoints and a summary under ``out_dir``."""
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(record.config, fh, indent=1, sort_keys=True)
    with open(out / "metrics.jsonl", "w") as fh:
        for row in record.rows:
            fh.write(dumps_row(row) + "\n")
    if record.student is not None:
        with open(out / "checkpoints" / "student.json", "w") as fh:
            json.dump(record.student.to_dict(), fh)
    for name, critic in record.critics.items():
        with open(out / "checkpoints" / f"critic_{name}.json", "w") as fh:
            json.dump(critic.to_dict(), fh)
    # timing is kept out of metrics.jsonl so that file stays byte-identical across reruns
    with open(out / "summary.json", "w") as fh:
        json.dump({"kind": record.kind, "mode": record.config.get("mode"), "status": record.status, "error": record.error, "final": record.final,
                   "wall_clock": record.wall_clock}, fh, indent=1)
    return out


def load_rows(run_dir) -> list[dict]:
    path = Path(run_dir) / "metrics.jsonl"
    if not path.exists() or path.stat().st_size == 0:
        raise FileNotFoundError(f"no metrics records in {run_dir}")
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_config(run_dir) -> dict:
    with open(Path(run_dir) / "config.json") as fh:
        return json.load(fh)


def default_out_root() -> Path:
    return Path(os.environ.get("MOMENTKD_OUT", "runs"))
