import itertools
import math

import numpy as np
import pytest

from momentkd.core import Prefix, fixture_student, make_fixture_task


def naive_probs(pol, task):
    """Dict prefix -> action distribution, read one prefix at a time."""
    return {p: list(pol.action_probs(p)) for p in task.states.prefixes()}


def naive_paths(task, pol):
    """All (probability, input, actions) triples by explicit products."""
    probs = naive_probs(pol, task)
    out = []
    for x in range(task.n_inputs):
        for acts in itertools.product(range(task.n_tokens), repeat=task.horizon):
            pr = float(task.input_dist[x])
            for t, a in enumerate(acts):
                pr *= probs[Prefix(x, acts[:t])][a]
            out.append((pr, x, acts))
    return out


def naive_j(task, pol):
    total = 0.0
    for pr, x, acts in naive_paths(task, pol):
        total += pr * sum(task.reward(Prefix(x, acts[:t]), a) for t, a in enumerate(acts))
    return total


def naive_distance(task, kind, visit, student):
    """Trajectory-sum of step distances under ``visit``, using math.log only."""
    pt, ps = naive_probs(task.teacher, task), naive_probs(student, task)

    def step(p, q):
        if kind == "TV":
            return sum(abs(a - b) for a, b in zip(p, q))
        if kind == "KL":
            return sum(a * math.log(a / b) for a, b in zip(p, q) if a > 0)
        if kind == "RKL":
            return sum(b * math.log(b / a) for a, b in zip(p, q) if b > 0)
        m = [(a + b) / 2 for a, b in zip(p, q)]
        return 0.5 * sum(a * math.log(a / c) for a, c in zip(p, m) if a > 0) + \
            0.5 * sum(b * math.log(b / c) for b, c in zip(q, m) if b > 0)

    total = 0.0
    for pr, x, acts in naive_paths(task, visit):
        for t in range(task.horizon):
            p = Prefix(x, acts[:t])
            total += pr * step(pt[p], ps[p])
    return total


@pytest.fixture(scope="session")
def task_a():
    return make_fixture_task("FIXTURE-A")


@pytest.fixture(scope="session")
def task_b():
    return make_fixture_task("FIXTURE-B")


@pytest.fixture(scope="session")
def student_a(task_a):
    return fixture_student(task_a)


@pytest.fixture(scope="session")
def student_b(task_b):
    return fixture_student(task_b)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
