import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from modwise.harness import ExperimentConfig, generate, prepare_stack, run_experiment
from modwise.scenario import generate_scenario
from modwise.stack import init_stack
from modwise.training import interface_std

# criterion label -> (passed, detail), filled by test_acceptance
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(label: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE[label] = (bool(passed), detail)
    print(f"{'PASS' if passed else 'FAIL'} {label}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {label}: {detail}")


@pytest.fixture(scope="session")
def eval_scenarios():
    return [generate_scenario(100_000 + i) for i in range(4)]


@pytest.fixture(scope="session")
def scenario(eval_scenarios):
    return eval_scenarios[0]


@pytest.fixture(scope="session")
def small_stack(eval_scenarios):
    """Untrained stack with interface statistics, enough for structural tests."""
    stack = init_stack(0)
    stack.interface_std = interface_std(stack, eval_scenarios)
    return stack.freeze()


@dataclass
class Bench:
    config: ExperimentConfig
    train: object
    manifest: object
    train_seconds: float
    bench_seconds: float


@pytest.fixture(scope="session")
def bench(tmp_path_factory) -> Bench:
    """The default benchmark: 200 training + 50 evaluation scenarios, trained stack, four modes."""
    root = Path(tmp_path_factory.mktemp("bench"))
    config = ExperimentConfig(dataset=root / "data/eval.jsonl", train_dataset=root / "data/train.jsonl",
                              weights=root / "stack.bin", out_dir=root / "run1")
    generate(config)
    t0 = time.perf_counter()
    train = prepare_stack(config)
    t1 = time.perf_counter()
    manifest = run_experiment(config)
    t2 = time.perf_counter()
    return Bench(config, train, manifest, t1 - t0, t2 - t1)
