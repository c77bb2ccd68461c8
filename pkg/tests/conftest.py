"""Session-wide memorization runs and the acceptance-criterion recorder."""

import time
from contextlib import contextmanager
from dataclasses import dataclass

import pytest

from peftbench.adapters import AdapterStack
from peftbench.config import RunConfig, apply_preset
from peftbench.evaluation import EvalReport, evaluate, evaluate_run
from peftbench.model import TransformerModel
from peftbench.training import train

from toydata import toy_records


@dataclass
class OverfitRun:
    report: EvalReport
    preds: list
    out_dir: object
    seconds: float


def overfit_config(method: str, out_dir) -> RunConfig:
    cfg = apply_preset(RunConfig(), "toy-overfit")
    cfg.method = method
    cfg.output_dir = str(out_dir)
    if method == "lora":
        cfg.lora.epochs = 200
    return cfg.validate()


@pytest.fixture(scope="session")
def overfit_runs(tmp_path_factory):
    """base / prefix / lora / joint on the 32 toy records, each scored on its own training set."""
    recs = toy_records(32)
    runs = {}
    t = time.perf_counter()
    cfg = overfit_config("lora", tmp_path_factory.mktemp("base"))
    rep, preds = evaluate(cfg, TransformerModel.init(cfg.model), AdapterStack(), recs, label="base")
    runs["base"] = OverfitRun(rep, preds, None, time.perf_counter() - t)
    for method in ("prefix", "lora", "joint"):
        t = time.perf_counter()
        out = train(overfit_config(method, tmp_path_factory.mktemp(method)), recs)
        rep, preds = evaluate_run(out, recs, label=method)
        runs[method] = OverfitRun(rep, preds, out, time.perf_counter() - t)
    return recs, runs


# -- acceptance bookkeeping --------------------------------------------------------

ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``with criterion(n, title):`` records PASS or FAIL for acceptance criterion ``n``."""
    results = request.config.stash.setdefault(ACCEPTANCE, {})

    @contextmanager
    def check(n: int, title: str):
        try:
            yield
        except BaseException:
            results[n] = ("FAIL", title)
            print(f"criterion {n:2d}: FAIL  {title}")
            raise
        results[n] = ("PASS", title)
        print(f"criterion {n:2d}: PASS  {title}")
    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        status, title = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {title}")
