"""Shared fixtures: trained models at two budgets and a small CLI workspace.

Everything here is session-scoped because training even the toy stack takes
seconds to minutes; tests that mutate a fixture model must restore it (the
adaptation driver does this by contract).
"""

import time
from types import SimpleNamespace

import pytest
import torch

from batta.cli import main as cli_main
from batta.data import ShiftSpec, apply_shift, build_benchmark, gen_clean
from batta.encoder import EncoderConfig
from batta.model import pretrain

torch.set_num_threads(1)

_BENCH_CACHE: dict[int, SimpleNamespace] = {}


def _benchmark_run(seed: int) -> SimpleNamespace:
    """Full-budget benchmark + pretraining for one seed, cached per session."""
    if seed not in _BENCH_CACHE:
        bench = build_benchmark(seed=seed)
        enc = EncoderConfig(
            injection_strategy="gaussian_pre_block", injection_stages=4, seed=seed
        )
        t0 = time.perf_counter()
        out = pretrain(
            bench.train, bench.val, enc, epochs=30, lr=1e-4, seed=seed, batch_size=8
        )
        _BENCH_CACHE[seed] = SimpleNamespace(
            seed=seed,
            bench=bench,
            model=out.model,
            meta=out.meta,
            pretrain_seconds=time.perf_counter() - t0,
        )
    return _BENCH_CACHE[seed]


@pytest.fixture(scope="session")
def bench_builder():
    """Callable seed -> full-budget benchmark run (dataset, model, timing)."""
    return _benchmark_run


@pytest.fixture(scope="session")
def bench0(bench_builder):
    return bench_builder(0)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def criterion_log():
    """Record one pass/fail line per acceptance criterion for the final report."""

    def log(number: int, ok: bool, detail: str) -> bool:
        verdict = "PASS" if ok else "FAIL"
        ACCEPTANCE_LINES.append(f"[criterion {number:2d}] {verdict} - {detail}")
        return ok

    return log


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def trained():
    """A small pretrained model plus clean and shifted sample pools."""
    train = gen_clean(64, 64, seed=11, prefix="train")
    val = gen_clean(16, 64, seed=12, prefix="val")
    enc = EncoderConfig(
        injection_strategy="gaussian_pre_block", injection_stages=4, seed=11
    )
    out = pretrain(train, val, enc, epochs=20, lr=1e-4, seed=11, batch_size=8)
    clean_test = gen_clean(12, 64, seed=13, prefix="shift")
    shifted = apply_shift(clean_test, ShiftSpec(kind="combo", severity=1.0, seed=13))
    return SimpleNamespace(
        model=out.model,
        meta=out.meta,
        train=train,
        val=val,
        clean_test=clean_test,
        shifted=shifted,
    )


@pytest.fixture(scope="session")
def cli_ws(tmp_path_factory):
    """Generated dataset folders plus a quick checkpoint, built through the CLI."""
    root = tmp_path_factory.mktemp("cliws")
    data = root / "data"
    rc = cli_main(
        [
            "gen-data",
            "--out",
            str(data),
            "--n-train",
            "8",
            "--n-val",
            "2",
            "--n-test",
            "6",
            "--seed",
            "5",
        ]
    )
    assert rc == 0
    pt = root / "pt"
    rc = cli_main(
        [
            "pretrain",
            "--data",
            str(data),
            "--out",
            str(pt),
            "--epochs",
            "2",
            "--seed",
            "5",
        ]
    )
    assert rc == 0
    ckpt = pt / "checkpoint.bin"
    assert ckpt.is_file()
    return SimpleNamespace(root=root, data=data, ckpt=ckpt)
