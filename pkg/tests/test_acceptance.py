"""Acceptance gate: ten numbered criteria, one pass/fail line each.

The criterion lines are printed in the terminal summary (see conftest). Heavy
criteria share the full-budget benchmark runs built once per session.
"""

import json
import math
import time
from dataclasses import replace
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from batta.adapt import AdaptationConfig, adapt_sample, select_tunable_params
from batta.boundary import (
    SOBEL_X,
    SOBEL_Y,
    GateThresholds,
    alignment_loss,
    boundary_map,
    quality_gate,
    sobel_gradients,
)
from batta.cli import adapt_summary, eval_summary
from batta.cli import main as cli_main
from batta.heatmap import GaussianCenter, aggregate_heatmap, gaussian_at
from batta.metrics import aggregate, dice, emit_plots, iou_fg, miou
from batta.model import SegModel
from batta.prompts import BoxXYXY, PromptSet
from batta.data import minimal_box


def _box(sample) -> PromptSet:
    return PromptSet(boxes=[minimal_box(sample.mask.numpy())])


def _at_stages(model: SegModel, k: int) -> SegModel:
    fresh = SegModel(replace(model.cfg, injection_stages=k))
    fresh.load_state_dict(model.state_dict())
    fresh.eval()
    return fresh


# -- criterion 1: prompt heatmaps ---------------------------------------------


def test_criterion_1_heatmap_oracle(criterion_log):
    t0 = time.perf_counter()
    center = gaussian_at(GaussianCenter(7.0, 5.0, 2.5), 16, 16)
    center_exact = center[5, 7].item() == 1.0
    off = gaussian_at(GaussianCenter(4.0, 6.0, 3.0), 16, 16)[6, 7].item()
    sigma_err = abs(off - math.exp(-0.5))

    rng = np.random.default_rng(123)
    max_err = 0.0
    for _ in range(50):
        h = int(rng.integers(4, 33))
        w = int(rng.integers(4, 33))
        n = int(rng.integers(1, 9))
        centers = [
            GaussianCenter(
                float(rng.uniform(0, w - 1)),
                float(rng.uniform(0, h - 1)),
                float(rng.uniform(0.3, 6.0)),
            )
            for _ in range(n)
        ]
        agg = np.asarray(aggregate_heatmap(centers, h, w))
        raw = np.zeros((h, w))
        for i in range(h):
            for j in range(w):
                raw[i, j] = sum(
                    math.exp(
                        -((j - c.cx) ** 2 + (i - c.cy) ** 2) / (2.0 * c.sigma**2)
                    )
                    for c in centers
                )
        want = raw / max(raw.max(), 1.0)
        max_err = max(max_err, float(np.abs(agg - want).max()))

    elapsed = time.perf_counter() - t0
    ok = center_exact and sigma_err <= 1e-9 and max_err <= 1e-6 and elapsed < 5.0
    detail = (
        f"center==1.0: {center_exact}, sigma offset err {sigma_err:.2e}, "
        f"50-instance oracle max err {max_err:.2e}, {elapsed:.2f}s"
    )
    assert criterion_log(1, ok, detail), detail


# -- criterion 2: boundary maps -----------------------------------------------


def _naive_sobel(feat: np.ndarray):
    b, c, h, w = feat.shape
    gx = np.zeros_like(feat)
    gy = np.zeros_like(feat)
    for bi in range(b):
        for ci in range(c):
            padded = np.pad(feat[bi, ci], 1, mode="edge")
            for i in range(h):
                for j in range(w):
                    sx = sy = 0.0
                    for di in range(3):
                        for dj in range(3):
                            v = padded[i + di, j + dj]
                            sx += SOBEL_X[di][dj] * v
                            sy += SOBEL_Y[di][dj] * v
                    gx[bi, ci, i, j] = sx
                    gy[bi, ci, i, j] = sy
    return gx, gy


def test_criterion_2_boundary_oracle(criterion_log):
    t0 = time.perf_counter()
    const = boundary_map(torch.full((2, 3, 6, 6), 4.2))
    const_zero = bool(torch.all(const == 0))

    rng = np.random.default_rng(77)
    sobel_err = 0.0
    for _ in range(10):
        feat = rng.normal(size=(1, 2, 5, 5))
        gx, gy = sobel_gradients(torch.tensor(feat))
        ox, oy = _naive_sobel(feat)
        sobel_err = max(
            sobel_err,
            float(np.abs(gx.numpy() - ox).max()),
            float(np.abs(gy.numpy() - oy).max()),
        )

    below_one = True
    for _ in range(30):
        feat = torch.tensor(rng.normal(size=(2, 4, 8, 8)) * rng.uniform(0.1, 50.0))
        m = boundary_map(feat)
        below_one = below_one and bool(m.max() < 1.0) and bool(m.min() >= 0.0)

    elapsed = time.perf_counter() - t0
    ok = const_zero and sobel_err <= 1e-6 and below_one and elapsed < 5.0
    detail = (
        f"constant input -> 0: {const_zero}, sobel oracle max err {sobel_err:.2e}, "
        f"max(M)<1 on 30 random inputs: {below_one}, {elapsed:.2f}s"
    )
    assert criterion_log(2, ok, detail), detail


# -- criterion 3: alignment loss ----------------------------------------------


def test_criterion_3_alignment_oracle(criterion_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(42)

    def feat(shape):
        return torch.tensor(rng.normal(size=shape), dtype=torch.float64)

    fs = feat((1, 3, 8, 8))
    m = torch.tensor(rng.uniform(size=(1, 1, 8, 8)))
    self_loss = abs(float(alignment_loss(fs, fs.clone(), m).loss))
    anti_loss = abs(float(alignment_loss(fs, -fs, m).loss) - 2.0)

    fd = feat((1, 3, 8, 8))
    base = float(alignment_loss(fs, fd, m).loss)
    scale = torch.tensor(rng.uniform(0.5, 3.0, size=(1, 3, 1, 1)))
    shift = torch.tensor(rng.normal(size=(1, 3, 1, 1)))
    affine_err = abs(float(alignment_loss(fs, fd * scale + shift, m).loss) - base)

    fd_g = feat((1, 2, 8, 8)).requires_grad_(True)
    fs_g = feat((1, 2, 8, 8))
    m_g = torch.tensor(rng.uniform(size=(1, 1, 8, 8)))
    rep = alignment_loss(fs_g, fd_g, m_g)
    rep.loss.backward()
    grad = fd_g.grad.clone()
    h = 1e-5
    rel_err = 0.0
    checked = 0
    support = (m_g[0, 0] > 0.1).nonzero().tolist()
    for i, j in support[:10]:
        for c in range(2):

            def f(v):
                fd2 = fd_g.detach().clone()
                fd2[0, c, i, j] = v
                return float(alignment_loss(fs_g, fd2, m_g).loss)

            v0 = float(fd_g.detach()[0, c, i, j])
            fd_grad = (f(v0 + h) - f(v0 - h)) / (2 * h)
            if abs(fd_grad) < 1e-8:
                continue
            rel_err = max(rel_err, abs(float(grad[0, c, i, j]) - fd_grad) / abs(fd_grad))
            checked += 1

    m_off = torch.tensor(rng.uniform(0.2, 1.0, size=(1, 1, 8, 8)))
    m_off[0, 0, :3, :] = 0.0
    fd_o = feat((1, 2, 8, 8))
    off_cells = (m_off[0, 0] <= 0.1).nonzero().tolist()
    picks = rng.permutation(len(off_cells))[:20]
    off_grad = 0.0
    for idx in picks:
        i, j = off_cells[int(idx)]
        c = int(rng.integers(0, 2))
        plus = fd_o.clone()
        plus[0, c, i, j] += h
        minus = fd_o.clone()
        minus[0, c, i, j] -= h
        delta = float(alignment_loss(fs_g, plus, m_off).loss) - float(
            alignment_loss(fs_g, minus, m_off).loss
        )
        off_grad = max(off_grad, abs(delta / (2 * h)))

    elapsed = time.perf_counter() - t0
    ok = (
        self_loss <= 1e-6
        and anti_loss <= 1e-6
        and affine_err <= 1e-6
        and checked >= 5
        and rel_err <= 1e-3
        and off_grad < 1e-6
        and elapsed < 30.0
    )
    detail = (
        f"loss(F,F) {self_loss:.2e}, |loss(F,-F)-2| {anti_loss:.2e}, affine drift "
        f"{affine_err:.2e}, grad rel err {rel_err:.2e} over {checked} cells, "
        f"off-support FD max {off_grad:.2e} over 20 points, {elapsed:.2f}s"
    )
    assert criterion_log(3, ok, detail), detail


# -- criterion 4: quality gate ------------------------------------------------


def test_criterion_4_gate_examples(criterion_log, trained):
    th = GateThresholds(tau=2.0, delta=0.2)
    box = BoxXYXY(0, 0, 2, 2)

    m = torch.full((1, 1, 4, 4), 0.1)
    m[0, 0, :2, :2] = 0.5
    ex1 = quality_gate(m, box, th) == [True]

    m_low = torch.full((1, 1, 4, 4), 0.0)
    m_low[0, 0, :2, :2] = 0.15
    ex2 = quality_gate(m_low, box, th) == [False]

    ex3 = quality_gate(torch.zeros(1, 1, 4, 4), box, th) == [False]

    flat_fail = True
    for level in (0.05, 0.3, 0.9):
        for flat_box in (BoxXYXY(0, 0, 2, 2), BoxXYXY(1, 1, 3, 4), BoxXYXY(0, 2, 4, 4)):
            out = quality_gate(torch.full((1, 1, 4, 4), level), flat_box)
            flat_fail = flat_fail and out == [False]

    s = trained.shifted[0]
    zs = trained.model.segment(s.image, _box(s))
    res, tr = adapt_sample(
        trained.model, s.image, _box(s), AdaptationConfig(steps=5, tau=1e9)
    )
    bit_identical = (
        not tr.gate_passed
        and torch.equal(res.mask, zs.mask)
        and torch.equal(res.logits, zs.logits)
    )

    ok = ex1 and ex2 and ex3 and flat_fail and bit_identical
    detail = (
        f"worked examples {[ex1, ex2, ex3]}, flat maps fail under proper boxes: "
        f"{flat_fail}, gate-fail sample bit-identical to zero-shot: {bit_identical}"
    )
    assert criterion_log(4, ok, detail), detail


# -- criterion 5: adaptation invariants ---------------------------------------


def test_criterion_5_adaptation_invariants(criterion_log, trained):
    model = trained.model
    before = {k: v.detach().clone() for k, v in model.state_dict().items()}
    s = trained.shifted[1]

    res0 = adapt_sample(model, s.image, _box(s), AdaptationConfig(steps=0))[0]
    zs = model.segment(s.image, _box(s))
    zero_shot_equal = torch.equal(res0.logits, zs.logits) and torch.equal(
        res0.mask, zs.mask
    )

    frozen_ok = True
    try:
        cfg = AdaptationConfig(steps=3, lr=0.05, episodic=False)
        _, tr = adapt_sample(model, s.image, _box(s), cfg)
        selected = set(select_tunable_params(model, cfg.param_selector).names)
        for name, p in model.state_dict().items():
            if name not in selected and not torch.equal(p, before[name]):
                frozen_ok = False
    finally:
        model.load_state_dict(before)
        for p in model.parameters():
            p.requires_grad_(True)

    _, tr = adapt_sample(model, s.image, _box(s), AdaptationConfig(steps=5, lr=0.05))
    episodic_ok = all(
        torch.equal(v, before[k]) for k, v in model.state_dict().items()
    )

    ok = zero_shot_equal and frozen_ok and episodic_ok
    detail = (
        f"steps=0 bitwise zero-shot: {zero_shot_equal}, frozen params untouched: "
        f"{frozen_ok}, episodic reset exact: {episodic_ok}"
    )
    assert criterion_log(5, ok, detail), detail


# -- criteria 6-8: full-budget benchmark runs ---------------------------------


@pytest.fixture(scope="module")
def analogue(bench_builder):
    runs = []
    for seed in (0, 1, 2, 3):
        b = bench_builder(seed)
        test = b.bench.test
        stage_dice, stage_secs, stage_summaries = [], [], []
        for k in range(5):
            mk = _at_stages(b.model, k)
            t0 = time.perf_counter()
            summ = eval_summary(mk, test, label=f"seed{seed}-stages-{k}", seed=seed)
            stage_secs.append(time.perf_counter() - t0)
            stage_summaries.append(summ)
            stage_dice.append(summ.means["dice"])

        t0 = time.perf_counter()
        adapt = adapt_summary(
            _at_stages(b.model, 4), test, AdaptationConfig(), f"seed{seed}-adapt", seed=seed
        )
        adapt_secs = time.perf_counter() - t0
        align_only = adapt_summary(
            _at_stages(b.model, 0), test, AdaptationConfig(), f"seed{seed}-align", seed=seed
        )

        runs.append(
            SimpleNamespace(
                seed=seed,
                pretrain_secs=b.pretrain_seconds,
                stage_dice=stage_dice,
                stage_secs=stage_secs,
                stage_summaries=stage_summaries,
                eval_dice=stage_dice[4],
                adapt_dice=adapt.means["dice"],
                adapt_secs=adapt_secs,
                align_dice=align_only.means["dice"],
                gate_rate=adapt.gate_pass_rate,
            )
        )
    return runs


def test_criterion_6_adaptation_gain(criterion_log, analogue):
    wins = sum(1 for r in analogue if r.adapt_dice >= r.eval_dice + 0.02)
    protocol_secs = sum(
        r.pretrain_secs + r.stage_secs[4] + r.adapt_secs for r in analogue
    )
    in_budget = protocol_secs < 15 * 60
    ok = wins >= 3 and in_budget
    per_seed = ", ".join(
        f"seed {r.seed}: eval {r.eval_dice:.4f} adapt {r.adapt_dice:.4f} "
        f"(delta {r.adapt_dice - r.eval_dice:+.4f}, gate {r.gate_rate:.0%})"
        for r in analogue
    )
    detail = (
        f"adapt >= eval + 0.02 in {wins}/4 seeds (need >= 3); {per_seed}; "
        f"protocol {protocol_secs / 60:.1f} min (budget 15)"
    )
    assert criterion_log(6, ok, detail), detail


def test_criterion_7_stage_sweep(criterion_log, analogue, tmp_path):
    monotone_ends = all(r.stage_dice[4] >= r.stage_dice[0] for r in analogue)
    sweep_secs = sum(r.pretrain_secs + sum(r.stage_secs) for r in analogue)

    t0 = time.perf_counter()
    files = emit_plots(analogue[0].stage_summaries, tmp_path / "plots")
    payload = {f"seed_{r.seed}": r.stage_dice for r in analogue}
    sweep_json = tmp_path / "stage_sweep.json"
    sweep_json.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    sweep_secs += time.perf_counter() - t0

    artifacts = bool(files) and sweep_json.is_file()
    in_budget = sweep_secs < 20 * 60
    ok = monotone_ends and artifacts and in_budget
    per_seed = "; ".join(
        f"seed {r.seed}: " + " ".join(f"{d:.4f}" for d in r.stage_dice)
        for r in analogue
    )
    detail = (
        f"stages-4 >= stages-0 in 4/4 seeds: {monotone_ends} ({per_seed}); "
        f"plot+json emitted: {artifacts}; sweep {sweep_secs / 60:.1f} min (budget 20)"
    )
    assert criterion_log(7, ok, detail), detail


def test_criterion_8_component_ablation(criterion_log, analogue):
    margin = 0.01
    worst = min(
        min(r.adapt_dice - r.eval_dice, r.adapt_dice - r.align_dice) for r in analogue
    )
    ok = all(
        r.adapt_dice >= r.eval_dice - margin and r.adapt_dice >= r.align_dice - margin
        for r in analogue
    )
    per_seed = ", ".join(
        f"seed {r.seed}: both {r.adapt_dice:.4f} vs injection {r.eval_dice:.4f} / "
        f"alignment {r.align_dice:.4f}"
        for r in analogue
    )
    detail = (
        f"both >= each single cell - {margin} in all seeds: {ok} "
        f"(worst margin {worst:+.4f}); {per_seed}"
    )
    assert criterion_log(8, ok, detail), detail


# -- criterion 9: metrics -----------------------------------------------------


def test_criterion_9_metrics(criterion_log):
    a = np.zeros((8, 8), dtype=bool)
    a[:4] = True
    b = np.zeros((8, 8), dtype=bool)
    b[2:6] = True
    examples = (
        dice(a, a) == 1.0
        and dice(a, ~a) == 0.0
        and dice(a, b) == 0.5
        and miou(a, a) == 1.0
        and miou(a, ~a) == 0.0
    )

    rng = np.random.default_rng(9)
    dominates = True
    for _ in range(1000):
        p = rng.random((6, 6)) > rng.uniform(0.2, 0.8)
        g = rng.random((6, 6)) > rng.uniform(0.2, 0.8)
        if dice(p, g) < iou_fg(p, g) - 1e-15:
            dominates = False
            break

    records = [
        {
            "sample_id": f"s{i:03d}",
            "dice": float(rng.random()),
            "miou": float(rng.random()),
            "gate_passed": bool(rng.random() > 0.3),
            "steps_taken": int(rng.integers(0, 6)),
            "per_step_loss": [],
            "wall_time_ms": float(rng.uniform(1, 50)),
            "mode": "eval",
        }
        for i in range(50)
    ]
    summ = aggregate(records, label="check")
    agg_err = 0.0
    for key in ("dice", "miou", "wall_time_ms"):
        vals = [r[key] for r in records]
        agg_err = max(agg_err, abs(summ.means[key] - sum(vals) / len(vals)))
        agg_err = max(agg_err, abs(summ.medians[key] - float(np.median(vals))))

    ok = examples and dominates and agg_err <= 1e-12
    detail = (
        f"worked examples: {examples}, dice >= foreground IoU on 1000 pairs: "
        f"{dominates}, aggregate recomputation err {agg_err:.2e}"
    )
    assert criterion_log(9, ok, detail), detail


# -- criterion 10: CLI determinism --------------------------------------------


def _scrub(d: dict) -> dict:
    d = json.loads(json.dumps(d))
    d.pop("total_wall_time_ms", None)
    for key in ("means", "medians"):
        if isinstance(d.get(key), dict):
            d[key].pop("wall_time_ms", None)
    for rec in d.get("records", []):
        rec.pop("wall_time_ms", None)
    return d


def _normalized_tree(root: Path) -> dict:
    out = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file() or p.name == "timing.png":
            continue
        rel = str(p.relative_to(root))
        if p.name == "summary.json" or p.name.startswith("summary-"):
            out[rel] = _scrub(json.loads(p.read_text()))
        else:
            out[rel] = p.read_bytes()
    return out


def test_criterion_10_cli_determinism(criterion_log, cli_ws, tmp_path):
    data, ckpt = str(cli_ws.data), str(cli_ws.ckpt)
    commands = {
        "gen-data": ["gen-data", "--n-train", "3", "--n-val", "1", "--n-test", "2", "--seed", "17"],
        "pretrain": ["pretrain", "--data", data, "--epochs", "1", "--seed", "5"],
        "eval": ["eval", "--data", data, "--checkpoint", ckpt, "--seed", "0"],
        "adapt": ["adapt", "--data", data, "--checkpoint", ckpt, "--seed", "0", "--steps", "2"],
        "ablate": ["ablate", "--data", data, "--checkpoint", ckpt, "--seed", "0", "--sweep", "components"],
        "inspect": ["inspect", "--data", data, "--checkpoint", ckpt, "--indices", "0"],
    }
    mismatched = []
    report_inputs = None
    for name, argv in commands.items():
        trees = []
        for attempt in ("a", "b"):
            out = tmp_path / f"{name}-{attempt}"
            rc = cli_main(argv + ["--out", str(out)])
            assert rc == 0, f"{name} run {attempt} exited {rc}"
            trees.append(_normalized_tree(out))
        if trees[0] != trees[1]:
            mismatched.append(name)
        if name == "eval":
            report_inputs = [str(tmp_path / "eval-a" / "summary.json")]

    trees = []
    for attempt in ("a", "b"):
        out = tmp_path / f"report-{attempt}"
        rc = cli_main(["report", "--out", str(out), *report_inputs])
        assert rc == 0
        trees.append(_normalized_tree(out))
    if trees[0] != trees[1]:
        mismatched.append("report")

    ok = not mismatched
    detail = (
        "all 7 subcommands byte-identical across reruns (timing fields excluded)"
        if ok
        else f"non-deterministic artifacts from: {', '.join(mismatched)}"
    )
    assert criterion_log(10, ok, detail), detail
