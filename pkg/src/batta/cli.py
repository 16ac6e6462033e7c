"""Command-line entry point.

Subcommands: gen-data, pretrain, eval, adapt, ablate, inspect, report.
Configuration comes from an optional JSON file plus flag overrides (flags
win). Every field is validated before any filesystem work starts. Outputs go
under a run directory: --out if given, otherwise {root}/{label}-{timestamp}
where the root is $BATTA_OUT_ROOT or ./runs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .adapt import AdaptationConfig, run_stream, sample_record
from .boundary import boundary_map
from .data import ShiftSpec, build_benchmark, load_folder, minimal_box, write_dataset
from .encoder import INJECTION_STRATEGIES, EncoderConfig, select_features
from .heatmap import heatmap_to_u8, prompt_heatmap
from .metrics import RunSummary, aggregate, emit_plots, gradcam_map
from .model import SegModel, pretrain
from .prompts import PromptSet

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

OUT_ROOT_ENV = "BATTA_OUT_ROOT"


def _default_encoder() -> EncoderConfig:
    return EncoderConfig(injection_strategy="gaussian_pre_block", injection_stages=4)


@dataclass
class RunConfig:
    label: str = "run"
    seed: int = 0
    out: str | None = None
    data_root: str | None = None
    checkpoint: str | None = None
    epochs: int = 30
    batch_size: int = 8
    train_lr: float = 1e-4
    n_train: int = 200
    n_val: int = 50
    n_test: int = 100
    encoder: EncoderConfig = field(default_factory=_default_encoder)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    shift: ShiftSpec = field(default_factory=ShiftSpec)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.train_lr <= 0:
            raise ValueError("train_lr must be > 0")
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        nested = {}
        for key, builder in (
            ("encoder", EncoderConfig.from_dict),
            ("adaptation", AdaptationConfig.from_dict),
            ("shift", ShiftSpec.from_dict),
        ):
            if key in d:
                sub = d.pop(key)
                if not isinstance(sub, dict):
                    raise ValueError(f"config key {key!r} must be an object")
                try:
                    nested[key] = builder(sub)
                except TypeError as e:
                    raise ValueError(f"bad {key} config: {e}") from None
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**d, **nested)

    def with_seed(self, seed: int) -> "RunConfig":
        """Propagate one top-level seed into every seeded sub-config."""
        return replace(
            self,
            seed=seed,
            encoder=replace(self.encoder, seed=seed),
            adaptation=replace(self.adaptation, seed=seed),
            shift=replace(self.shift, seed=seed + 30_000),
        )

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "seed": self.seed,
            "out": self.out,
            "data_root": self.data_root,
            "checkpoint": self.checkpoint,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "train_lr": self.train_lr,
            "n_train": self.n_train,
            "n_val": self.n_val,
            "n_test": self.n_test,
            "encoder": self.encoder.to_dict(),
            "adaptation": self.adaptation.to_dict(),
            "shift": self.shift.to_dict(),
        }


def load_run_config(args: argparse.Namespace) -> RunConfig:
    if getattr(args, "config", None):
        with open(args.config) as f:
            cfg = RunConfig.from_dict(json.load(f))
    else:
        cfg = RunConfig()

    simple = {
        "label": "label",
        "out": "out",
        "data": "data_root",
        "checkpoint": "checkpoint",
        "epochs": "epochs",
        "batch_size": "batch_size",
        "lr": "train_lr",
        "n_train": "n_train",
        "n_val": "n_val",
        "n_test": "n_test",
    }
    updates = {}
    for flag, fieldname in simple.items():
        v = getattr(args, flag, None)
        if v is not None:
            updates[fieldname] = v
    if updates:
        cfg = replace(cfg, **updates)

    enc = {}
    if getattr(args, "size", None) is not None:
        enc["image_size"] = args.size
    if getattr(args, "strategy", None) is not None:
        enc["injection_strategy"] = args.strategy
    if getattr(args, "stages", None) is not None:
        enc["injection_stages"] = args.stages
    if getattr(args, "gain", None) is not None:
        enc["injection_gain"] = args.gain
    if enc:
        cfg = replace(cfg, encoder=replace(cfg.encoder, **enc))

    ad = {}
    if getattr(args, "steps", None) is not None:
        ad["steps"] = args.steps
    if getattr(args, "tta_lr", None) is not None:
        ad["lr"] = args.tta_lr
    if getattr(args, "selector", None) is not None:
        ad["param_selector"] = args.selector
    if getattr(args, "continual", False):
        ad["episodic"] = False
    if ad:
        cfg = replace(cfg, adaptation=replace(cfg.adaptation, **ad))

    sh = {}
    if getattr(args, "shift_kind", None) is not None:
        sh["kind"] = args.shift_kind
    if getattr(args, "shift_severity", None) is not None:
        sh["severity"] = args.shift_severity
    if sh:
        cfg = replace(cfg, shift=replace(cfg.shift, **sh))

    seed = args.seed if getattr(args, "seed", None) is not None else cfg.seed
    return cfg.with_seed(seed)


def resolve_run_dir(cfg: RunConfig) -> Path:
    if cfg.out:
        run_dir = Path(cfg.out)
    else:
        root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = root / f"{cfg.label}-{stamp}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


# -- shared helpers -----------------------------------------------------------


def _load_split(cfg: RunConfig, split: str):
    if not cfg.data_root:
        raise ValueError("no dataset given; pass --data or set data_root in the config")
    root = Path(cfg.data_root) / split
    samples = load_folder(root / "images", root / "masks", size=cfg.encoder.image_size)
    if not samples:
        raise ValueError(f"dataset split {split!r} under {cfg.data_root} is empty")
    return samples


def _load_model(cfg: RunConfig, **encoder_overrides) -> SegModel:
    if not cfg.checkpoint:
        raise ValueError("no checkpoint given; pass --checkpoint or set it in the config")
    model, _ = SegModel.load(cfg.checkpoint)
    if encoder_overrides:
        new_cfg = replace(model.cfg, **encoder_overrides)
        fresh = SegModel(new_cfg)
        fresh.load_state_dict(model.state_dict())
        fresh.eval()
        return fresh
    return model


def _box_prompt(sample) -> PromptSet:
    return PromptSet(boxes=[minimal_box(sample.mask.numpy())])


def eval_summary(model: SegModel, samples, label: str, config: dict | None = None, seed: int | None = None) -> RunSummary:
    records = []
    for s in samples:
        res = model.segment(s.image, _box_prompt(s))
        records.append(sample_record(s, res, None, mode="eval"))
    return aggregate(records, label=label, config=config, seed=seed)


def adapt_summary(
    model: SegModel, samples, acfg: AdaptationConfig, label: str, config: dict | None = None, seed: int | None = None
) -> RunSummary:
    pairs = run_stream(model, samples, acfg)
    mode = "adapt" if acfg.episodic else "continual"
    records = [sample_record(s, r, t, mode=mode) for s, (r, t) in zip(samples, pairs)]
    return aggregate(records, label=label, config=config, seed=seed)


# -- subcommands --------------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig) -> int:
    bench = build_benchmark(
        seed=cfg.seed,
        n_train=cfg.n_train,
        n_val=cfg.n_val,
        n_test=cfg.n_test,
        size=cfg.encoder.image_size,
        shift=cfg.shift,
    )
    run_dir = resolve_run_dir(cfg)
    for split, samples in (("train", bench.train), ("val", bench.val), ("test", bench.test)):
        extra = {"seed": cfg.seed, "split": split}
        if split == "test":
            extra["shift"] = bench.shift.to_dict()
        write_dataset(samples, run_dir / split, extra_meta=extra)
    print(f"wrote {len(bench.train)}/{len(bench.val)}/{len(bench.test)} samples under {run_dir}")
    return EXIT_OK


def cmd_pretrain(args, cfg: RunConfig) -> int:
    if not cfg.data_root:
        raise ValueError("no dataset given; pass --data or set data_root in the config")
    train = _load_split(cfg, "train")
    val = _load_split(cfg, "val")
    run_dir = resolve_run_dir(cfg)
    result = pretrain(
        train,
        val,
        cfg.encoder,
        epochs=cfg.epochs,
        lr=cfg.train_lr,
        seed=cfg.seed,
        batch_size=cfg.batch_size,
    )
    ckpt = run_dir / "checkpoint.bin"
    result.model.save(ckpt, meta=result.meta)
    with open(run_dir / "pretrain.json", "w") as f:
        json.dump(result.meta, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"checkpoint: {ckpt} (best val dice {result.meta['best_val_dice']})")
    return EXIT_OK


def _encoder_overrides(args) -> dict:
    """Encoder fields the user explicitly set on the command line.

    Only these override the checkpoint's stored encoder config; everything
    else keeps the trained values.
    """
    ov = {}
    if getattr(args, "strategy", None) is not None:
        ov["injection_strategy"] = args.strategy
    if getattr(args, "stages", None) is not None:
        ov["injection_stages"] = args.stages
    if getattr(args, "gain", None) is not None:
        ov["injection_gain"] = args.gain
    return ov


def cmd_eval(args, cfg: RunConfig) -> int:
    samples = _load_split(cfg, args.split)
    model = _load_model(cfg, **_encoder_overrides(args))
    run_dir = resolve_run_dir(cfg)
    snapshot = {"encoder": model.cfg.to_dict(), "checkpoint": cfg.checkpoint, "split": args.split}
    summary = eval_summary(model, samples, label=f"{cfg.label}-eval", config=snapshot, seed=cfg.seed)
    summary.save(run_dir / "summary.json")
    emit_plots([summary], run_dir / "plots")
    print(f"eval dice {summary.means['dice']:.4f} miou {summary.means['miou']:.4f} -> {run_dir}")
    return EXIT_OK


def cmd_adapt(args, cfg: RunConfig) -> int:
    samples = _load_split(cfg, args.split)
    model = _load_model(cfg, **_encoder_overrides(args))
    run_dir = resolve_run_dir(cfg)
    snapshot = {
        "encoder": model.cfg.to_dict(),
        "adaptation": cfg.adaptation.to_dict(),
        "checkpoint": cfg.checkpoint,
        "split": args.split,
    }
    summary = adapt_summary(
        model, samples, cfg.adaptation, label=f"{cfg.label}-adapt", config=snapshot, seed=cfg.seed
    )
    summary.save(run_dir / "summary.json")
    emit_plots([summary], run_dir / "plots")
    print(f"adapt dice {summary.means['dice']:.4f} miou {summary.means['miou']:.4f} -> {run_dir}")
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    samples = _load_split(cfg, args.split)
    run_dir = resolve_run_dir(cfg)
    sweeps = ("stages", "strategies", "components") if args.sweep == "all" else (args.sweep,)
    summaries: list[RunSummary] = []

    if "stages" in sweeps:
        outdir = run_dir / "stages"
        outdir.mkdir(parents=True, exist_ok=True)
        for k in range(5):
            model = _load_model(cfg, injection_stages=k)
            s = eval_summary(
                model,
                samples,
                label=f"stages-{k}",
                config={"encoder": model.cfg.to_dict(), "split": args.split},
                seed=cfg.seed,
            )
            s.save(outdir / f"summary-stages-{k}.json")
            summaries.append(s)

    if "strategies" in sweeps:
        outdir = run_dir / "strategies"
        outdir.mkdir(parents=True, exist_ok=True)
        for strat in INJECTION_STRATEGIES:
            stages = 0 if strat == "none" else 4
            model = _load_model(cfg, injection_strategy=strat, injection_stages=stages)
            s = eval_summary(
                model,
                samples,
                label=f"strategy-{strat}",
                config={"encoder": model.cfg.to_dict(), "split": args.split},
                seed=cfg.seed,
            )
            s.save(outdir / f"summary-strategy-{strat}.json")
            summaries.append(s)

    if "components" in sweeps:
        outdir = run_dir / "components"
        outdir.mkdir(parents=True, exist_ok=True)
        cells = (
            ("neither", 0, False),
            ("injection-only", 4, False),
            ("alignment-only", 0, True),
            ("both", 4, True),
        )
        for name, stages, adapt_on in cells:
            model = _load_model(cfg, injection_stages=stages)
            snap = {
                "encoder": model.cfg.to_dict(),
                "split": args.split,
                "adaptation": cfg.adaptation.to_dict() if adapt_on else None,
            }
            if adapt_on:
                s = adapt_summary(model, samples, cfg.adaptation, label=name, config=snap, seed=cfg.seed)
            else:
                s = eval_summary(model, samples, label=name, config=snap, seed=cfg.seed)
            s.save(outdir / f"summary-{name}.json")
            summaries.append(s)

    emit_plots(summaries, run_dir / "plots")
    combined = {s.label: {"dice": s.means["dice"], "miou": s.means["miou"]} for s in summaries}
    with open(run_dir / "ablation.json", "w") as f:
        json.dump(combined, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"{len(summaries)} ablation cells -> {run_dir}")
    return EXIT_OK


def cmd_inspect(args, cfg: RunConfig) -> int:
    samples = _load_split(cfg, args.split)
    model = _load_model(cfg)
    run_dir = resolve_run_dir(cfg)
    outdir = run_dir / "inspect"
    outdir.mkdir(parents=True, exist_ok=True)
    indices = [int(t) for t in args.indices.split(",") if t != ""]
    for i in indices:
        if not 0 <= i < len(samples):
            raise ValueError(f"sample index {i} out of range [0, {len(samples)})")
    created = []
    g = model.cfg.grid_size
    size = model.cfg.image_size
    for i in indices:
        s = samples[i]
        prompts = _box_prompt(s)
        hm = prompt_heatmap(prompts, image_size=(size, size), grid_size=(g, g))
        Image.fromarray(heatmap_to_u8(hm), mode="L").save(outdir / f"{s.sample_id}_heatmap.png")
        with torch.no_grad():
            trace = model.encode_image(s.image[None], prompts)
            fs, _ = select_features(trace, cfg.adaptation.l_s, cfg.adaptation.l_d)
            bmap = boundary_map(fs)[0, 0].numpy()
        Image.fromarray(heatmap_to_u8(bmap), mode="L").save(outdir / f"{s.sample_id}_boundary.png")
        cam = gradcam_map(model, s.image, prompts, target_layer=args.layer).numpy()
        Image.fromarray(heatmap_to_u8(cam), mode="L").save(outdir / f"{s.sample_id}_gradcam.png")
        res = model.segment(s.image, prompts)
        mask_u8 = res.mask[0, 0].numpy().astype(np.uint8) * 255
        Image.fromarray(mask_u8, mode="L").save(outdir / f"{s.sample_id}_mask.png")
        created += [f"{s.sample_id}_{kind}.png" for kind in ("heatmap", "boundary", "gradcam", "mask")]
    print(f"wrote {len(created)} files under {outdir}")
    return EXIT_OK


def cmd_report(args, cfg: RunConfig) -> int:
    summaries = [RunSummary.load(p) for p in args.summaries]
    run_dir = resolve_run_dir(cfg)
    files = emit_plots(summaries, run_dir / "plots")
    table = {
        s.label: {
            "dice": s.means.get("dice"),
            "miou": s.means.get("miou"),
            "count": s.count,
            "gate_pass_rate": s.gate_pass_rate,
            "steps_mean": s.steps_mean,
        }
        for s in summaries
    }
    with open(run_dir / "report.json", "w") as f:
        json.dump(table, f, indent=2, sort_keys=True)
        f.write("\n")
    for label, row in sorted(table.items()):
        print(f"{label}: dice {row['dice']:.4f} miou {row['miou']:.4f} (n={row['count']})")
    print(f"report -> {run_dir} ({len(files)} plots)")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="top-level seed, propagated everywhere")
    p.add_argument("--out", help="run directory (default: {root}/{label}-{timestamp})")
    p.add_argument("--label", help="run label")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="batta",
        description="Prompt-injected segmentation with boundary-aligned test-time adaptation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark folders")
    _add_common(p)
    p.add_argument("--n-train", type=int, dest="n_train")
    p.add_argument("--n-val", type=int, dest="n_val")
    p.add_argument("--n-test", type=int, dest="n_test")
    p.add_argument("--size", type=int, help="image side length")
    p.add_argument("--shift-kind", dest="shift_kind", choices=("contrast", "blur", "noise", "invert", "combo"))
    p.add_argument("--shift-severity", dest="shift_severity", type=float)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train the toy checkpoint on the clean split")
    _add_common(p)
    p.add_argument("--data", help="dataset root from gen-data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.set_defaults(func=cmd_pretrain)

    for name, fn, helptext in (
        ("eval", cmd_eval, "zero-shot evaluation over a dataset split"),
        ("adapt", cmd_adapt, "test-time adaptation over a dataset split"),
    ):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        p.add_argument("--data")
        p.add_argument("--checkpoint")
        p.add_argument("--split", default="test", choices=("train", "val", "test"))
        p.add_argument("--strategy", choices=INJECTION_STRATEGIES)
        p.add_argument("--stages", type=int)
        p.add_argument("--gain", type=float)
        if name == "adapt":
            p.add_argument("--steps", type=int)
            p.add_argument("--tta-lr", dest="tta_lr", type=float)
            p.add_argument("--selector", choices=("last_block_norms", "last_block_attn_proj", "last_block_all"))
            p.add_argument("--continual", action="store_true")
        p.set_defaults(func=fn)

    p = sub.add_parser("ablate", help="stage/strategy/component sweeps")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--sweep", default="all", choices=("stages", "strategies", "components", "all"))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="write heatmap/boundary/attribution/mask images")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--indices", default="0", help="comma-separated sample indices")
    p.add_argument("--layer", type=int, default=11, help="encoder block for the attribution map")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("report", help="combine summary JSONs into plots and a table")
    _add_common(p)
    p.add_argument("summaries", nargs="+", help="summary.json paths")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        cfg = load_run_config(args)
        return args.func(args, cfg)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception:
        traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
