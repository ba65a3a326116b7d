"""Command-line interface.

Three subcommands: train fits a model under one of the training regimes,
eval scores a checkpoint on datasets with manual or generated prompts, and
report renders every run record under a directory into CSV tables and
figures. Model and optimizer settings come from a flat `key = value` config
file; anything not set there uses the desk-scale defaults, which train in
minutes on a CPU.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import torch

from .checkpoint import load_checkpoint
from .config import AblationFlags, ConfigError, ModelConfig, validate_config
from .data import DATASET_IDS, FILE_SPLIT_DATASETS, build_splits, load_pair, read_manifest
from .harness import RunConfig, Sample, evaluate, load_init_weights, train
from .model import Samus, build_model
from .registry import FREEZE_PLANS
from .reporting import eval_results_dict, render_report, write_eval_csv
from .synth import synth_dataset

_ABLATE_NAMES = {
    "cnn": "cnn_branch",
    "cba": "cba",
    "fadapt": "feature_adapters",
    "padapt": "position_adapter",
}

_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_RUN_KEYS = {f.name for f in fields(RunConfig)} - {"regime", "prompt_mode", "seed"}


def _parse_value(raw: str):
    raw = raw.strip()
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    if raw.lower() in ("none", ""):
        return None
    if "," in raw:
        return tuple(int(part) for part in raw.split(",") if part.strip())
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            continue
    return raw


def parse_config_file(path: str | Path) -> tuple[dict, dict]:
    """Flat `key = value` file -> (model overrides, run overrides)."""
    model_kw: dict = {}
    run_kw: dict = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected `key = value`, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        value = _parse_value(raw)
        if key in _MODEL_KEYS:
            model_kw[key] = value
        elif key in _RUN_KEYS:
            run_kw[key] = value
        elif key in ("regime", "seed", "prompt_mode"):
            raise ConfigError(
                f"{path}:{lineno}: {key} is set on the command line, not in the config file"
            )
        else:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
    return model_kw, run_kw


def _parse_ablate(raw: str | None) -> AblationFlags:
    flags = AblationFlags()
    if not raw:
        return flags
    kw = {}
    for name in raw.split(","):
        name = name.strip()
        if name not in _ABLATE_NAMES:
            raise ConfigError(
                f"unknown ablation {name!r}, expected any of {sorted(_ABLATE_NAMES)}"
            )
        kw[_ABLATE_NAMES[name]] = False
    return AblationFlags(**{**{f.name: getattr(flags, f.name) for f in fields(AblationFlags)}, **kw})


def _synthetic_samples(n: int, size: int, seed: int, num_tasks: int) -> list[Sample]:
    pairs = synth_dataset(n, size, seed)
    return [
        Sample(image=img, mask=mask, task_id=i % num_tasks)
        for i, (img, mask) in enumerate(pairs)
    ]


def _manifest_samples(
    data_dir: Path, dataset: str, side: str, seed: int, input_size: int, task_id: int
) -> list[Sample]:
    records = read_manifest(data_dir / f"{dataset}.csv")
    split_dir = data_dir if dataset in FILE_SPLIT_DATASETS else None
    plan = build_splits(dataset, records, seed=seed, split_dir=split_dir)
    out = []
    for rec in plan.sides()[side]:
        image, mask = load_pair(rec, input_size)
        out.append(Sample(image=image, mask=mask, task_id=task_id))
    return out


def _cmd_train(args: argparse.Namespace) -> int:
    model_kw, run_kw = parse_config_file(args.config) if args.config else ({}, {})
    model_cfg = validate_config(ModelConfig.desk(**model_kw))
    prompt_mode = "auto" if args.regime.startswith("autosamus") else "manual"
    run_cfg = RunConfig(
        regime=args.regime, prompt_mode=prompt_mode, seed=args.seed, **run_kw
    ).validate()
    ablation = _parse_ablate(args.ablate).validate()

    # seed before construction so the drawn frozen weights follow --seed
    torch.manual_seed(args.seed)
    model, registry = build_model(model_cfg, args.regime, ablation)
    init_report = None
    if args.init_from:
        init_report = load_init_weights(model, args.init_from)
        print(
            f"[train] warm start from {args.init_from}: "
            f"{init_report['loaded']} tensors loaded, "
            f"{len(init_report['missing'])} missing, "
            f"{len(init_report['unexpected'])} unexpected"
        )

    if args.synthetic:
        samples = _synthetic_samples(
            args.synth_n, model_cfg.input_size, args.seed, model_cfg.num_tasks
        )
        source = f"synthetic x{len(samples)}"
    else:
        if not args.data_dir or not args.datasets:
            raise ConfigError("either --synthetic or both --data-dir and --datasets")
        samples = []
        for t, ds in enumerate(args.datasets.split(",")):
            samples.extend(
                _manifest_samples(
                    Path(args.data_dir), ds.strip(), "train", args.seed,
                    model_cfg.input_size, task_id=t % model_cfg.num_tasks,
                )
            )
        source = f"{args.datasets} train x{len(samples)}"

    out_dir = Path(args.out) if args.out else Path("runs") / f"{args.regime}_s{args.seed}"
    n_train = sum(p.numel() for p in registry.trainable_parameters())
    print(
        f"[train] regime={args.regime} seed={args.seed} data={source} "
        f"trainable={n_train} out={out_dir}"
    )
    record = train(model, registry, samples, run_cfg, out_dir=out_dir)
    if init_report is not None:
        record.init_report = init_report
        from .harness import save_run_record

        save_run_record(record, out_dir / "run.json")
    print(
        f"[train] finished: steps={record.steps} loss={record.final_loss:.4f} "
        f"train_dice={record.train_dice:.2f} ({record.wall_seconds:.1f}s)"
    )
    return 0


def _model_from_checkpoint(path: str | Path) -> Samus:
    ck = load_checkpoint(path)
    cfg = ModelConfig.from_dict(ck.config)
    names = set(ck.params)
    ablation = AblationFlags(
        cnn_branch=any(n.startswith("cnn.") for n in names),
        cba=any(".cba." in n for n in names),
        feature_adapters=any(n.startswith("vit.first_adapter.") for n in names),
        position_adapter=any(n.startswith("vit.position_adapter.") for n in names),
    ).validate()
    with_apg = any(n.startswith("apg.") for n in names)
    model = Samus(cfg, ablation=ablation, with_apg=with_apg)
    from .checkpoint import load_state_into

    load_state_into(ck, model, strict=True)
    return model


def _cmd_eval(args: argparse.Namespace) -> int:
    model = _model_from_checkpoint(args.checkpoint)
    if args.prompt == "auto" and model.apg is None:
        print("[eval] checkpoint has no prompt generator; use --prompt manual", file=sys.stderr)
        return 2
    size = model.cfg.input_size
    datasets: dict[str, list[Sample]] = {}
    if args.synthetic:
        datasets["synthetic"] = _synthetic_samples(args.synth_n, size, args.seed, 1)
    else:
        if not args.data_dir or not args.datasets:
            raise ConfigError("either --synthetic or both --data-dir and --datasets")
        for t, ds in enumerate(args.datasets.split(",")):
            ds = ds.strip()
            datasets[ds] = _manifest_samples(
                Path(args.data_dir), ds, args.split, args.seed, size,
                task_id=t % model.cfg.num_tasks,
            )
    reports = evaluate(model, datasets, prompt_mode=args.prompt, use_hd95=args.hd95)
    out = Path(args.out) if args.out else Path("eval.csv")
    write_eval_csv(reports, out)
    for name, rep in reports.items():
        extra = ""
        if rep.skipped_hausdorff:
            extra += f" ({rep.skipped_hausdorff} pairs without a defined hd)"
        if rep.skipped_prompts:
            extra += f" ({rep.skipped_prompts} unpromptable skipped)"
        print(
            f"[eval] {name}: dice={rep.mean_dice:.2f} hd={rep.mean_hausdorff:.2f} "
            f"n={rep.count}{extra}"
        )
    print(f"[eval] wrote {out}")
    run_path = Path(args.checkpoint).parent / "run.json"
    if run_path.exists():
        record = json.loads(run_path.read_text())
        record["eval_results"] = eval_results_dict(reports)
        tmp = run_path.with_name(run_path.name + ".tmp")
        tmp.write_text(json.dumps(record, indent=2, sort_keys=True))
        os.replace(tmp, run_path)
        print(f"[eval] attached results to {run_path}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    written = render_report(args.runs, args.out)
    for path in written:
        print(f"[report] wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="samus", description="adapter-based promptable ultrasound segmentation"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="fit a model under a training regime")
    p_train.add_argument("--config", help="flat key = value settings file")
    p_train.add_argument("--regime", required=True, choices=sorted(FREEZE_PLANS))
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument(
        "--ablate", help="comma list from cnn,cba,fadapt,padapt to switch off"
    )
    p_train.add_argument("--synthetic", action="store_true", help="train on generated data")
    p_train.add_argument("--synth-n", type=int, default=32, help="synthetic sample count")
    p_train.add_argument("--data-dir", help="directory with <dataset>.csv manifests")
    p_train.add_argument("--datasets", help="comma list of dataset ids")
    p_train.add_argument("--init-from", help="checkpoint to warm start from")
    p_train.add_argument("--out", help="output directory (default runs/<regime>_s<seed>)")

    p_eval = sub.add_parser("eval", help="score a checkpoint on datasets")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--datasets", help=f"comma list from {','.join(DATASET_IDS)}")
    p_eval.add_argument("--prompt", choices=("manual", "auto"), default="manual")
    p_eval.add_argument("--split", choices=("train", "val", "test"), default="test")
    p_eval.add_argument("--data-dir", help="directory with <dataset>.csv manifests")
    p_eval.add_argument("--synthetic", action="store_true", help="score generated data")
    p_eval.add_argument("--synth-n", type=int, default=16)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--hd95", action="store_true", help="95th-percentile hausdorff")
    p_eval.add_argument("--out", help="output CSV path (default eval.csv)")

    p_report = sub.add_parser("report", help="render run records to tables and figures")
    p_report.add_argument("--runs", required=True, help="directory containing run outputs")
    p_report.add_argument("--out", help="report output directory (default <runs>/report)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args)
        return _cmd_report(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
