"""Command line entry point: ``atmseg <verb> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import metrics
from .atpg import PromptOption, generate_bundle, load_templates
from .dataio import (
    PhantomSpec,
    load_dataset,
    load_label_maps,
    read_dataset_config,
    save_volume,
    synth_phantom,
)
from .taxonomy import builtin_taxonomy, load_taxonomy


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        try:
            out[key.strip()] = json.loads(value)
        except json.JSONDecodeError:
            out[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    if getattr(args, "deterministic", None) is not None:
        out["deterministic"] = args.deterministic
    if getattr(args, "data_root", None):
        out["data.root"] = args.data_root
    return out


def _run_config(args):
    from .harness.config import load_config

    return load_config(args.config, _overrides(args))


def _write_report(report: metrics.MetricsReport, out: str | None, taxonomy, name: str = "run") -> None:
    if out is None:
        print(report.to_json())
        return
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".csv":
        path.write_text(metrics.reports_to_csv([(name, report)], taxonomy))
    else:
        path.write_text(report.to_json())
    print(f"wrote {path}")


def cmd_train(args) -> int:
    from .harness.train import train

    cfg = _run_config(args)
    out = Path(args.out or f"runs/{cfg.config_hash()}")
    every = max(1, cfg.optimizer.steps // 10)

    def progress(step, row):
        if step % every == 0 or step == cfg.optimizer.steps - 1:
            logging.info("step %d lr %.3g loss %.4f", step, row["lr"], row["total"])

    record = train(cfg, out, on_step=progress)
    summary = {"config_hash": record.config_hash, "out": str(out), "wall_clock": round(record.wall_clock, 2)}
    summary.update({f"{k}_dsc": r.aggregate["dsc"] for k, r in record.reports.items()})
    print(json.dumps(summary))
    return 0


def cmd_evaluate(args) -> int:
    if args.checkpoint:
        from .harness.train import evaluate_run, load_model

        report = evaluate_run(args.checkpoint, args.split, args.dataset, per_volume=args.per_volume)
        taxonomy = load_model(args.checkpoint)[2]
        _write_report(report, args.out, taxonomy, Path(args.checkpoint).stem)
        return 0
    if not (args.pred and args.gt):
        raise SystemExit("evaluate needs --pred and --gt, or --checkpoint")
    taxonomy = load_taxonomy(args.taxonomy)
    preds, gts = load_label_maps(args.pred), load_label_maps(args.gt)
    missing = sorted(set(gts) ^ set(preds))
    if missing:
        raise SystemExit(f"volumes not present in both --pred and --gt: {', '.join(missing)}")
    p_all, g_all, vids = [], [], []
    for vid in sorted(gts):
        if len(preds[vid]) != len(gts[vid]):
            raise SystemExit(f"{vid}: {len(preds[vid])} predicted slices vs {len(gts[vid])} reference slices")
        p_all += preds[vid]
        g_all += gts[vid]
        vids += [vid] * len(gts[vid])
    report = metrics.evaluate(
        p_all, g_all, taxonomy, volume_ids=vids, per_volume=args.per_volume, hd95_mode=args.hd95_mode
    )
    _write_report(report, args.out, taxonomy, Path(args.pred).name)
    return 0


def cmd_ablate(args) -> int:
    from .harness.train import ablate

    cfg = _run_config(args)
    out = Path(args.out or "runs/ablation")
    ablate(cfg, out)
    print((out / "ablation.csv").read_text(), end="")
    return 0


def cmd_generate_prompts(args) -> int:
    ds_cfg = read_dataset_config(args.dataset)
    taxonomy = load_taxonomy(args.taxonomy or ds_cfg.taxonomy)
    templates = load_templates(args.paper_verbatim, args.templates)
    option = PromptOption.parse(args.option)
    volumes = load_dataset(args.dataset, taxonomy, ds_cfg)
    lines = []
    for vid in sorted(volumes):
        for s in volumes[vid]:
            bundle = generate_bundle(s, taxonomy, option, templates)
            lines.append(json.dumps(bundle.to_record(vid, s.slice_index)))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {len(lines)} records to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_synth(args) -> int:
    raw = json.loads(Path(args.spec).read_text()) if args.spec else {}
    taxonomy = load_taxonomy(raw.get("taxonomy", args.taxonomy))
    n_volumes = int(raw.get("n_volumes", args.volumes))
    base = PhantomSpec.from_dict(raw)
    base.validate()
    out = Path(args.out)
    for v in range(n_volumes):
        spec = PhantomSpec(**{**base.__dict__, "seed": base.seed + v})
        save_volume(synth_phantom(spec, taxonomy), out, args.format)
    (out / "dataset.cfg").write_text(f"taxonomy = {taxonomy.name}\ncrop = none\n")
    print(f"wrote {n_volumes} volume(s) to {out}")
    return 0


def cmd_taxonomy(args) -> int:
    text = builtin_taxonomy(args.name).to_json()
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="atmseg", description="Text-guided lumbar spine MRI segmentation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp):
        sp.add_argument("--config", help="run config (.json or key = value lines)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
        sp.add_argument("--data-root", help="dataset root (empty: phantom corpus)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("train", help="train one configuration")
    run_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("ablate", help="module and prompt ablation matrix")
    run_flags(sp)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("evaluate", help="score predictions or a checkpoint")
    sp.add_argument("--pred", help="directory of predicted label maps")
    sp.add_argument("--gt", help="directory of reference label maps")
    sp.add_argument("--taxonomy", default="MRSpineSeg")
    sp.add_argument("--checkpoint", help="evaluate a trained model instead of --pred")
    sp.add_argument("--dataset", help="dataset root for --checkpoint (default: the run's own data)")
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.add_argument("--per-volume", action="store_true", help="pool each volume before averaging")
    sp.add_argument("--hd95-mode", default="pooled", choices=("pooled", "max"))
    sp.add_argument("--out", help="report.json or report.csv (default: JSON to stdout)")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("generate-prompts", help="emit one prompt record per slice")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--option", default="3", choices=("1", "2", "3"))
    sp.add_argument("--taxonomy", help="builtin name or JSON file (default: from dataset.cfg)")
    sp.add_argument("--paper-verbatim", action="store_true", help="use the original descriptor wording")
    sp.add_argument("--templates", help="custom template JSON")
    sp.add_argument("--out", help="output .jsonl (default: stdout)")
    sp.set_defaults(func=cmd_generate_prompts)

    sp = sub.add_parser("synth", help="write a phantom dataset")
    sp.add_argument("--spec", help="phantom spec JSON")
    sp.add_argument("--out", required=True)
    sp.add_argument("--taxonomy", default="MRSpineSeg")
    sp.add_argument("--volumes", type=int, default=1)
    sp.add_argument("--format", default="png", choices=("png", "npz"))
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("taxonomy", help="print a builtin taxonomy as JSON")
    sp.add_argument("name", choices=("MRSpineSeg", "SPIDER"))
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_taxonomy)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
