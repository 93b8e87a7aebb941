"""Training loop, evaluation and the ablation matrix."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .. import metrics
from ..atpg import PromptOption, classify_slice_third, generate_channel_prompts, generate_holistic, load_templates
from ..dataio import (
    SliceSample,
    DatasetSplit,
    load_dataset,
    phantom_corpus,
    preprocess,
    random_distort,
    read_dataset_config,
    stratified_split,
)
from ..model import ATMNet
from ..taxonomy import ClassTaxonomy, load_taxonomy
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, from_flat
from .schedule import cosine_lr

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "ATMSEG_DATA_ROOT"


class TrainingDivergedError(RuntimeError):
    pass


class TaxonomyMismatchError(ValueError):
    pass


@dataclass
class RunRecord:
    config_hash: str
    config: dict
    seed: int
    losses: list[dict] = field(default_factory=list)
    reports: dict[str, metrics.MetricsReport] = field(default_factory=dict)
    wall_clock: float = 0.0
    checkpoint: str | None = None
    model: ATMNet | None = field(default=None, repr=False, compare=False)

    @property
    def final_report(self) -> metrics.MetricsReport | None:
        return self.reports.get("test") or next(iter(self.reports.values()), None)

    def losses_csv(self) -> str:
        keys = ["step", "lr", "total", "dice", "focal"] + (["ftc"] if any("ftc" in r for r in self.losses) else [])
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for row in self.losses:
            w.writerow(row)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "config": self.config,
            "seed": self.seed,
            "wall_clock": self.wall_clock,
            "checkpoint": self.checkpoint,
            "final_loss": self.losses[-1] if self.losses else None,
            "reports": {k: r.to_dict() for k, r in self.reports.items()},
        }

    def write(self, out_dir: str | Path, taxonomy: ClassTaxonomy) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "record.json").write_text(json.dumps(self.to_dict(), indent=2))
        (out / "losses.csv").write_text(self.losses_csv())
        rep = self.final_report
        if rep is not None:
            (out / "report.json").write_text(rep.to_json())
            (out / "report.csv").write_text(metrics.reports_to_csv([(self.config_hash, rep)], taxonomy))


# ---------------------------------------------------------------- setup


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic)


def prepare_data(cfg: RunConfig) -> tuple[ClassTaxonomy, dict[str, list[SliceSample]], DatasetSplit]:
    """Load (or synthesize) the corpus at the model resolution and split it by volume."""
    taxonomy = load_taxonomy(cfg.taxonomy)
    root = os.environ.get(DATA_ROOT_ENV) or cfg.data.root
    size = cfg.encoder.image_size
    if root:
        ds_cfg = read_dataset_config(root)
        if load_taxonomy(ds_cfg.taxonomy).names != taxonomy.names:
            raise TaxonomyMismatchError(
                f"dataset {root} declares taxonomy {ds_cfg.taxonomy}, run uses {cfg.taxonomy}"
            )
        raw = load_dataset(root, taxonomy, ds_cfg)
        crop = cfg.data.crop or ds_cfg.crop
        volumes = {v: [preprocess(s, size, crop) for s in ss] for v, ss in raw.items()}
    else:
        volumes = phantom_corpus(
            cfg.data.phantom_volumes,
            taxonomy,
            image_size=size,
            n_slices=cfg.data.phantom_slices,
            noise_sigma=cfg.data.phantom_noise,
            n_vertebrae=(cfg.data.phantom_min_vertebrae, cfg.data.phantom_max_vertebrae),
            seed=cfg.data.phantom_seed,
        )
    if cfg.data.split == "none":
        vids = sorted(volumes)
        split = DatasetSplit(vids, list(vids), list(vids))
    else:
        present = {v: set().union(*(s.present for s in ss)) for v, ss in volumes.items()}
        split = stratified_split(present, (8, 1, 1), seed=cfg.seed)
    return taxonomy, volumes, split


def build_model(cfg: RunConfig, taxonomy: ClassTaxonomy) -> ATMNet:
    return ATMNet(taxonomy.num_classes, cfg.encoder, cfg.hasf, cfg.contrastive)


def _collect(volumes, vids) -> list[SliceSample]:
    return [s for v in vids for s in volumes[v]]


def _tensors(samples: Sequence[SliceSample], dtype) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(np.stack([s.image for s in samples])).to(dtype)[:, None]
    labels = torch.from_numpy(np.stack([s.label for s in samples]).astype(np.int64))
    return images, labels


def holistic_prompts(samples, taxonomy, cfg: RunConfig, templates) -> list[str] | None:
    """Holistic prompts from each slice's annotation, or ``None`` on the text-free path."""
    if not cfg.hasf_active:
        return None
    option = PromptOption.parse(cfg.prompt_option)
    return [
        generate_holistic(s.label, classify_slice_third(s.slice_index, s.slice_count), taxonomy, option, templates)
        for s in samples
    ]


# ---------------------------------------------------------------- evaluation


@torch.no_grad()
def predict_samples(model: ATMNet, samples, taxonomy, cfg: RunConfig, batch: int = 8) -> list[np.ndarray]:
    templates = load_templates(cfg.paper_verbatim)
    was_training = model.training
    model.eval()
    preds = []
    for k in range(0, len(samples), batch):
        chunk = samples[k : k + batch]
        images, _ = _tensors(chunk, model.dtype)
        pred = model.predict(images, holistic_prompts(chunk, taxonomy, cfg, templates))
        preds.extend(p.numpy() for p in pred)
    model.train(was_training)
    return preds


def evaluate_samples(model, samples, taxonomy, cfg: RunConfig, per_volume: bool = False) -> metrics.MetricsReport:
    preds = predict_samples(model, samples, taxonomy, cfg)
    return metrics.evaluate(
        preds,
        [s.label for s in samples],
        taxonomy,
        volume_ids=[s.volume_id for s in samples],
        per_volume=per_volume,
    )


# ---------------------------------------------------------------- training


def _snapshot(out_dir, step, parts, model) -> str | None:
    if out_dir is None:
        return None
    path = Path(out_dir) / f"diverged_step{step}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(
            {
                "step": step,
                "losses": {k: float(v.detach()) for k, v in parts.items()},
                "param_norms": {n: float(p.detach().norm()) for n, p in model.named_parameters()},
            },
            indent=2,
        )
    )
    return str(path)


def _save(model, cfg, taxonomy, path, step) -> str:
    meta = {"step": step, "taxonomy": json.loads(taxonomy.to_json())}
    return str(save_checkpoint(path, model.state_dict(), cfg.to_flat(), meta))


def train(
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    data=None,
    on_step: Callable[[int, dict], None] | None = None,
    dtype=torch.float32,
) -> RunRecord:
    """Train one configuration; ``data`` may pass a prepared
    ``(taxonomy, volumes, split)`` triple to skip loading."""
    cfg.validate()
    t0 = time.perf_counter()
    seed_everything(cfg.seed, cfg.deterministic)
    taxonomy, volumes, split = data if data is not None else prepare_data(cfg)
    train_samples = _collect(volumes, split.train)
    if not train_samples:
        raise ValueError("empty training split")
    model = build_model(cfg, taxonomy).to(dtype)
    model.train()
    opt_cfg = cfg.optimizer
    optimizer = torch.optim.AdamW(model.parameters(), lr=opt_cfg.lr, weight_decay=opt_cfg.weight_decay)
    templates = load_templates(cfg.paper_verbatim)
    rng = np.random.default_rng(cfg.seed)
    record = RunRecord(cfg.config_hash(), cfg.to_flat(), cfg.seed)

    order: list[int] = []
    for step in range(opt_cfg.steps):
        lr = cosine_lr(step, opt_cfg.steps, opt_cfg.lr, opt_cfg.lr_min)
        for group in optimizer.param_groups:
            group["lr"] = lr
        idx = []
        while len(idx) < opt_cfg.batch:
            if not order:
                order = list(rng.permutation(len(train_samples)))
            idx.append(order.pop())
        batch = [train_samples[i] for i in idx]
        if cfg.data.augment_strength > 0:
            batch = [
                random_distort(s, cfg.data.augment_strength, seed=cfg.seed * 1_000_003 + step * opt_cfg.batch + j)
                for j, s in enumerate(batch)
            ]
        images, labels = _tensors(batch, dtype)
        holistic = holistic_prompts(batch, taxonomy, cfg, templates)
        channel = None
        if cfg.ccae_active:
            channel = [tuple(generate_channel_prompts(s.label, taxonomy, templates)) for s in batch]

        out = model(images, holistic)
        parts = model.losses(out, labels, channel)
        if not torch.isfinite(parts["total"]):
            snap = _snapshot(out_dir, step, parts, model)
            raise TrainingDivergedError(f"non-finite loss at step {step}; snapshot: {snap}")
        optimizer.zero_grad(set_to_none=True)
        parts["total"].backward()
        optimizer.step()

        row = {"step": step, "lr": lr, **{k: float(v.detach()) for k, v in parts.items()}}
        record.losses.append(row)
        if on_step is not None:
            on_step(step, row)
        if out_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            log.info("checkpoint %s", _save(model, cfg, taxonomy, Path(out_dir) / f"checkpoint_step{step + 1}.zip", step + 1))

    if out_dir is not None:
        record.checkpoint = _save(model, cfg, taxonomy, Path(out_dir) / "checkpoint.zip", opt_cfg.steps)
    for name in cfg.eval_splits:
        samples = _collect(volumes, getattr(split, name))
        if samples:
            record.reports[name] = evaluate_samples(model, samples, taxonomy, cfg)
    record.wall_clock = time.perf_counter() - t0
    record.model = model
    if out_dir is not None:
        record.write(out_dir, taxonomy)
    return record


def load_model(checkpoint: str | Path) -> tuple[ATMNet, RunConfig, ClassTaxonomy]:
    state, flat, meta = load_checkpoint(checkpoint)
    cfg = from_flat(flat)
    taxonomy = ClassTaxonomy.from_json(json.dumps(meta["taxonomy"]))
    model = build_model(cfg, taxonomy)
    dtype = next(iter(state.values())).dtype
    model = model.to(dtype)
    model.load_state_dict(state)
    model.eval()
    return model, cfg, taxonomy


def evaluate_run(
    checkpoint: str | Path,
    split: str = "test",
    data_root: str | None = None,
    per_volume: bool = False,
) -> metrics.MetricsReport:
    """Argmax predictions of a saved model on one split of its dataset."""
    model, cfg, taxonomy = load_model(checkpoint)
    if data_root is not None:
        cfg = cfg.replace(**{"data.root": data_root})
    data_tax, volumes, parts = prepare_data(cfg)
    if data_tax.names != taxonomy.names:
        raise TaxonomyMismatchError(
            f"checkpoint taxonomy {taxonomy.name} does not match dataset taxonomy {data_tax.name}"
        )
    samples = _collect(volumes, getattr(parts, split))
    return evaluate_samples(model, samples, taxonomy, cfg, per_volume=per_volume)


# ---------------------------------------------------------------- ablation

MODULE_ROWS = ((False, False), (False, True), (True, False), (True, True))
PROMPT_ROWS = ("none", "1", "2", "3")


def ablation_configs(base: RunConfig) -> list[tuple[str, RunConfig]]:
    """HASF x CCAE matrix (four rows) followed by the prompt-option matrix
    (four rows, HASF only)."""
    rows = []
    for hasf_on, ccae_on in MODULE_ROWS:
        rows.append(("modules", base.replace(**{"modules.hasf_on": hasf_on, "modules.ccae_on": ccae_on})))
    prompt_base = base.replace(**{"modules.hasf_on": True, "modules.ccae_on": False})
    for opt in PROMPT_ROWS:
        rows.append(("prompts", prompt_base.replace(prompt_option=opt)))
    return rows


def ablate(base: RunConfig, out_dir: str | Path | None = None, data=None) -> list[RunRecord]:
    """Eight runs with a shared seed; identical configurations are trained once."""
    data = data if data is not None else prepare_data(base)
    done: dict[str, RunRecord] = {}
    records = []
    for _, cfg in ablation_configs(base):
        h = cfg.config_hash()
        if h not in done:
            sub = None if out_dir is None else Path(out_dir) / f"run_{h}"
            done[h] = train(cfg, sub, data=data)
        records.append(done[h])
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.csv").write_text(ablation_csv(base, records))
    return records


def ablation_csv(base: RunConfig, records: Sequence[RunRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["table", "HASF", "CCAE", "prompt", "DSC", "Jaccard", "HD95", "ASD", "config_hash"])
    for (table, cfg), rec in zip(ablation_configs(base), records):
        agg = rec.final_report.aggregate if rec.final_report else {}

        def fmt(m, scale=1.0):
            v = agg.get(m, float("nan"))
            return "NaN" if math.isnan(v) else f"{v * scale:.2f}"

        w.writerow(
            [
                table,
                "x" if cfg.hasf_active else "",
                "x" if cfg.ccae_active else "",
                cfg.prompt_option,
                fmt("dsc", 100),
                fmt("jaccard", 100),
                fmt("hd95"),
                fmt("asd"),
                rec.config_hash,
            ]
        )
    return buf.getvalue()
