"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (about 25 minutes on one
CPU core, most of it in the two training experiments).
"""

import math
import time

import numpy as np
import pytest
import torch
from helpers import banded_label, fd_gradient, prompt_cases, random_label_pair, rel_err

from atmseg import metrics
from atmseg.atpg import classify_slice_third, generate_bundle, generate_channel_prompts, generate_holistic, load_templates, token_count
from atmseg.ccae import ContrastiveConfig, ftc_loss, l2_rows
from atmseg.dataio import phantom_corpus
from atmseg.encoders import EncoderConfig
from atmseg.hasf import HasfConfig, dice_focal_loss
from atmseg.harness.config import RunConfig
from atmseg.harness.schedule import cosine_lr
from atmseg.harness.train import evaluate_run, predict_samples, prepare_data, train
from atmseg.metrics import core, kernels
from atmseg.model import ATMNet
from atmseg.taxonomy import builtin_taxonomy

TAX = builtin_taxonomy("MRSpineSeg")


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return emit


def _nan_eq(a, b, tol):
    return (math.isnan(a) and math.isnan(b)) or abs(a - b) <= tol


def _pairs(n=200, seed=2024):
    rng = np.random.default_rng(seed)
    return [random_label_pair(rng, 32, 4) for _ in range(n)]


# ---------------------------------------------------------------- metrics


def test_metric_oracle_equivalence(report, monkeypatch):
    t0 = time.perf_counter()
    worst = 0.0
    mismatched = 0
    for pred, gt in _pairs():
        for c in range(1, 4):
            ref = core.brute_force_metrics(pred, gt, c)
            for use_numba in (True, False):
                monkeypatch.setattr(kernels, "USE_NUMBA", use_numba)
                got = {
                    "dsc": metrics.dsc(pred, gt, c),
                    "jaccard": metrics.jaccard(pred, gt, c),
                    "hd95": metrics.hd95(pred, gt, c),
                    "asd": metrics.asd(pred, gt, c),
                }
                for m in metrics.METRICS:
                    if not _nan_eq(ref[m], got[m], 1e-9):
                        mismatched += 1
                    elif not math.isnan(ref[m]):
                        worst = max(worst, abs(ref[m] - got[m]))
    elapsed = time.perf_counter() - t0
    report(
        "metric oracle equivalence",
        mismatched == 0 and elapsed < 30,
        f"200 pairs x 3 classes x 2 backends, max |diff| {worst:.1e}, mismatches {mismatched}, {elapsed:.1f}s",
    )


def test_metric_identities(report):
    worst = 0.0
    for pred, gt in _pairs(seed=7):
        for c in range(1, 4):
            d, j = metrics.dsc(pred, gt, c), metrics.jaccard(pred, gt, c)
            if not math.isnan(d):
                worst = max(worst, abs(j - d / (2 - d)))
    lab = np.zeros((32, 32), int)
    lab[5:20, 8:25] = 4
    same = (metrics.dsc(lab, lab, 4), metrics.jaccard(lab, lab, 4), metrics.hd95(lab, lab, 4), metrics.asd(lab, lab, 4))

    # corpus where class 2 never appears in any prediction or reference
    gts, preds = [], []
    for k in range(4):
        g = np.zeros((32, 32), int)
        g[4:12, 4:12] = 1
        g[16:24, 4:12] = 3
        p = np.roll(g, k, axis=1)
        gts.append(g)
        preds.append(p)
    rep = metrics.evaluate(preds, gts, TAX)
    defined = [rep.per_class[c]["dsc"] for c in (1, 3)]
    nan_ok = (
        math.isnan(rep.per_class[2]["dsc"])
        and 2 in rep.nan_classes
        and abs(rep.aggregate["dsc"] - np.mean(defined)) < 1e-12
        and all(c in rep.nan_classes for c in range(4, 20))
    )
    ok = worst < 1e-12 and same == (1.0, 1.0, 0.0, 0.0) and nan_ok
    report("metric identities", ok, f"max |J - D/(2-D)| {worst:.1e}, identical masks {same}, NaN-exclusion {nan_ok}")


# ---------------------------------------------------------------- gradients


def _full_model_check():
    torch.manual_seed(0)
    enc = EncoderConfig(image_size=32)
    model = ATMNet(20, enc, HasfConfig(alpha_init=0.1), ContrastiveConfig()).double()
    sample = phantom_corpus(1, TAX, image_size=32, n_slices=1, seed=3)
    s = next(iter(sample.values()))[0]
    images = torch.from_numpy(s.image)[None, None].double()
    target = torch.from_numpy(s.label)[None]
    holistic = [generate_holistic(s.label, classify_slice_third(0, 1), TAX, 3)]
    channel = [generate_channel_prompts(s.label, TAX)]

    def loss():
        return model.losses(model(images, holistic), target, channel)["total"]

    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    loss().backward()
    grads = [p.grad.clone() for p in params]
    gen = torch.Generator().manual_seed(1)
    analytic, numeric = [], []
    h = 1e-6
    for _ in range(6):
        vs = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
        analytic.append(sum((g * v).sum() for g, v in zip(grads, vs)).item())
        with torch.no_grad():
            for p, v in zip(params, vs):
                p.add_(h * v)
            up = loss().item()
            for p, v in zip(params, vs):
                p.sub_(2 * h * v)
            down = loss().item()
            for p, v in zip(params, vs):
                p.add_(h * v)
        numeric.append((up - down) / (2 * h))
    return rel_err(torch.tensor(analytic), torch.tensor(numeric))


def test_gradient_checks(report):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    logits = torch.randn(2, 6, 8, 8, dtype=torch.float64)
    target = torch.randint(0, 6, (2, 8, 8))
    fn = lambda z: dice_focal_loss(torch.softmax(z, 1), target)
    z = logits.clone().requires_grad_(True)
    fn(z).backward()
    e_df = rel_err(z.grad, fd_gradient(fn, logits.clone()))

    v0 = torch.randn(2, 6, 8, dtype=torch.float64)
    t0_ = torch.randn(2, 6, 8, dtype=torch.float64)
    fn2 = lambda v: ftc_loss(l2_rows(v), l2_rows(t0_), 0.07)
    v = v0.clone().requires_grad_(True)
    fn2(v).backward()
    e_ftc = rel_err(v.grad, fd_gradient(fn2, v0.clone()))

    e_model = _full_model_check()
    elapsed = time.perf_counter() - t0
    ok = e_df < 1e-4 and e_ftc < 1e-4 and e_model < 1e-3 and elapsed < 120
    report(
        "gradient checks",
        ok,
        f"dice+focal {e_df:.1e}, ftc {e_ftc:.1e}, full model {e_model:.1e}, {elapsed:.1f}s",
    )


def test_closed_form_contrastive(report):
    eye = torch.eye(4, dtype=torch.float64)
    got = ftc_loss(eye, eye, 1.0).item()
    want = math.log(1 + 3 * math.exp(-1))
    report("closed-form contrastive value", abs(got - want) < 1e-9, f"{got:.12f} vs {want:.12f}")


# ---------------------------------------------------------------- model


def test_normalization_invariant(report):
    torch.manual_seed(0)
    details, ok = [], True
    for size in (64, 96, 384):
        model = ATMNet(20, EncoderConfig(image_size=size), HasfConfig(alpha_init=0.5)).eval()
        images = torch.rand(1, 1, size, size)
        with torch.no_grad():
            probs = model(images, ["The image is a sagittal MRI of the lumbar spine."]).probs
        dev = (probs.sum(1) - 1).abs().max().item()
        finite = bool(torch.isfinite(probs).all())
        ok &= dev <= 1e-5 and finite
        details.append(f"{size}: max |sum-1| {dev:.1e}")
    report("normalization invariant", ok, ", ".join(details))


def test_ablation_wiring(report):
    torch.use_deterministic_algorithms(True)
    torch.manual_seed(0)
    enc = EncoderConfig(image_size=64)
    model = ATMNet(20, enc, HasfConfig(alpha_init=0.0), ContrastiveConfig(lambda2=0.0))
    model.decoder.alpha.requires_grad_(False)  # alpha held at zero
    s = next(iter(phantom_corpus(1, TAX, image_size=64, n_slices=1, seed=5).values()))[0]
    images = torch.from_numpy(s.image)[None, None].float()
    target = torch.from_numpy(s.label)[None]
    bundle = generate_bundle(s, TAX, 3)

    def step(with_text):
        m = ATMNet(20, enc, HasfConfig(alpha_init=0.0), ContrastiveConfig(lambda2=0.0))
        m.load_state_dict(model.state_dict())
        m.decoder.alpha.requires_grad_(False)
        opt = torch.optim.AdamW([p for p in m.parameters() if p.requires_grad], lr=1e-3)
        out = m(images, [bundle.holistic] if with_text else None)
        loss = m.losses(out, target, [bundle.channel] if with_text else None)["total"]
        opt.zero_grad()
        loss.backward()
        grads = {n: None if p.grad is None else p.grad.clone() for n, p in m.named_parameters()}
        opt.step()
        return out.logits.detach(), grads, m

    logits_t, grads_t, m_t = step(True)
    logits_b, grads_b, m_b = step(False)
    same_out = torch.equal(logits_t, logits_b)
    shared = [n for n, g in grads_b.items() if g is not None]
    same_grad = all(torch.equal(grads_t[n], grads_b[n]) for n in shared)
    text_only = [n for n, g in grads_b.items() if g is None and grads_t[n] is not None]
    zero_text = all(not grads_t[n].any() for n in text_only)
    params_b = dict(m_b.named_parameters())
    same_step = all(torch.equal(p, params_b[n]) for n, p in m_t.named_parameters() if n in shared)
    ok = same_out and same_grad and zero_text and same_step
    report(
        "ablation wiring",
        ok,
        f"logits bitwise {same_out}, {len(shared)} shared grads bitwise {same_grad}, "
        f"{len(text_only)} text-only grads zero {zero_text}, post-step params bitwise {same_step}",
    )


# ---------------------------------------------------------------- prompts


def test_atpg_golden_files(report):
    failures = []
    for case in prompt_cases():
        tax = builtin_taxonomy(case["taxonomy"])
        tpl = load_templates(case["verbatim"])
        label = banded_label(case["present"])
        third = classify_slice_third(case["slice_index"], case["slice_count"])
        for opt in (1, 2, 3):
            if generate_holistic(label, third, tax, opt, tpl) != case[f"opt{opt}"]:
                failures.append(f"{case['name']}/opt{opt}")
        if generate_channel_prompts(label, tax, tpl) != case["channel"]:
            failures.append(f"{case['name']}/channel")
    opening = prompt_cases()[0]["opt3"].startswith(
        "The sagittal MRI of the lumbar spine demonstrates the anatomy in the true mid-sagittal plane, "
        "which, from superior to inferior, encompasses lumbar vertebra T10, intervertebral disc T10/T11"
    )
    corpus = phantom_corpus(10, TAX, image_size=64, n_slices=3, seed=11)
    monotone = 0
    total = 0
    for samples in corpus.values():
        for s in samples:
            c = [token_count(generate_bundle(s, TAX, o).holistic) for o in (1, 2, 3)]
            monotone += c[0] <= c[1] <= c[2]
            total += 1
    ok = not failures and opening and monotone == total
    report(
        "ATPG golden files",
        ok,
        f"5 label maps x (3 holistic + 20 channel), failures {failures or 'none'}, "
        f"verbatim opening {opening}, token order held on {monotone}/{total} slices",
    )


# ---------------------------------------------------------------- training


def test_overfit_smoke(report, tmp_path):
    cfg = RunConfig().replace(
        **{
            "encoder.image_size": 96,
            "data.phantom_volumes": 1,
            "data.phantom_slices": 1,
            "data.split": "none",
            "data.augment_strength": 0.0,
            "optimizer.batch": 1,
            "optimizer.steps": 500,
            "optimizer.lr": 3e-3,
            "eval_splits": ["train"],
        }
    )
    t0 = time.perf_counter()
    rec = train(cfg, tmp_path)
    elapsed = time.perf_counter() - t0
    dsc = rec.reports["train"].aggregate["dsc"]
    taxonomy, volumes, split = prepare_data(cfg)
    samples = [s for v in split.train for s in volumes[v]]
    (pred,) = predict_samples(rec.model, samples, taxonomy, cfg)
    pixel_acc = float((pred == samples[0].label).mean())
    reloaded = evaluate_run(rec.checkpoint, "train").aggregate["dsc"]
    ok = dsc >= 0.9 and elapsed < 600 and pixel_acc >= 0.99 and reloaded >= 0.9
    report(
        "overfit smoke",
        ok,
        f"train DSC {dsc:.4f}, pixel agreement {pixel_acc:.4f}, reloaded checkpoint DSC {reloaded:.4f}, "
        f"500 steps in {elapsed:.0f}s",
    )


DIRECTIONAL = {
    "encoder.image_size": 64,
    "data.phantom_volumes": 20,
    "data.phantom_slices": 2,
    "data.augment_strength": 0.0,
    "optimizer.batch": 4,
    "optimizer.steps": 800,
    "optimizer.lr": 3e-3,
    "eval_splits": ["test"],
}


def test_directional_ablation(report, capsys):
    base = RunConfig().replace(**DIRECTIONAL)
    rows = []
    for seed in range(5):
        scores = []
        for on in (False, True):
            cfg = base.replace(**{"seed": seed, "modules.hasf_on": on, "modules.ccae_on": on})
            scores.append(train(cfg).reports["test"].aggregate["dsc"])
        rows.append(scores)
    with capsys.disabled():
        print("\n  seed  visual-only  HASF+CCAE")
        for seed, (b, f) in enumerate(rows):
            print(f"  {seed:>4}  {b:>11.4f}  {f:>9.4f}")
    base_mean, full_mean = np.mean([r[0] for r in rows]), np.mean([r[1] for r in rows])
    report(
        "directional ablation (trend check)",
        full_mean >= base_mean,
        f"mean test DSC over 5 seeds: HASF+CCAE {full_mean:.4f} vs visual-only {base_mean:.4f}",
    )


def test_cosine_schedule_endpoints(report):
    T, hi, lo = 1000, 1e-4, 1e-6
    lrs = [cosine_lr(t, T, hi, lo) for t in range(T)]
    worst = max(abs(v - (lo + 0.5 * (hi - lo) * (1 + math.cos(math.pi * t / (T - 1))))) for t, v in enumerate(lrs))
    ok = lrs[0] == hi and lrs[-1] == lo and worst < 1e-12
    report("cosine lr schedule", ok, f"lr[0]={lrs[0]:g}, lr[{T - 1}]={lrs[-1]:g}, max closed-form diff {worst:.1e}")
