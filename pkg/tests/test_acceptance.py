"""Acceptance suite: one PASS/FAIL line per criterion, then the usual assertion.

Run alone with ``pytest -m acceptance -s`` to see the verdict lines inline; under
plain ``pytest -v`` they are written straight to the terminal as well.
"""

import copy
import dataclasses
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from doubles import LinearDouble, ZeroDouble
from oracles import fd_check, features_oracle, glcm_oracle, js_oracle, rel_err
from reference_trainer import ReferenceTrainer
from sanet.config import TrainConfig, toy_profile
from sanet.data import Domain, build_manifest, read_rgb
from sanet.evaluation.blank import blank_region_deviation
from sanet.evaluation.divergence import js_divergence
from sanet.evaluation.fid import ActivationStats, RandomConvFeatures, fid
from sanet.evaluation.gradcam import grad_cam
from sanet.evaluation.report import ImageSet, evaluate_sets
from sanet.evaluation.texture import ANGLES, DISTANCES, Histogram, glcm_features, glcm_matrix
from sanet.fixtures import synthesize
from sanet.losses import LossWeights, adv_loss_discriminator, adv_loss_generator, compose_total, cycle_loss
from sanet.networks import ModelBundle
from sanet.segmentation import Segmenter, apply_mask, load_mask
from sanet.training import PatchSource, TrainState, generate, load_checkpoint, train, train_step

pytestmark = pytest.mark.acceptance

TESTS = Path(__file__).parent
SEEDS = (0, 1, 2)
DESK_PATCHES = 200
DESK_EPOCHS = 5


def verdict(capsys, number, title, ok, detail=""):
    line = f"criterion {number:>2} {title}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f" ({detail})"
    with capsys.disabled():
        print("\n" + line, flush=True)
    assert ok, line


def toy_cfg(**kw):
    loss = kw.pop("loss", LossWeights())
    return toy_profile(dataclasses.replace(TrainConfig(), loss=loss, **kw))


def same_params(a, b):
    return all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))


def test_criterion_01_glcm_oracle(capsys):
    rng = np.random.default_rng(2024)
    crops = [rng.integers(0, 256, (14, 14)) for _ in range(100)]
    start = time.perf_counter()
    worst = 0.0
    for crop in crops:
        rows = crop.tolist()
        for d in DISTANCES:
            for a in ANGLES:
                P = glcm_matrix(crop, d, a)
                ref = glcm_oracle(rows, d, a)
                dense = np.zeros_like(P)
                for (i, j), p in ref.items():
                    dense[i, j] = p
                worst = max(worst, float(np.abs(P - dense).max()))
                for x, y in zip(glcm_features(P).as_array(), features_oracle(ref)):
                    worst = max(worst, rel_err(x, y))
    elapsed = time.perf_counter() - start
    verdict(capsys, 1, "GLCM oracle equivalence", worst < 1e-10 and elapsed < 30,
            f"max error {worst:.1e}, {elapsed:.1f} s")


def test_criterion_02_glcm_closed_forms(capsys):
    const = glcm_features(glcm_matrix(np.full((14, 14), 90), 1, 0))
    ok = (const.contrast, const.correlation, const.energy, const.homogeneity) == (0.0, 1.0, 1.0, 1.0)
    board = (np.indices((14, 14)).sum(axis=0) % 2) * 255
    f = glcm_features(glcm_matrix(board, 1, 0))
    expected = (65025.0, -1.0, math.sqrt(0.5), 1 / 256)
    got = (f.contrast, f.correlation, f.energy, f.homogeneity)
    ok = ok and all(abs(g - e) <= 1e-9 for g, e in zip(got, expected))
    verdict(capsys, 2, "GLCM closed forms", ok, f"checkerboard {got}")


def test_criterion_03_fid(capsys):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(40, 6))
    a = ActivationStats(x.mean(0), np.cov(x, rowvar=False), 40)
    y = rng.normal(1.0, 2.0, size=(40, 6))
    b = ActivationStats(y.mean(0), np.cov(y, rowvar=False), 40)
    offset = fid(ActivationStats(np.zeros(4), np.eye(4), 2), ActivationStats(np.ones(4), np.eye(4), 2))
    ok = fid(a, a) <= 1e-6 and abs(offset - 4) <= 1e-6 and abs(fid(a, b) - fid(b, a)) <= 1e-8
    verdict(capsys, 3, "FID correctness", ok, f"offset case {offset!r}")


def test_criterion_04_js(capsys):
    edges = np.linspace(0, 1, 5)
    a = Histogram(edges, [0.25, 0.75, 0, 0])
    b = Histogram(edges, [0, 0, 0.5, 0.5])
    ok = js_divergence(a, a) == 0 and abs(js_divergence(a, b) - 1) <= 1e-9
    rng = np.random.default_rng(4)
    edges = np.linspace(0, 1, 33)
    worst = 0.0
    for _ in range(1000):
        p = rng.random(32) * (rng.random(32) < 0.7)
        q = rng.random(32) * (rng.random(32) < 0.7)
        p[3] += 1e-2
        q[5] += 1e-2
        v = js_divergence(Histogram(edges, p / p.sum()), Histogram(edges, q / q.sum()))
        worst = max(worst, abs(v - js_oracle(p.tolist(), q.tolist())))
    verdict(capsys, 4, "JS divergence", ok and worst <= 1e-12, f"max oracle gap {worst:.1e}")


def test_criterion_05_loss_gradients(capsys):
    gen = torch.Generator().manual_seed(5)
    real, fake = torch.randn(8, 8, generator=gen), torch.randn(8, 8, generator=gen)
    x = torch.randn(8, 8, generator=gen)
    y = x + torch.sign(torch.randn(8, 8, generator=gen)) * (0.5 + torch.rand(8, 8, generator=gen))
    failures = []
    checks = {
        "discriminator": (lambda r, f: adv_loss_discriminator(r, f), real, fake),
        "generator": (adv_loss_generator, fake),
        "cycle": (cycle_loss, x, y),
        "composite": (lambda u, v: compose_total(adv_loss_generator(u), adv_loss_generator(v), 1.0), real, fake),
    }
    for name, (fn, *inputs) in checks.items():
        try:
            fd_check(fn, *inputs)
        except AssertionError as err:
            failures.append(f"{name}: {err}")
    verdict(capsys, 5, "loss gradient checks", not failures, "; ".join(failures))


def test_criterion_06_baseline_reduction(capsys, small_manifests):
    frozen, permanent = small_manifests
    sf, sp = PatchSource(frozen), PatchSource(permanent)
    n = min(len(frozen), len(permanent))

    cfg = toy_cfg(loss=LossWeights(lambda_seg=0.0))
    bundle = ModelBundle.create(cfg.generator, cfg.discriminator, 6)
    state = TrainState(copy.deepcopy(bundle), cfg)
    ref = ReferenceTrainer(bundle, cfg.lr_generator, cfg.lr_discriminator, cfg.betas,
                           cfg.loss.lambda_gan, cfg.loss.lambda_cycle)
    mismatches = 0
    for step in range(50):
        f, fm = sf.batch([step % n])
        p, pm = sp.batch([(step * 5 + 1) % n])
        ours = train_step(state, f, p, fm, pm).losses.as_dict()
        mismatches += sum(ours[k] != v for k, v in ref.step(f, p).items())
    weights_equal = all(same_params(net, state.bundle.networks()[k]) for k, net in bundle.networks().items())

    cfg = toy_cfg()
    state = TrainState(ModelBundle.create(cfg.generator, cfg.discriminator, 6), cfg)
    f32 = np.float32
    total_gaps = 0
    for step in range(50):
        f, fm = sf.batch([step % n])
        p, pm = sp.batch([(step * 5 + 1) % n])
        r = train_step(state, f, p, fm, pm).losses
        d = (f32(r.d_p_gan) + f32(r.d_p_gan_seg)) + (f32(r.d_f_gan) + f32(r.d_f_gan_seg))
        g = (f32(1.0) * ((f32(r.g_p_gan) + f32(r.g_p_gan_seg)) + (f32(r.g_f_gan) + f32(r.g_f_gan_seg)))
             + f32(100.0) * (f32(r.cycle) + f32(r.cycle_seg)))
        total_gaps += (float(d) != r.d_total) + (float(g) != r.g_total)
    ok = mismatches == 0 and weights_equal and total_gaps == 0
    verdict(capsys, 6, "baseline reduction", ok,
            f"{mismatches} base mismatches over 50 steps, {total_gaps} total mismatches at lambda_seg=1")


def test_criterion_07_alternation_and_determinism(capsys, small_manifests, tmp_path):
    frozen, permanent = small_manifests
    cfg = toy_cfg(epochs=2, checkpoint_interval=4)
    state = TrainState(ModelBundle.create(cfg.generator, cfg.discriminator, 7), cfg)
    nets = state.bundle.networks()
    snap = lambda: {k: [t.detach().clone() for t in n.parameters()] for k, n in nets.items()}
    before, mid = snap(), {}
    state.optimizers["d_f"].register_step_post_hook(lambda *_: mid.update(snap()))
    f, fm = PatchSource(frozen).batch([0])
    p, pm = PatchSource(permanent).batch([0])
    train_step(state, f, p, fm, pm)
    after = snap()
    eq = lambda a, b: all(torch.equal(x, y) for x, y in zip(a, b))
    halves = (all(eq(before[g], mid[g]) and not eq(mid[g], after[g]) for g in ("g_p", "g_f"))
              and all(not eq(before[d], mid[d]) and eq(mid[d], after[d]) for d in ("d_p", "d_f")))

    lines = lambda p: [ln for ln in p.read_text().splitlines() if not ln.startswith("#")]
    train(frozen, permanent, cfg, out_dir=tmp_path / "a")
    train(frozen, permanent, cfg, out_dir=tmp_path / "b")
    repeat = lines(tmp_path / "a" / "train.log") == lines(tmp_path / "b" / "train.log")
    train(frozen, permanent, cfg, out_dir=tmp_path / "c", stop_after=9)
    log = tmp_path / "c" / "train.log"
    text = log.read_text().splitlines()
    header = [ln for ln in text if ln.startswith("#")]
    log.write_text("\n".join(header + lines(log)[:8]) + "\n")
    ck = load_checkpoint(tmp_path / "c" / "step_000008.ckpt")
    train(frozen, permanent, ck.train_config, resume=ck, out_dir=tmp_path / "c")
    resumed = lines(log) == lines(tmp_path / "a" / "train.log")
    verdict(capsys, 7, "alternation and determinism", halves and repeat and resumed,
            f"half-steps {halves}, repeat {repeat}, resume {resumed}")


# ---------------------------------------------------------------- desk-scale training


def _desk_run(root: Path, seed: int):
    """Train SAN and the lambda_seg = 0 baseline on one seed's fixtures and score both."""
    synthesize(root / "fx", seed=seed, n_frozen=DESK_PATCHES, n_permanent=DESK_PATCHES)
    fm = build_manifest([root / "fx" / "frozen"], Domain.FROZEN, root / "pf", seed=seed, patch_size=64)
    pm = build_manifest([root / "fx" / "permanent"], Domain.PERMANENT, root / "pp", seed=seed, patch_size=64)
    frozen = [read_rgb(e.patch_path) for e in fm.entries]
    masks = [load_mask(e.mask_path).binary for e in fm.entries]
    frozen_seg = [apply_mask(x, m).pixels for x, m in zip(frozen, masks)]
    permanent = [read_rgb(e.patch_path) for e in pm.entries]

    out = {"seed": seed}
    generated = {}
    for name, lam in (("san", 1.0), ("baseline", 0.0)):
        cfg = toy_cfg(epochs=DESK_EPOCHS, seed=seed, loss=LossWeights(lambda_seg=lam))
        start = time.perf_counter()
        bundle = train(fm, pm, cfg).bundle
        out[f"{name}_minutes"] = (time.perf_counter() - start) / 60
        generated[name] = list(generate(bundle, np.stack(frozen)))
        seg_out = generate(bundle, np.stack(frozen_seg))
        out[f"{name}_blank"] = float(np.mean([blank_region_deviation(a, b).value
                                              for a, b in zip(frozen_seg, seg_out)]))

    report = evaluate_sets(ImageSet("permanent", permanent),
                           [ImageSet("frozen", frozen), ImageSet("san", generated["san"])],
                           RandomConvFeatures(), Segmenter())
    for method in ("frozen", "san"):
        row = report.row(method)
        out[f"{method}_fid"] = row["fid"]
        out[f"{method}_js"] = row["js_average"]
    return out


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    return [_desk_run(tmp_path_factory.mktemp(f"desk{seed}"), seed) for seed in SEEDS]


def test_criterion_08_directional_reproduction(capsys, desk_runs):
    wins = 0
    details = []
    for r in desk_runs:
        fid_ok = r["san_fid"] < r["frozen_fid"]
        js_ok = r["san_js"] < r["frozen_js"]
        wins += fid_ok and js_ok
        details.append(f"seed {r['seed']}: FID {r['san_fid']:.3f} vs {r['frozen_fid']:.3f}, "
                       f"JS {r['san_js']:.3f} vs {r['frozen_js']:.3f}, train {r['san_minutes']:.1f} min")
    verdict(capsys, 8, "desk-scale FID and JS ordering", wins * 2 > len(desk_runs),
            f"{wins}/{len(desk_runs)} seeds; " + "; ".join(details))


def test_criterion_09_segmented_blank_regions(capsys, desk_runs):
    wins = sum(r["san_blank"] <= r["baseline_blank"] for r in desk_runs)
    details = "; ".join(f"seed {r['seed']}: {r['san_blank']:.2f} vs baseline {r['baseline_blank']:.2f}"
                        for r in desk_runs)
    verdict(capsys, 9, "segmented-path blank deviation", wins * 2 > len(desk_runs),
            f"{wins}/{len(desk_runs)} seeds; {details}")


# ----------------------------------------------------------------


def test_criterion_10_gradcam(capsys):
    rng = np.random.default_rng(10)
    zero = grad_cam(ZeroDouble(rng.normal(size=(3, 3)), np.ones(3)),
                    torch.as_tensor(rng.normal(size=(3, 5, 5))), "feat")
    w, v = rng.normal(size=(3, 3)), np.array([0.5, -1.0, 1.5])
    x = rng.normal(size=(3, 6, 6))
    hm = grad_cam(LinearDouble(w, v), torch.as_tensor(x), "feat")
    raw = np.maximum(np.einsum("k,khw->hw", v / 36.0, np.einsum("kc,chw->khw", w, x)), 0)
    uniform = grad_cam(LinearDouble(np.ones((1, 1)), np.ones(1)), torch.ones(1, 4, 4, dtype=torch.float64), "feat")
    ok = (np.all(zero.values == 0)
          and np.allclose(hm.values, raw / raw.max(), rtol=1e-12, atol=1e-15)
          and hm.values.min() >= 0 and hm.values.max() == 1.0
          and np.array_equal(uniform.values, np.ones((4, 4))))
    verdict(capsys, 10, "Grad-CAM correctness", ok)


def test_criterion_11_pipeline_property_suite(capsys):
    start = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           str(TESTS / "test_data.py"), str(TESTS / "test_segmentation.py")],
                          capture_output=True, text=True, cwd=TESTS.parent)
    elapsed = time.perf_counter() - start
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    verdict(capsys, 11, "pipeline property suite", proc.returncode == 0 and elapsed < 120,
            f"{summary}, {elapsed:.0f} s")
