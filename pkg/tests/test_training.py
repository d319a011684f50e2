import copy
import dataclasses

import numpy as np
import pytest
import torch
import torch.nn as nn

from reference_trainer import ReferenceTrainer
from sanet.config import ConfigError, TrainConfig, parse_run_config, toy_profile
from sanet.losses import LossWeights
from sanet.networks import ModelBundle
from sanet.training import (CheckpointIntegrityError, CheckpointVersionError, PatchSource, TrainState,
                            epoch_order, generate, load_checkpoint, save_checkpoint, segmented,
                            steps_per_epoch, train, train_step)


def toy_cfg(**kw):
    loss = kw.pop("loss", LossWeights())
    return toy_profile(dataclasses.replace(TrainConfig(), loss=loss, **kw))


def first_batch(manifests, cfg):
    frozen, permanent = manifests
    f, fm = PatchSource(frozen).batch(range(cfg.batch_size))
    p, pm = PatchSource(permanent).batch(range(cfg.batch_size))
    return f, p, fm, pm


def snapshot(net):
    return [t.detach().clone() for t in net.parameters()]


def same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


def test_default_hyperparameters():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.epochs) == (1, 5)
    assert (cfg.lr_generator, cfg.lr_discriminator) == (1e-3, 1e-4)
    assert cfg.betas == (0.5, 0.999)
    assert (cfg.loss.lambda_gan, cfg.loss.lambda_cycle, cfg.loss.lambda_seg) == (1.0, 100.0, 1.0)
    assert cfg.adversarial == "lsgan"
    assert cfg.validate() == []


def test_single_step_is_finite(small_manifests):
    cfg = toy_cfg()
    state = TrainState(ModelBundle.create(cfg.generator, cfg.discriminator, 0), cfg)
    report = train_step(state, *first_batch(small_manifests, cfg))
    assert report.step == 1 and state.step == 1
    assert report.losses.is_finite()
    assert all(v >= 0 for v in report.losses.as_dict().values())


def test_half_steps_update_only_their_own_networks(small_manifests):
    cfg = toy_cfg()
    state = TrainState(ModelBundle.create(cfg.generator, cfg.discriminator, 0), cfg)
    b = state.bundle
    before = {k: snapshot(n) for k, n in b.networks().items()}
    mid = {}
    # d_f steps last in the discriminator half
    state.optimizers["d_f"].register_step_post_hook(
        lambda *_: mid.update({k: snapshot(n) for k, n in b.networks().items()}))
    train_step(state, *first_batch(small_manifests, cfg))
    after = {k: snapshot(n) for k, n in b.networks().items()}
    for g in ("g_p", "g_f"):
        assert same(before[g], mid[g])
        assert not same(mid[g], after[g])
    for d in ("d_p", "d_f"):
        assert not same(before[d], mid[d])
        assert same(mid[d], after[d])


def test_zero_seg_weight_matches_reference_trainer(small_manifests):
    cfg = toy_cfg(loss=LossWeights(lambda_seg=0.0))
    bundle = ModelBundle.create(cfg.generator, cfg.discriminator, 3)
    state = TrainState(copy.deepcopy(bundle), cfg)
    ref = ReferenceTrainer(bundle, cfg.lr_generator, cfg.lr_discriminator, cfg.betas,
                           cfg.loss.lambda_gan, cfg.loss.lambda_cycle)
    frozen, permanent = small_manifests
    sf, sp = PatchSource(frozen), PatchSource(permanent)
    for i in range(4):
        f, fm = sf.batch([i])
        p, pm = sp.batch([i])
        ours = train_step(state, f, p, fm, pm).losses.as_dict()
        theirs = ref.step(f, p)
        for k, v in theirs.items():
            assert ours[k] == v, k
    for k, net in bundle.networks().items():
        assert same(snapshot(net), snapshot(state.bundle.networks()[k]))


def test_unit_seg_weight_totals_are_sums(small_manifests):
    cfg = toy_cfg()
    state = TrainState(ModelBundle.create(cfg.generator, cfg.discriminator, 0), cfg)
    r = train_step(state, *first_batch(small_manifests, cfg)).losses
    f32 = np.float32
    d = (f32(r.d_p_gan) + f32(r.d_p_gan_seg)) + (f32(r.d_f_gan) + f32(r.d_f_gan_seg))
    g = (f32(1.0) * ((f32(r.g_p_gan) + f32(r.g_p_gan_seg)) + (f32(r.g_f_gan) + f32(r.g_f_gan_seg)))
         + f32(100.0) * (f32(r.cycle) + f32(r.cycle_seg)))
    assert r.d_total == pytest.approx(float(d), rel=1e-6)
    assert r.g_total == pytest.approx(float(g), rel=1e-6)


def test_segmented_fill():
    x = torch.zeros(1, 3, 4, 4)
    m = torch.zeros(1, 1, 4, 4, dtype=torch.bool)
    m[..., :2, :] = True
    s = segmented(x, m)
    assert torch.all(s[..., :2, :] == 0) and torch.all(s[..., 2:, :] == 1.0)


def test_steps_per_epoch():
    assert steps_per_epoch(10, 10, 1) == 10
    assert steps_per_epoch(12, 10, 1) == 10
    assert steps_per_epoch(10, 25, 4) == 2


def test_epoch_order_seeded():
    assert np.array_equal(epoch_order(20, 1, 0, 0), epoch_order(20, 1, 0, 0))
    assert not np.array_equal(epoch_order(20, 1, 0, 0), epoch_order(20, 1, 1, 0))
    assert not np.array_equal(epoch_order(20, 1, 0, 0), epoch_order(20, 1, 0, 1))
    assert sorted(epoch_order(20, 1, 3, 1)) == list(range(20))


def log_lines(path):
    return [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]


def test_runs_are_deterministic_and_resumable(small_manifests, tmp_path):
    frozen, permanent = small_manifests
    cfg = toy_cfg(epochs=2, checkpoint_interval=3)
    a = train(frozen, permanent, cfg, out_dir=tmp_path / "a")
    train(frozen, permanent, cfg, out_dir=tmp_path / "b")
    assert len(a.reports) == 12
    assert log_lines(tmp_path / "a" / "train.log") == log_lines(tmp_path / "b" / "train.log")
    assert (tmp_path / "a" / "final.ckpt").exists()

    train(frozen, permanent, cfg, out_dir=tmp_path / "c", stop_after=7)
    assert len(log_lines(tmp_path / "c" / "train.log")) == 7
    assert not (tmp_path / "c" / "final.ckpt").exists()
    # resume from step 6 (interval 3): step 7 is recomputed and the log appended
    ckpt = load_checkpoint(tmp_path / "c" / "step_000006.ckpt")
    lines = log_lines(tmp_path / "c" / "train.log")[:6]
    (tmp_path / "c" / "train.log").write_text("\n".join(lines) + "\n")
    train(frozen, permanent, ckpt.train_config, resume=ckpt, out_dir=tmp_path / "c")
    assert log_lines(tmp_path / "c" / "train.log") == log_lines(tmp_path / "a" / "train.log")


def test_checkpoint_round_trip(small_manifests, tmp_path):
    cfg = toy_cfg()
    state = TrainState(ModelBundle.create(cfg.generator, cfg.discriminator, 0), cfg)
    train_step(state, *first_batch(small_manifests, cfg))
    path = save_checkpoint(tmp_path / "x.ckpt", state)
    ck = load_checkpoint(path)
    assert ck.bundle.step == 1
    assert ck.train_config == cfg
    for k, net in state.bundle.networks().items():
        assert same(snapshot(net), snapshot(ck.bundle.networks()[k]))
    px = np.random.default_rng(0).integers(0, 256, (2, 64, 64, 3), dtype=np.uint8)
    assert np.array_equal(generate(state.bundle, px), generate(ck.bundle, px))


def test_checkpoint_version_and_truncation(small_manifests, tmp_path):
    cfg = toy_cfg()
    state = TrainState(ModelBundle.create(cfg.generator, cfg.discriminator, 0), cfg)
    raw = save_checkpoint(tmp_path / "x.ckpt", state).read_bytes()
    magic_end = raw.index(b"\n") + 1
    (tmp_path / "v.ckpt").write_bytes(raw[:magic_end] + b"99" + raw[raw.index(b"\n", magic_end):])
    with pytest.raises(CheckpointVersionError, match="99"):
        load_checkpoint(tmp_path / "v.ckpt")
    (tmp_path / "t.ckpt").write_bytes(raw[:len(raw) // 2])
    with pytest.raises(CheckpointIntegrityError):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "n.ckpt").write_bytes(b"hello")
    with pytest.raises(CheckpointIntegrityError):
        load_checkpoint(tmp_path / "n.ckpt")


class Identity(nn.Module):
    def __init__(self):
        super().__init__()
        self.dummy = nn.Parameter(torch.zeros(()))

    def forward(self, x):
        return x


def test_generate_identity_double_round_trips_pixels():
    cfg = toy_cfg()
    bundle = ModelBundle.create(cfg.generator, cfg.discriminator, 0)
    bundle.g_p = Identity()
    px = np.random.default_rng(1).integers(0, 256, (3, 64, 64, 3), dtype=np.uint8)
    assert np.array_equal(generate(bundle, px), px)


def test_generate_deterministic_and_checks_shape():
    cfg = toy_cfg()
    bundle = ModelBundle.create(cfg.generator, cfg.discriminator, 0)
    px = np.random.default_rng(1).integers(0, 256, (2, 64, 64, 3), dtype=np.uint8)
    out = generate(bundle, px)
    assert out.shape == px.shape and out.dtype == np.uint8
    assert np.array_equal(out, generate(bundle, px))
    assert bundle.g_p.training  # mode restored
    with pytest.raises(ValueError, match="64x64x3"):
        generate(bundle, np.zeros((1, 32, 32, 3), np.uint8))


def test_run_config_collects_all_errors():
    with pytest.raises(ConfigError) as err:
        parse_run_config({"train": {"epochs": 0, "batch_size": -1}, "loss": {"lambda_seg": -1}})
    msgs = err.value.errors
    assert any("train.epochs" in m for m in msgs)
    assert any("train.batch_size" in m for m in msgs)
    assert any("loss.lambda_seg" in m for m in msgs)
    with pytest.raises(ConfigError, match="bogus"):
        parse_run_config({"bogus": {}})
    with pytest.raises(ConfigError, match="train.lr"):
        parse_run_config({"train": {"lr": 1}})


def test_run_config_toy_profile_and_overrides():
    rc = parse_run_config({"loss": {"lambda_seg": 0.0}, "train": {"seed": 4}}, toy=True)
    assert rc.train.generator.image_size == 64
    assert rc.train.loss.lambda_seg == 0.0 and rc.train.loss.lambda_cycle == 100.0
    assert rc.train.seed == 4
    assert TrainConfig.from_dict(rc.train.to_dict()) == rc.train
