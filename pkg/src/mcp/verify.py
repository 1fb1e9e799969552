"""Fast self-checks: gradient oracles, loss anchors, view identities, formats.

Meant as a pre-flight gate (`mcp verify`): every check runs in seconds and
has an independent expected value. The `corrupt` hook deliberately breaks a
named check so harness sensitivity itself can be verified.
"""

from __future__ import annotations

import math
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as dsets
from . import evaluate, losses, model, train
from .autodiff import Tensor
from .seeding import derive_seed, substream

_TINY_ARCH = model.ArchConfig(channels=(4, 6, 8, 8), proj_hidden=8, proj_dim=8)


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def _naive_cip(f_r, bank, pos, tau):
    sims = [float(np.dot(f_r, b)) for b in bank]
    den = sum(math.exp(s / tau) for s in sims)
    return -math.log(math.exp(sims[pos] / tau) / den)


def _check_op_gradients(corrupt: bool) -> CheckResult:
    rng = substream(1, "verify-grads")
    worst = 0.0
    x = Tensor(rng.random((1, 1, 2, 2, 2)) - 0.5)
    w = Tensor(rng.random((2, 1, 2, 2, 2)) - 0.5, requires_grad=True)
    worst = max(worst, ad.grad_check(
        lambda: (ad.conv3d(x, w) * ad.conv3d(x, w)).sum(), [w]))
    a = Tensor(rng.random((4, 4)) - 0.5, requires_grad=True)
    b = Tensor(rng.random(4) - 0.5, requires_grad=True)
    xs = Tensor(rng.random((4, 4)))
    worst = max(worst, ad.grad_check(
        lambda: (ad.affine(xs, a, b) * ad.affine(xs, a, b)).sum(), [a, b]))
    if worst >= 1e-6:
        return CheckResult("gradients", False,
                           f"linear/conv gradcheck err {worst:.2e} >= 1e-6")
    vol = Tensor(rng.random((2, 3, 4, 4, 2)) + 0.05, requires_grad=True)
    gamma = Tensor(rng.random(2) + 0.5, requires_grad=True)
    beta = Tensor(rng.random(2) - 0.5, requires_grad=True)
    worst2 = ad.grad_check(
        lambda: (ad.batchnorm_cl(vol, gamma, beta, None, None, True)[0]
                 * vol).sum(), [vol, gamma, beta])
    z = Tensor(rng.random((3, 5)) + 0.1, requires_grad=True)
    mix = rng.random((3, 5))
    worst2 = max(worst2, ad.grad_check(
        lambda: (ad.l2_normalize(z) * mix).sum(), [z], seed=3))
    if corrupt:
        worst2 += 1e-2  # simulated analytic/numeric disagreement
    ok = worst2 < 1e-5
    return CheckResult("gradients", ok,
                       f"max rel err {max(worst, worst2):.2e}"
                       + ("" if ok else " >= 1e-5"))


def _check_loss_oracles(corrupt: bool) -> CheckResult:
    rng = substream(2, "verify-loss")
    worst = 0.0
    for _ in range(100):
        vecs = rng.normal(size=(3, 8))
        vecs /= np.sqrt((vecs * vecs).sum(axis=1, keepdims=True))
        f_r, f_l1, f_l2 = vecs
        naive = max(2.0 - (float(np.dot(f_r, f_l1)) - float(np.dot(f_r, f_l2))), 0.0)
        worst = max(worst, abs(float(losses.mip_loss(f_r, f_l1, f_l2)) - naive))
        bank = rng.normal(size=(6, 8))
        bank /= np.sqrt((bank * bank).sum(axis=1, keepdims=True))
        pos = int(rng.integers(0, 6))
        worst = max(worst, abs(float(losses.cip_loss(f_r, bank, pos, 0.1))
                               - _naive_cip(f_r, bank, pos, 0.1)))
    anchor = np.array([1.0, 0.0])
    two_bank = [np.array([0.0, 1.0]), np.array([0.0, -1.0])]
    worst = max(worst, abs(float(losses.cip_loss(anchor, two_bank, 0, 0.1))
                           - math.log(2.0)))
    worst = max(worst, abs(float(losses.mip_loss(anchor, two_bank[0],
                                                 two_bank[0])) - 2.0))
    if corrupt:
        worst += 1e-3
    ok = worst < 1e-10
    return CheckResult("loss-oracles", ok, f"max deviation {worst:.2e}"
                       + ("" if ok else " >= 1e-10"))


def _check_residual_identity(corrupt: bool) -> CheckResult:
    store = dsets.generate_synthetic_dataset(3, 2, 64, 32, seed=101)
    for rec in store.records:
        a = dsets.residual_clip(rec.frames, 5, 16).data
        b = dsets.long_range_residual_clip(rec.frames, 5, 16, 1).data
        if corrupt:
            b = b + 1e-6
        if not np.array_equal(a, b):
            return CheckResult("residual-identity", False,
                               f"gap-1 mismatch on video {rec.id}")
    return CheckResult("residual-identity", True,
                       f"gap-1 identity exact on {len(store)} videos")


def _check_sampler_constraints(corrupt: bool) -> CheckResult:
    store = dsets.generate_synthetic_dataset(2, 2, 64, 32, seed=102)
    rec = store.records[0]
    same_count = 0
    for i in range(300):
        trip = dsets.sample_mip_triplet(rec, derive_seed(103, i))
        if trip.rgb.speed != trip.lres_same.speed or \
                trip.rgb.speed == trip.lres_diff.speed:
            return CheckResult("sampler-constraints", False,
                               f"triplet speed constraint violated at draw {i}")
        pair = dsets.sample_cip_pair(rec, derive_seed(104, i))
        if pair.rgb.speed == pair.lres.speed:
            return CheckResult("sampler-constraints", False,
                               f"pair speed constraint violated at draw {i}")
        same = dsets.sample_cip_pair(rec, derive_seed(105, i), speed_mode="same")
        if same.rgb.speed != same.lres.speed:
            return CheckResult("sampler-constraints", False,
                               f"same-speed override violated at draw {i}")
        rand = dsets.sample_cip_pair(rec, derive_seed(106, i), speed_mode="random")
        same_count += rand.rgb.speed == rand.lres.speed
    if corrupt:
        same_count = 0
    if not 0.40 <= same_count / 300 <= 0.60:
        return CheckResult("sampler-constraints", False,
                           f"random mode equal-speed fraction {same_count / 300:.2f}")
    return CheckResult("sampler-constraints", True, "900 draws, zero violations")


def _check_lr_rule(corrupt: bool) -> CheckResult:
    got = (train.lr_schedule(0.1, 32), train.lr_schedule(0.1, 28),
           train.lr_schedule(0.1, 256))
    if corrupt:
        got = (got[0] + 1e-9, got[1], got[2])
    ok = got == (0.1, 0.0875, 0.8)
    return CheckResult("learning-rate-rule", ok, f"(b=32,28,256) -> {got}")


def _check_augment_range(corrupt: bool) -> CheckResult:
    rng = substream(3, "verify-augment")
    clip = dsets.Clip(rng.random((8, 16, 16, 3)).astype(np.float32) , dsets.RGB,
                      1, 0, 0)
    for i in range(100):
        out = dsets.augment(clip, derive_seed(107, i))
        low, high = float(out.data.min()), float(out.data.max())
        if corrupt:
            high = 1.5
        if low < 0.0 or high > 1.0:
            return CheckResult("augment-range", False,
                               f"values escaped [0,1] at draw {i}: [{low}, {high}]")
    flip = dsets.AugmentParams(0, 0, 16, 16, True, (1.0, 1.0, 1.0))
    twice = dsets.apply_augment(dsets.apply_augment(clip, flip), flip)
    if not np.array_equal(twice.data, clip.data):
        return CheckResult("augment-range", False, "flip is not an involution")
    return CheckResult("augment-range", True, "100 draws in range; flip involutive")


def _check_file_roundtrip(corrupt: bool) -> CheckResult:
    store = dsets.generate_synthetic_dataset(2, 1, 48, 32, seed=108)
    params = model.init_params(109, _TINY_ARCH)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        dsets.save_dataset(store, tmp / "a.mcpv")
        dsets.save_dataset(dsets.load_dataset(tmp / "a.mcpv"), tmp / "b.mcpv")
        data_ok = (tmp / "a.mcpv").read_bytes() == (tmp / "b.mcpv").read_bytes()
        model.save_params(params, tmp / "a.mcpc")
        model.save_params(model.load_params(tmp / "a.mcpc"), tmp / "b.mcpc")
        ckpt_ok = (tmp / "a.mcpc").read_bytes() == (tmp / "b.mcpc").read_bytes()
    if corrupt:
        ckpt_ok = False
    ok = data_ok and ckpt_ok
    return CheckResult("file-roundtrip", ok,
                       f"dataset {'ok' if data_ok else 'MISMATCH'}, "
                       f"checkpoint {'ok' if ckpt_ok else 'MISMATCH'}")


def _check_determinism(corrupt: bool) -> CheckResult:
    store = dsets.generate_synthetic_dataset(2, 4, 64, 32, seed=110)
    cfg = train.TrainConfig(batch_size=4, epochs=1, seed=111, clip_len=8)
    a = train.pretrain(store, cfg, _TINY_ARCH)
    b = train.pretrain(store, cfg, _TINY_ARCH)
    histories_equal = a.history == b.history
    params_equal = all(np.array_equal(a.params[n].data, b.params[n].data)
                       for n in a.params.names())
    if corrupt:
        params_equal = False
    ok = histories_equal and params_equal
    return CheckResult("determinism", ok,
                       "bit-identical replay" if ok else "replay diverged")


_CHECKS = (
    ("gradients", _check_op_gradients),
    ("loss-oracles", _check_loss_oracles),
    ("residual-identity", _check_residual_identity),
    ("sampler-constraints", _check_sampler_constraints),
    ("learning-rate-rule", _check_lr_rule),
    ("augment-range", _check_augment_range),
    ("file-roundtrip", _check_file_roundtrip),
    ("determinism", _check_determinism),
)


def check_names() -> list[str]:
    return [name for name, _ in _CHECKS]


def run_checks(corrupt: str | None = None) -> list[CheckResult]:
    if corrupt is not None and corrupt not in check_names():
        raise ValueError(f"unknown check {corrupt!r}; "
                         f"choices: {', '.join(check_names())}")
    return [fn(corrupt == name) for name, fn in _CHECKS]
