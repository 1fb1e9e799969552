"""Joint pretraining loop: batch assembly, SGD with momentum, checkpoints.

One batch draws `batch_size` distinct videos; each contributes a speed
triplet for the MIP branch and a cross-speed pair for the CIP branch. All
clips of a step pass through the encoder as a single batch, the branch
losses are combined per the configured weighting, and one SGD step updates
encoder and head parameters jointly. Everything is keyed off (seed, epoch,
step), so runs replay bit-exactly.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import data as dsets
from . import losses as objectives
from . import model as nets
from .autodiff import Tensor
from .losses import LossConfig, LossValue, make_loss_value
from .model import ArchConfig, ParameterStore
from .seeding import derive_seed, substream

BRANCH_MODES = ("MIP_ONLY", "CIP_ONLY", "JOINT")
CIP_SPEED_MODES = ("DIFFERENT", "SAME", "RANDOM")
VIEW_MODES = ("RESIDUAL", "LONG_RES")

METRICS_HEADER = "epoch,step,mip_loss,cip_loss,total_loss,lr"


@dataclass
class TrainConfig:
    batch_size: int = 16
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 20
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    branch_mode: str = "JOINT"
    cip_speed_mode: str = "DIFFERENT"
    t: int = 4
    view_mode: str = "LONG_RES"
    clip_len: int = 16
    augment: bool = True
    center_sampling: bool = False
    save_every: int = 10  # periodic checkpoint interval in epochs; 0 disables

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (CIP needs a negative)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.t < 1:
            raise ValueError("t must be >= 1")
        if self.branch_mode not in BRANCH_MODES:
            raise ValueError(f"branch_mode must be one of {BRANCH_MODES}")
        if self.cip_speed_mode not in CIP_SPEED_MODES:
            raise ValueError(f"cip_speed_mode must be one of {CIP_SPEED_MODES}")
        if self.view_mode not in VIEW_MODES:
            raise ValueError(f"view_mode must be one of {VIEW_MODES}")

    @property
    def effective_t(self) -> int:
        # the plain-residual view is the gap-1 special case
        return 1 if self.view_mode == "RESIDUAL" else self.t

    @property
    def effective_alpha(self) -> float:
        if self.branch_mode == "MIP_ONLY":
            return 1.0
        if self.branch_mode == "CIP_ONLY":
            return 0.0
        return self.loss.alpha


@dataclass
class Checkpoint:
    params: ParameterStore
    epoch: int
    history: list[LossValue]  # per-epoch means
    fingerprint: str


class NonFiniteGradient(RuntimeError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the last good checkpoint."""

    def __init__(self, message: str, checkpoint: Checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


def lr_schedule(base: float, batch_size: int) -> float:
    """Linear batch scaling: base * b / 32.

    The base rate is a human-chosen decimal, so it is taken at its decimal
    face value and the product rounds once; naive float evaluation would
    return 0.08750000000000001 for b=28 instead of 0.0875.
    """
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    return float(Fraction(str(base)) * batch_size / 32)


def config_fingerprint(cfg: TrainConfig, arch: ArchConfig) -> str:
    return hashlib.blake2b(repr((cfg, arch)).encode(), digest_size=8).hexdigest()


# ---- batch assembly ------------------------------------------------------------


def make_batch(store: dsets.DatasetStore, cfg: TrainConfig, epoch: int, step: int):
    """Samples per-video triplets/pairs for one step; pure in (seed, epoch, step)."""
    n = len(store)
    if n < cfg.batch_size:
        raise ValueError(
            f"dataset has {n} videos, batch size {cfg.batch_size} needs more")
    order = substream(cfg.seed, "order", epoch).permutation(n)
    picks = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
    if len(picks) < cfg.batch_size:
        raise ValueError(f"epoch {epoch} has no step {step}")
    t = cfg.effective_t
    batch = []
    for idx in picks:
        video = store.records[int(idx)]
        triplet = pair = None
        if cfg.branch_mode != "CIP_ONLY":
            triplet = dsets.sample_mip_triplet(
                video, derive_seed(cfg.seed, "mip", epoch, step, video.id),
                length=cfg.clip_len, t=t, center=cfg.center_sampling)
        if cfg.branch_mode != "MIP_ONLY":
            pair = dsets.sample_cip_pair(
                video, derive_seed(cfg.seed, "cip", epoch, step, video.id),
                length=cfg.clip_len, t=t,
                speed_mode=cfg.cip_speed_mode.lower(),
                center=cfg.center_sampling)
        if cfg.augment:
            if triplet is not None:
                triplet = dsets.MipTriplet(*(
                    dsets.augment(c, derive_seed(cfg.seed, "aug", epoch, step,
                                                 video.id, k))
                    for k, c in enumerate(
                        (triplet.rgb, triplet.lres_same, triplet.lres_diff))))
            if pair is not None:
                pair = dsets.CipPair(*(
                    dsets.augment(c, derive_seed(cfg.seed, "aug", epoch, step,
                                                 video.id, 3 + k))
                    for k, c in enumerate((pair.rgb, pair.lres))))
        batch.append((triplet, pair))
    return batch


def _stack(clips) -> np.ndarray:
    return np.stack([c.data for c in clips])


# ---- optimization -----------------------------------------------------------------


def sgd_step(store: ParameterStore, lr: float, momentum: float,
             weight_decay: float) -> None:
    """v <- momentum*v + grad + wd*param; param <- param - lr*v.

    Parameters with no gradient (disconnected from this step's objective)
    are left untouched.
    """
    for name in store.trainable():
        tensor = store.entries[name]
        grad = tensor.grad
        if grad is None:
            continue
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradient(name)
        update = grad if weight_decay == 0.0 else grad + weight_decay * tensor.data
        vel = store.velocity.get(name)
        vel = update if vel is None else momentum * vel + update
        store.velocity[name] = vel
        store.entries[name] = Tensor(tensor.data - lr * vel, requires_grad=True)


def train_step(params: ParameterStore, batch, cfg: TrainConfig,
               arch: ArchConfig, lr: float) -> LossValue:
    b = cfg.batch_size
    groups: list[np.ndarray] = []
    if cfg.branch_mode != "CIP_ONLY":
        triplets = [trip for trip, _ in batch]
        groups += [_stack([t.rgb for t in triplets]),
                   _stack([t.lres_same for t in triplets]),
                   _stack([t.lres_diff for t in triplets])]
    if cfg.branch_mode != "MIP_ONLY":
        pairs = [pair for _, pair in batch]
        groups += [_stack([p.rgb for p in pairs]),
                   _stack([p.lres for p in pairs])]
    feats = nets.encode(params, np.concatenate(groups), arch, training=True)

    mip_value = cip_value = None
    offset = 0
    if cfg.branch_mode != "CIP_ONLY":
        z = nets.project_mip(params, feats.rows(0, 3 * b), arch)
        mip_value = objectives.mip_loss(z.rows(0, b), z.rows(b, 2 * b),
                                        z.rows(2 * b, 3 * b), cfg.loss.gamma)
        offset = 3 * b
    if cfg.branch_mode != "MIP_ONLY":
        z = nets.project_cip(params, feats.rows(offset, offset + 2 * b), arch)
        cip_value = objectives.cip_loss_batch(z.rows(0, b), z.rows(b, 2 * b),
                                              cfg.loss.tau)

    alpha = cfg.effective_alpha
    if cfg.branch_mode == "MIP_ONLY":
        total = mip_value
    elif cfg.branch_mode == "CIP_ONLY":
        total = cip_value
    else:
        total = objectives.combined_loss(mip_value, cip_value, alpha)

    params.zero_grad()
    total.backward()
    sgd_step(params, lr, cfg.momentum, cfg.weight_decay)
    return make_loss_value(0.0 if mip_value is None else float(mip_value),
                           0.0 if cip_value is None else float(cip_value),
                           alpha)


def _format_metric(x: float) -> str:
    return format(x, ".6g")


def pretrain(store: dsets.DatasetStore, cfg: TrainConfig,
             arch: ArchConfig = ArchConfig(), out_dir=None,
             progress=None) -> Checkpoint:
    """Runs the full pretraining schedule and returns the final checkpoint.

    With `out_dir` set, writes the step metrics CSV, periodic checkpoints
    (every `save_every` epochs) and `checkpoint_final.mcpc`. If the loss
    diverges, raises TrainingDiverged carrying the last epoch-end snapshot.
    """
    params = nets.init_params(derive_seed(cfg.seed, "init"), arch)
    lr = lr_schedule(cfg.base_lr, cfg.batch_size)
    steps_per_epoch = len(store) // cfg.batch_size
    fingerprint = config_fingerprint(cfg, arch)
    history: list[LossValue] = []
    metrics = io.StringIO()
    metrics.write(METRICS_HEADER + "\n")
    last_good = params.snapshot()

    def flush_outputs():
        if out_dir is None:
            return
        (out_dir / "metrics.csv").write_text(metrics.getvalue())

    try:
        for epoch in range(cfg.epochs):
            sums = np.zeros(3)
            for step in range(steps_per_epoch):
                batch = make_batch(store, cfg, epoch, step)
                lv = train_step(params, batch, cfg, arch, lr)
                if not np.isfinite(lv.total):
                    raise TrainingDiverged(
                        f"loss became non-finite at epoch {epoch} step {step}",
                        Checkpoint(last_good, epoch, history, fingerprint))
                sums += (lv.mip, lv.cip, lv.total)
                metrics.write(f"{epoch},{step},{_format_metric(lv.mip)},"
                              f"{_format_metric(lv.cip)},"
                              f"{_format_metric(lv.total)},"
                              f"{_format_metric(lr)}\n")
            mean = sums / steps_per_epoch
            history.append(LossValue(total=mean[2], mip=mean[0], cip=mean[1]))
            last_good = params.snapshot()
            if progress is not None:
                progress(epoch, history[-1])
            if out_dir is not None and cfg.save_every and \
                    (epoch + 1) % cfg.save_every == 0 and epoch + 1 < cfg.epochs:
                nets.save_params(params, out_dir / f"checkpoint_ep{epoch + 1:03d}.mcpc")
    except NonFiniteGradient as exc:
        raise TrainingDiverged(
            str(exc), Checkpoint(last_good, len(history), history, fingerprint)
        ) from exc
    finally:
        flush_outputs()
    if out_dir is not None:
        nets.save_params(params, out_dir / "checkpoint_final.mcpc")
    return Checkpoint(params, cfg.epochs, history, fingerprint)
