import numpy as np
import pytest

from mcp import data, model, train
from mcp.autodiff import Tensor
from mcp.losses import LossConfig

TINY_ARCH = model.ArchConfig(channels=(4, 6, 8, 8), proj_hidden=8, proj_dim=8)


def tiny_config(**kw):
    defaults = dict(batch_size=4, epochs=2, seed=13, clip_len=8)
    defaults.update(kw)
    return train.TrainConfig(**defaults)


@pytest.fixture(scope="module")
def corpus():
    return data.generate_synthetic_dataset(4, 3, 64, 32, seed=20)


# ---- lr schedule -------------------------------------------------------


def test_lr_schedule_values():
    assert train.lr_schedule(0.1, 32) == 0.1
    assert train.lr_schedule(0.1, 28) == 0.0875
    assert train.lr_schedule(0.1, 256) == 0.8


def test_lr_schedule_rejects_bad_batch():
    with pytest.raises(ValueError):
        train.lr_schedule(0.1, 0)


# ---- sgd ----------------------------------------------------------------


def _scalar_store(value):
    store = model.ParameterStore()
    store.add("p", np.array([value], np.float64))
    return store


def test_sgd_zero_grad_zero_decay_no_change():
    store = _scalar_store(1.5)
    store["p"].grad = np.zeros(1)
    train.sgd_step(store, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert store["p"].data[0] == 1.5


def test_sgd_plain_step():
    store = _scalar_store(1.0)
    store["p"].grad = np.array([0.5])
    train.sgd_step(store, lr=0.1, momentum=0.0, weight_decay=0.0)
    assert abs(store["p"].data[0] - 0.95) < 1e-15


def test_sgd_momentum_accumulates():
    store = _scalar_store(1.0)
    for want in (0.9, 0.71):  # drops 0.1 then 0.19
        store["p"].grad = np.array([1.0])
        train.sgd_step(store, lr=0.1, momentum=0.9, weight_decay=0.0)
        assert abs(store["p"].data[0] - want) < 1e-12


def test_sgd_skips_parameters_without_gradient():
    store = _scalar_store(2.0)
    store.add("q", np.array([3.0]))
    store["p"].grad = np.array([1.0])
    train.sgd_step(store, lr=0.1, momentum=0.0, weight_decay=1e-2)
    assert store["q"].data[0] == 3.0


def test_sgd_rejects_nonfinite_gradient():
    store = _scalar_store(1.0)
    store["p"].grad = np.array([np.nan])
    with pytest.raises(train.NonFiniteGradient, match="'p'"):
        train.sgd_step(store, lr=0.1, momentum=0.0, weight_decay=0.0)


# ---- batches ---------------------------------------------------------------


def test_make_batch_videos_distinct_and_modes(corpus):
    cfg = tiny_config()
    seen = set()
    for step in range(len(corpus) // cfg.batch_size):
        batch = train.make_batch(corpus, cfg, epoch=0, step=step)
        ids = [trip.rgb.source_id for trip, _ in batch]
        assert len(set(ids)) == cfg.batch_size
        assert not seen.intersection(ids)  # without replacement within epoch
        seen.update(ids)
        for trip, pair in batch:
            assert trip.rgb.speed == trip.lres_same.speed != trip.lres_diff.speed
            assert pair.rgb.speed != pair.lres.speed


def test_make_batch_same_speed_mode(corpus):
    cfg = tiny_config(cip_speed_mode="SAME")
    batch = train.make_batch(corpus, cfg, epoch=0, step=0)
    assert all(pair.rgb.speed == pair.lres.speed for _, pair in batch)


def test_make_batch_deterministic(corpus):
    cfg = tiny_config()
    a = train.make_batch(corpus, cfg, epoch=1, step=2)
    b = train.make_batch(corpus, cfg, epoch=1, step=2)
    for (ta, pa), (tb, pb) in zip(a, b):
        assert np.array_equal(ta.rgb.data, tb.rgb.data)
        assert np.array_equal(pa.lres.data, pb.lres.data)


def test_make_batch_rejects_small_dataset(corpus):
    cfg = tiny_config(batch_size=32)
    with pytest.raises(ValueError, match="batch size"):
        train.make_batch(corpus, cfg, epoch=0, step=0)


def test_make_batch_residual_view_uses_gap_one(corpus):
    cfg = tiny_config(view_mode="RESIDUAL", augment=False)
    batch = train.make_batch(corpus, cfg, epoch=0, step=0)
    trip = batch[0][0]
    video = next(r for r in corpus.records if r.id == trip.rgb.source_id)
    s, start = trip.lres_same.speed, trip.lres_same.start
    acc = video.frames[start:start + s * 8 + 1:s].astype(np.int16)  # 8+1 frames
    want = np.abs(acc[:8] - acc[1:9]) / np.float32(255.0)
    assert np.array_equal(trip.lres_same.data, want.astype(np.float32))


# ---- pretrain loop --------------------------------------------------------------


def test_pretrain_mip_only_isolates_cip_head(corpus):
    cfg = tiny_config(branch_mode="MIP_ONLY", epochs=1)
    init = model.init_params(train.derive_seed(cfg.seed, "init"), TINY_ARCH)
    ckpt = train.pretrain(corpus, cfg, TINY_ARCH)
    for name in ckpt.params.names():
        same = np.array_equal(ckpt.params[name].data, init[name].data)
        if name.startswith("cip."):
            assert same, f"{name} should be untouched in MIP_ONLY"
        if name.startswith(("enc.conv", "mip.fc1.w")):
            assert not same, f"{name} should have trained"
    assert all(lv.cip == 0.0 for lv in ckpt.history)


def test_pretrain_cip_only_isolates_mip_head(corpus):
    cfg = tiny_config(branch_mode="CIP_ONLY", epochs=1)
    init = model.init_params(train.derive_seed(cfg.seed, "init"), TINY_ARCH)
    ckpt = train.pretrain(corpus, cfg, TINY_ARCH)
    for name in ckpt.params.names():
        if name.startswith("mip."):
            assert np.array_equal(ckpt.params[name].data, init[name].data)
    assert all(lv.mip == 0.0 for lv in ckpt.history)


def test_pretrain_deterministic_history(corpus):
    cfg = tiny_config()
    a = train.pretrain(corpus, cfg, TINY_ARCH)
    b = train.pretrain(corpus, cfg, TINY_ARCH)
    assert a.history == b.history
    for name in a.params.names():
        assert np.array_equal(a.params[name].data, b.params[name].data)


def test_pretrain_bookkeeping_identity(corpus):
    cfg = tiny_config()
    ckpt = train.pretrain(corpus, cfg, TINY_ARCH)
    for lv in ckpt.history:
        assert abs(lv.total - (0.5 * lv.mip + 0.5 * lv.cip)) < 1e-6


def test_pretrain_writes_outputs(tmp_path, corpus):
    cfg = tiny_config(save_every=1)
    ckpt = train.pretrain(corpus, cfg, TINY_ARCH, out_dir=tmp_path)
    metrics = (tmp_path / "metrics.csv").read_text().splitlines()
    assert metrics[0] == train.METRICS_HEADER
    steps = len(corpus) // cfg.batch_size
    assert len(metrics) == 1 + cfg.epochs * steps
    assert (tmp_path / "checkpoint_final.mcpc").exists()
    assert (tmp_path / "checkpoint_ep001.mcpc").exists()
    loaded = model.load_params(tmp_path / "checkpoint_final.mcpc")
    for name in ckpt.params.names():
        assert np.allclose(loaded[name].data, ckpt.params[name].data,
                           rtol=0, atol=0)


def test_pretrain_metrics_byte_identical(tmp_path, corpus):
    cfg = tiny_config()
    d1, d2 = tmp_path / "a", tmp_path / "b"
    d1.mkdir(), d2.mkdir()
    train.pretrain(corpus, cfg, TINY_ARCH, out_dir=d1)
    train.pretrain(corpus, cfg, TINY_ARCH, out_dir=d2)
    assert (d1 / "metrics.csv").read_bytes() == (d2 / "metrics.csv").read_bytes()
    assert (d1 / "checkpoint_final.mcpc").read_bytes() == \
        (d2 / "checkpoint_final.mcpc").read_bytes()


def test_pretrain_divergence_keeps_last_good(corpus, monkeypatch):
    cfg = tiny_config(epochs=3)
    calls = {"n": 0}
    real = train.train_step

    def sabotage(params, batch, cfg_, arch, lr):
        calls["n"] += 1
        if calls["n"] > len(corpus) // cfg.batch_size:  # second epoch
            from mcp.losses import LossValue
            return LossValue(total=float("nan"), mip=0.0, cip=0.0)
        return real(params, batch, cfg_, arch, lr)

    monkeypatch.setattr(train, "train_step", sabotage)
    with pytest.raises(train.TrainingDiverged) as info:
        train.pretrain(corpus, cfg, TINY_ARCH)
    assert info.value.checkpoint.epoch == 1
    assert len(info.value.checkpoint.history) == 1


def test_config_validation():
    with pytest.raises(ValueError):
        train.TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        train.TrainConfig(branch_mode="BOTH")
    with pytest.raises(ValueError):
        train.TrainConfig(view_mode="OPTICAL_FLOW")
    cfg = train.TrainConfig(view_mode="RESIDUAL", t=4)
    assert cfg.effective_t == 1
    assert train.TrainConfig(branch_mode="MIP_ONLY").effective_alpha == 1.0
    assert train.TrainConfig(branch_mode="CIP_ONLY").effective_alpha == 0.0
