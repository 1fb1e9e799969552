import numpy as np
import pytest

from mcp import autodiff as ad
from mcp import model
from mcp.autodiff import Tensor
from mcp.seeding import substream

ARCH = model.ArchConfig()
TINY = model.ArchConfig(channels=(4, 4, 6, 8), proj_hidden=8, proj_dim=8)


def rand_clips(rng, n=2, t=8, hw=8, dtype=np.float32):
    return rng.random((n, t, hw, hw, 3)).astype(dtype)


# ---- init -------------------------------------------------------------------


def test_init_deterministic():
    a = model.init_params(3, ARCH)
    b = model.init_params(3, ARCH)
    assert a.names() == b.names()
    for name in a.names():
        assert np.array_equal(a[name].data, b[name].data)


def test_init_finite_and_nondegenerate():
    store = model.init_params(1, ARCH)
    for name in store.names():
        assert np.all(np.isfinite(store[name].data))
    for name in store.trainable():
        if name.endswith(".w"):
            assert np.any(store[name].data != 0.0)


def test_init_weight_scale_matches_fan_in():
    store = model.init_params(2, ARCH)
    w = store["enc.conv4.w"].data  # 27*32 fan-in, 55k values
    fan_in = 27 * ARCH.channels[2]
    assert abs(w.std() - np.sqrt(2.0 / fan_in)) < 0.2 * np.sqrt(2.0 / fan_in)


def test_store_rejects_duplicate_names():
    store = model.ParameterStore()
    store.add("x", np.zeros(2))
    with pytest.raises(ValueError, match="duplicate"):
        store.add("x", np.zeros(2))


# ---- encoder ------------------------------------------------------------------


def test_encode_zero_clip_is_finite():
    store = model.init_params(4, ARCH)
    feats = model.encode(store, np.zeros((2, 16, 32, 32, 3), np.float32),
                         ARCH, training=False)
    assert feats.data.shape == (2, ARCH.feature_dim)
    assert np.all(np.isfinite(feats.data))


def test_encode_deterministic():
    rng = substream(41)
    clips = rand_clips(rng)
    store = model.init_params(5, ARCH)
    a = model.encode(store, clips, ARCH, training=False)
    b = model.encode(store, clips, ARCH, training=False)
    assert np.array_equal(a.data, b.data)


def test_encode_identical_clips_identical_features():
    rng = substream(42)
    one = rand_clips(rng, n=1)
    clips = np.concatenate([one, one], axis=0)
    store = model.init_params(6, ARCH)
    for training in (False, True):
        feats = model.encode(store, clips, ARCH, training=training,
                             update_stats=False)
        assert np.array_equal(feats.data[0], feats.data[1])


def test_encode_batch_permutation_equivariant():
    rng = substream(43)
    clips = rand_clips(rng, n=4)
    store = model.init_params(7, ARCH)
    perm = np.array([2, 0, 3, 1])
    base = model.encode(store, clips, ARCH, training=False).data
    shuffled = model.encode(store, clips[perm], ARCH, training=False).data
    assert np.array_equal(shuffled, base[perm])  # eval rows are independent
    # training mode couples rows through batch statistics; permuting the
    # batch only reorders float reductions
    base_t = model.encode(store, clips, ARCH, training=True,
                          update_stats=False).data
    shuffled_t = model.encode(store, clips[perm], ARCH, training=True,
                              update_stats=False).data
    assert np.allclose(shuffled_t, base_t[perm], rtol=1e-5, atol=1e-5)


def test_encode_rejects_bad_shape():
    store = model.init_params(8, ARCH)
    with pytest.raises(ad.ShapeError):
        model.encode(store, np.zeros((2, 16, 32, 32), np.float32), ARCH)


def test_running_stats_update_only_in_training():
    rng = substream(44)
    clips = rand_clips(rng)
    store = model.init_params(9, ARCH)
    before = store["enc.bn1.running_mean"].data.copy()
    model.encode(store, clips, ARCH, training=False)
    assert np.array_equal(store["enc.bn1.running_mean"].data, before)
    model.encode(store, clips, ARCH, training=True)
    assert not np.array_equal(store["enc.bn1.running_mean"].data, before)


# ---- projection heads -------------------------------------------------------------


def test_projections_unit_norm():
    rng = substream(45)
    store = model.init_params(10, ARCH)
    feats = model.encode(store, rand_clips(rng, n=3), ARCH, training=False)
    for project in (model.project_mip, model.project_cip):
        z = project(store, feats, ARCH).data
        norms = np.sqrt((z * z).sum(axis=1))
        assert np.all(np.abs(norms - 1.0) < 1e-5)


def test_heads_differ():
    rng = substream(46)
    store = model.init_params(11, ARCH)
    feats = model.encode(store, rand_clips(rng), ARCH, training=False)
    a = model.project_mip(store, feats, ARCH).data
    b = model.project_cip(store, feats, ARCH).data
    assert not np.allclose(a, b)


def test_normalization_flag_can_be_disabled():
    rng = substream(47)
    arch = model.ArchConfig(normalize_projections=False)
    store = model.init_params(12, arch)
    feats = model.encode(store, rand_clips(rng), arch, training=False)
    z = model.project_mip(store, feats, arch).data
    norms = np.sqrt((z * z).sum(axis=1))
    assert np.any(np.abs(norms - 1.0) > 1e-3)


def test_feature_norm_flag_can_be_disabled():
    rng = substream(51)
    arch = model.ArchConfig(feature_norm=False)
    store = model.init_params(17, arch)
    assert "enc.bnf.gamma" not in store
    feats = model.encode(store, rand_clips(rng), arch, training=False)
    assert np.all(np.isfinite(feats.data))
    # without standardization the pooled features keep a positive common mode
    assert feats.data.mean() > 0


def test_parameter_isolation_between_heads():
    rng = substream(48)
    clips = rand_clips(rng)
    store = model.init_params(13, ARCH)
    feats = model.encode(store, clips, ARCH, training=False)
    cip_before = model.project_cip(store, feats, ARCH).data.copy()
    mip_before = model.project_mip(store, feats, ARCH).data.copy()

    bumped = store.snapshot()
    bumped.entries["mip.fc1.w"] = Tensor(
        bumped["mip.fc1.w"].data + 0.1, requires_grad=True)
    feats_b = model.encode(bumped, clips, ARCH, training=False)
    assert np.array_equal(model.project_cip(bumped, feats_b, ARCH).data, cip_before)
    assert not np.array_equal(model.project_mip(bumped, feats_b, ARCH).data,
                              mip_before)

    shared = store.snapshot()
    shared.entries["enc.conv1.w"] = Tensor(
        shared["enc.conv1.w"].data + 0.05, requires_grad=True)
    feats_s = model.encode(shared, clips, ARCH, training=False)
    assert not np.array_equal(model.project_cip(shared, feats_s, ARCH).data,
                              cip_before)
    assert not np.array_equal(model.project_mip(shared, feats_s, ARCH).data,
                              mip_before)


# ---- gradients through the model ----------------------------------------------------


def test_gradients_map_shapes_and_absence():
    rng = substream(52)
    store = model.init_params(18, TINY)
    clips = rand_clips(rng)
    feats = model.encode(store, clips, TINY, training=True, update_stats=False)
    loss = (model.project_mip(store, feats, TINY)
            * model.project_mip(store, feats, TINY).detach()).sum()
    store.zero_grad()
    loss.backward()
    grads = store.gradients()
    for name, g in grads.items():
        assert g.shape == store[name].data.shape
    # the other head never ran: absent entries mean zero gradient
    assert "cip.fc1.w" not in grads
    assert "mip.fc1.w" in grads and "enc.conv1.w" in grads


def test_encoder_gradcheck_sampled():
    rng = substream(49)
    store = model.init_params(14, TINY, dtype=np.float64)
    clips = rand_clips(rng, n=2, t=8, hw=8, dtype=np.float64)

    def build():
        feats = model.encode(store, clips, TINY, training=True, update_stats=False)
        z = model.project_mip(store, feats, TINY)
        return (z * z.detach()).sum()

    params = [store[n] for n in store.trainable()]
    err = ad.grad_check(build, params, max_entries=4, seed=0)
    assert err < 1e-5


# ---- checkpoint format ----------------------------------------------------------------


def test_checkpoint_roundtrip_byte_identical(tmp_path):
    store = model.init_params(15, ARCH)
    store.velocity["enc.conv1.w"] = np.ones_like(store["enc.conv1.w"].data)
    p1 = tmp_path / "a.mcpc"
    p2 = tmp_path / "b.mcpc"
    model.save_params(store, p1)
    loaded = model.load_params(p1)
    model.save_params(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.names() == store.names()
    assert "enc.conv1.w" in loaded.velocity
    assert not loaded["enc.bn1.running_mean"].requires_grad
    assert loaded["enc.conv1.w"].requires_grad


def test_checkpoint_reproduces_features(tmp_path):
    rng = substream(50)
    clips = rand_clips(rng)
    store = model.init_params(16, ARCH)
    want = model.encode(store, clips, ARCH, training=False).data
    path = tmp_path / "ck.mcpc"
    model.save_params(store, path)
    got = model.encode(model.load_params(path), clips, ARCH, training=False).data
    assert np.array_equal(got, want)


def test_checkpoint_magic_checked(tmp_path):
    path = tmp_path / "junk.mcpc"
    path.write_bytes(b"WHAT" + b"\x00" * 8)
    with pytest.raises(ValueError, match="magic"):
        model.load_params(path)
