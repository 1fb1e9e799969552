import numpy as np
import pytest

from mcp import data
from mcp.seeding import derive_seed, substream


@pytest.fixture(scope="module")
def small_store():
    return data.generate_synthetic_dataset(4, 3, 64, 32, seed=11)


# ---- generator ---------------------------------------------------------


def test_generator_shapes_and_labels():
    store = data.generate_synthetic_dataset(8, 25, 64, 32, seed=7)
    assert len(store) == 200
    assert sorted(set(r.label for r in store.records)) == list(range(8))
    for rec in store.records:
        assert rec.frames.shape == (64, 32, 32, 3)
        assert rec.frames.dtype == np.uint8
    assert len(set(r.id for r in store.records)) == 200


def test_generator_minimal_config():
    store = data.generate_synthetic_dataset(2, 1, 48, 32, seed=0)
    assert len(store) == 2
    # motion, not appearance, separates the classes: both videos move,
    # but their trajectories differ
    a, b = store.records
    assert not np.array_equal(a.frames, b.frames)


def test_generator_deterministic():
    a = data.generate_synthetic_dataset(3, 2, 64, 32, seed=5)
    b = data.generate_synthetic_dataset(3, 2, 64, 32, seed=5)
    for ra, rb in zip(a.records, b.records):
        assert np.array_equal(ra.frames, rb.frames)
        assert (ra.id, ra.label) == (rb.id, rb.label)


def test_generator_rejects_short_videos():
    with pytest.raises(ValueError, match="48"):
        data.generate_synthetic_dataset(2, 1, 47, 32, seed=0)


def test_generator_background_static_within_video(small_store):
    rec = small_store.records[0]
    # corner pixels are rarely visited by sprites; most frames agree there
    corner = rec.frames[:, 0, 0, :]
    values, counts = np.unique(corner, axis=0, return_counts=True)
    assert counts.max() >= rec.frames.shape[0] // 2


# ---- residual views ------------------------------------------------------


def test_residual_zero_for_identical_frames():
    frames = np.full((20, 8, 8, 3), 117, dtype=np.uint8)
    clip = data.residual_clip(frames, 0, 16)
    assert np.all(clip.data == 0.0)


def test_residual_single_pixel_value():
    frames = np.array([[[[3, 3, 3]]], [[[7, 7, 7]]]], dtype=np.uint8)
    clip = data.residual_clip(frames, 0, 1)
    assert np.all(clip.data == np.float32(4.0 / 255.0))


def test_long_range_t1_equals_residual(small_store):
    rec = small_store.records[1]
    a = data.residual_clip(rec.frames, 3, 16)
    b = data.long_range_residual_clip(rec.frames, 3, 16, 1)
    assert np.array_equal(a.data, b.data)


def test_long_range_static_video_zero():
    frames = np.full((48, 8, 8, 3), 50, dtype=np.uint8)
    for t in (1, 3, 5):
        clip = data.long_range_residual_clip(frames, 0, 16, t)
        assert np.all(clip.data == 0.0)


def test_long_range_larger_gap_accumulates_motion():
    store = data.generate_synthetic_dataset(2, 1, 64, 32, seed=3)
    rec = store.records[0]  # class 0 = linear translation
    m1 = data.long_range_residual_clip(rec.frames, 0, 16, 1).data.mean()
    m4 = data.long_range_residual_clip(rec.frames, 0, 16, 4).data.mean()
    assert m4 > m1


def test_long_range_symmetric_in_motion_sign():
    rng = substream(21)
    a = rng.integers(0, 256, (8, 8, 3)).astype(np.uint8)
    b = rng.integers(0, 256, (8, 8, 3)).astype(np.uint8)
    fwd = data.residual_clip(np.stack([a, b]), 0, 1).data
    rev = data.residual_clip(np.stack([b, a]), 0, 1).data
    assert np.array_equal(fwd, rev)


def test_residual_bounds_checked():
    frames = np.zeros((20, 4, 4, 3), dtype=np.uint8)
    with pytest.raises(IndexError):
        data.long_range_residual_clip(frames, 10, 8, 3)
    with pytest.raises(ValueError):
        data.long_range_residual_clip(frames, 0, 4, 0)


def test_residual_range_and_zero_iff_equal(small_store):
    rec = small_store.records[2]
    clip = data.long_range_residual_clip(rec.frames, 0, 16, 4)
    assert clip.data.min() >= 0.0 and clip.data.max() <= 1.0
    equal = rec.frames[0:16] == rec.frames[4:20]
    assert np.array_equal(clip.data == 0.0, equal)


# ---- clip sampling ----------------------------------------------------------


def test_sample_clip_speed1(small_store):
    rec = small_store.records[0]
    clip = data.sample_clip(rec, 0, 1, 16)
    assert np.array_equal(clip.data, rec.frames[:16] / np.float32(255.0))
    assert (clip.view, clip.speed, clip.start) == (data.RGB, 1, 0)


def test_sample_clip_speed2_takes_every_second_frame(small_store):
    rec = small_store.records[0]
    clip = data.sample_clip(rec, 0, 2, 16)
    assert np.array_equal(clip.data, rec.frames[0:31:2] / np.float32(255.0))


def test_sample_clip_bounds(small_store):
    rec = small_store.records[0]  # 64 frames
    with pytest.raises(IndexError):
        data.sample_clip(rec, 40, 2, 16)  # needs frame 70


def test_mip_triplet_constraints(small_store):
    rec = small_store.records[0]
    for i in range(50):
        trip = data.sample_mip_triplet(rec, seed=derive_seed(1, i))
        assert trip.rgb.speed == trip.lres_same.speed
        assert trip.rgb.speed != trip.lres_diff.speed
        assert trip.rgb.source_id == trip.lres_same.source_id == rec.id
        assert trip.rgb.start == trip.lres_same.start == trip.lres_diff.start


def test_mip_triplet_deterministic(small_store):
    rec = small_store.records[1]
    a = data.sample_mip_triplet(rec, seed=99)
    b = data.sample_mip_triplet(rec, seed=99)
    assert np.array_equal(a.rgb.data, b.rgb.data)
    assert np.array_equal(a.lres_diff.data, b.lres_diff.data)


def test_mip_triplet_speed_distribution(small_store):
    rec = small_store.records[2]
    ones = sum(data.sample_mip_triplet(rec, seed=derive_seed(2, i)).rgb.speed == 1
               for i in range(1000))
    assert 450 <= ones <= 550


def test_mip_lres_built_from_accelerated_sequence(small_store):
    rec = small_store.records[3]
    trip = data.sample_mip_triplet(rec, seed=123, length=16, t=4)
    s, start = trip.lres_same.speed, trip.lres_same.start
    acc = rec.frames[start:start + s * (16 + 4 - 1) + 1:s].astype(np.int16)
    want = np.abs(acc[:16] - acc[4:20]) / np.float32(255.0)
    assert np.array_equal(trip.lres_same.data, want.astype(np.float32))


def test_cip_pair_speeds_differ_by_default(small_store):
    rec = small_store.records[0]
    for i in range(50):
        pair = data.sample_cip_pair(rec, seed=derive_seed(3, i))
        assert pair.rgb.speed != pair.lres.speed
        assert pair.rgb.source_id == pair.lres.source_id


def test_cip_pair_same_mode(small_store):
    rec = small_store.records[0]
    for i in range(50):
        pair = data.sample_cip_pair(rec, seed=derive_seed(4, i), speed_mode="same")
        assert pair.rgb.speed == pair.lres.speed


def test_cip_pair_random_mode_distribution(small_store):
    rec = small_store.records[1]
    equal = sum(
        data.sample_cip_pair(rec, seed=derive_seed(5, i),
                             speed_mode="random").rgb.speed
        == data.sample_cip_pair(rec, seed=derive_seed(5, i),
                                speed_mode="random").lres.speed
        for i in range(1000))
    assert 450 <= equal <= 550


def test_sampler_rejects_short_video():
    frames = np.zeros((48, 32, 32, 3), dtype=np.uint8)
    rec = data.VideoRecord(id=0, frames=frames, label=0)
    data.sample_mip_triplet(rec, seed=0)  # 2*(15+4)=38 span fits in 48
    short = data.VideoRecord(id=1, frames=frames[:38], label=0)
    with pytest.raises(ValueError, match="too short"):
        data.sample_mip_triplet(short, seed=0)


# ---- augmentation -------------------------------------------------------------


def _plain_clip(rng):
    arr = rng.random((16, 32, 32, 3)).astype(np.float32)
    return data.Clip(data=arr, view=data.RGB, speed=1, source_id=0, start=0)


def test_augment_flip_is_involution():
    rng = substream(31)
    clip = _plain_clip(rng)
    p = data.AugmentParams(0, 0, 32, 32, True, (1.0, 1.0, 1.0))
    twice = data.apply_augment(data.apply_augment(clip, p), p)
    assert np.array_equal(twice.data, clip.data)


def test_augment_identity_params():
    rng = substream(32)
    clip = _plain_clip(rng)
    out = data.apply_augment(clip, data.identity_augment(clip))
    assert np.array_equal(out.data, clip.data)


def test_augment_output_in_unit_range():
    rng = substream(33)
    clip = _plain_clip(rng)
    for i in range(1000):
        out = data.augment(clip, seed=derive_seed(6, i))
        assert out.data.shape == clip.data.shape
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0


def test_augment_deterministic():
    rng = substream(34)
    clip = _plain_clip(rng)
    a = data.augment(clip, seed=77)
    b = data.augment(clip, seed=77)
    assert np.array_equal(a.data, b.data)


def test_augment_temporally_consistent():
    rng = substream(35)
    clip = _plain_clip(rng)
    # constant-in-time input stays constant in time under any augmentation
    clip.data[:] = clip.data[0]
    out = data.augment(clip, seed=9)
    assert np.all(out.data == out.data[0])


# ---- companion sampler ----------------------------------------------------------


def _burst_video(burst_at: int, T: int = 64) -> data.VideoRecord:
    frames = np.full((T, 32, 32, 3), 40, dtype=np.uint8)
    frames[burst_at:] = 200  # content changes once, at burst_at
    return data.VideoRecord(id=0, frames=frames, label=0)


def test_center_sampling_centers_on_burst():
    video = _burst_video(30)
    assert data.similarity_center_sampling(video, 16, 1) == 30 - 16 // 2
    assert data.similarity_center_sampling(video, 16, 2) == 30 - (2 * 16) // 2


def test_center_sampling_tie_breaks_low():
    frames = np.full((64, 32, 32, 3), 40, dtype=np.uint8)
    video = data.VideoRecord(id=0, frames=frames, label=0)
    assert data.similarity_center_sampling(video, 16, 1) == 0


def test_center_sampling_clamps():
    video = _burst_video(2)
    assert data.similarity_center_sampling(video, 16, 1) == 0
    late = _burst_video(62)
    assert data.similarity_center_sampling(late, 16, 2) == 64 - 1 - 2 * 15


# ---- file format -------------------------------------------------------------------


def test_dataset_roundtrip(tmp_path, small_store):
    path = tmp_path / "corpus.mcpv"
    data.save_dataset(small_store, path)
    loaded = data.load_dataset(path, split="train")
    assert len(loaded) == len(small_store)
    for a, b in zip(small_store.records, loaded.records):
        assert (a.id, a.label) == (b.id, b.label)
        assert np.array_equal(a.frames, b.frames)
    # re-saving the loaded store is byte-identical
    path2 = tmp_path / "again.mcpv"
    data.save_dataset(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_dataset_magic_checked(tmp_path):
    path = tmp_path / "bogus.mcpv"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        data.load_dataset(path)


def test_manifest_format(tmp_path, small_store):
    path = tmp_path / "corpus.manifest"
    data.save_manifest(small_store, path)
    lines = path.read_text().splitlines()
    assert len(lines) == len(small_store)
    first = lines[0].split("\t")
    assert first == [str(small_store.records[0].id),
                     str(small_store.records[0].label), "64"]
