import struct
from dataclasses import fields

import numpy as np
import pytest
from hypothesis import given, strategies as st

from d2s import diffcore as dc
from d2s.config import Settings, known_keys, load_preset, load_settings
from d2s.exceptions import ArchitectureMismatch, BadConfig, FormatError, IoError
from d2s.frames import Frame
from d2s.geometry import CameraPose, Intrinsics
from d2s.io import (HAS_LABELS, HAS_POSE, decode_checkpoint, decode_frame, encode_checkpoint,
                    encode_frame, load_checkpoint, parse_key_values, read_frame, read_frames,
                    save_checkpoint, write_frame, write_frames)
from d2s.network import Architecture, ModelParams
from d2s.training import TrainConfig

K_INTR = Intrinsics(500, 500, 320, 240)


def make_frame(K=5, D=8, labels=True, pose=True, seed=0, fid="f"):
    rng = np.random.default_rng(seed)
    return Frame(rng.normal(size=(K, D)).astype(np.float32),
                 rng.uniform(0, 640, (K, 2)).astype(np.float32),
                 rng.normal(size=(K, 3)).astype(np.float32) if labels else None,
                 rng.integers(0, 2, K).astype(np.uint8) if labels else None,
                 CameraPose.look_at([5, 0, 1], [0, 0, 1]) if pose else None,
                 K_INTR if pose else None, frame_id=fid)


def small_params(seed=0):
    return ModelParams.initialize(Architecture(8, 1, 4, (6, 5)), np.random.default_rng(seed))


def assert_frames_equal(a, b):
    assert np.array_equal(a.descriptors, b.descriptors)
    assert np.array_equal(a.keypoints, b.keypoints)
    for x, y in ((a.gt_coords, b.gt_coords), (a.gt_reliability, b.gt_reliability)):
        assert (x is None and y is None) or np.array_equal(x, y)
    assert (a.pose is None) == (b.pose is None)
    if a.pose is not None:
        assert np.array_equal(a.pose.to_array(), b.pose.to_array())
    assert a.intrinsics == b.intrinsics


@pytest.mark.parametrize("labels,pose", [(True, True), (False, True), (True, False), (False, False)])
def test_frame_round_trip_bit_exact(labels, pose):
    f = make_frame(labels=labels, pose=pose)
    data = encode_frame(f)
    g = decode_frame(data)
    assert_frames_equal(f, g)
    assert encode_frame(g) == data


def test_unlabeled_frame_flags():
    f = make_frame().without_labels()
    data = encode_frame(f)
    (flags,) = struct.unpack_from("<I", data, 16)
    assert flags & HAS_LABELS == 0 and flags & HAS_POSE
    g = decode_frame(data)
    assert g.pose is None and g.intrinsics == K_INTR
    assert not g.has_labels and not g.valid_mask.any()


def test_pseudo_frame_round_trip():
    f = make_frame().replace(pose=None)
    g = decode_frame(encode_frame(f))
    assert_frames_equal(f, g)
    assert g.pose is None and g.has_labels


def test_float64_geometry_quantized_on_write():
    f = make_frame()
    f64 = f.replace(keypoints=f.keypoints.astype(np.float64) + 1e-9)
    g = decode_frame(encode_frame(f64))
    assert g.keypoints.dtype == np.float32
    assert np.array_equal(g.keypoints, f64.keypoints.astype(np.float32))


def test_trailing_bytes_rejected():
    data = encode_frame(make_frame())
    with pytest.raises(FormatError):
        decode_frame(data + b"\x00")


@pytest.mark.parametrize("cut", [0, 3, 10, 19, 40, -5, -1])
def test_truncation_rejected(cut):
    data = encode_frame(make_frame())
    with pytest.raises(FormatError) as info:
        decode_frame(data[:cut])
    assert info.value.offset is not None


def test_every_single_byte_corruption_detected():
    data = encode_frame(make_frame(K=3, D=4))
    for i in range(len(data)):
        for mask in (0x01, 0x80, 0xFF):
            bad = bytearray(data)
            bad[i] ^= mask
            with pytest.raises(FormatError) as info:
                decode_frame(bytes(bad))
            assert 0 <= info.value.offset <= len(data)


@given(st.binary(max_size=300))
def test_random_bytes_never_crash(blob):
    with pytest.raises(FormatError):
        decode_frame(blob)
    with pytest.raises(FormatError):
        decode_checkpoint(blob)


def test_frame_files(tmp_path):
    frames = [make_frame(seed=i, fid=f"frame-{i}") for i in range(3)]
    write_frames(tmp_path, frames)
    back = read_frames(tmp_path)
    assert [f.frame_id for f in back] == ["frame-0", "frame-1", "frame-2"]
    for a, b in zip(frames, back):
        assert_frames_equal(a, b)
    write_frame(tmp_path / "x.d2sf", frames[0])
    assert read_frame(tmp_path / "x.d2sf").frame_id == "x"
    with pytest.raises(IoError):
        read_frames(tmp_path / "missing")
    with pytest.raises(IoError):
        read_frame(tmp_path / "missing.d2sf")


def test_checkpoint_round_trip_bit_exact():
    params = small_params()
    data = encode_checkpoint(params)
    ckpt = decode_checkpoint(data, params.arch)
    assert ckpt.params.arch == params.arch
    assert list(ckpt.params.tensors) == list(params.tensors)
    for name, t in params.tensors.items():
        assert np.array_equal(ckpt.params[name].value, t.value.astype(np.float32))
    assert encode_checkpoint(ckpt.params) == data
    assert ckpt.m is None


def test_checkpoint_optimizer_state_round_trip(tmp_path):
    params = small_params()
    opt = dc.Adam(params.tensors)
    for t in params.tensors.values():
        t.grad = np.ones_like(t.value)
    opt.step(1e-3)
    opt.step(1e-3)
    save_checkpoint(tmp_path / "m.d2sm", params, opt)
    ckpt = load_checkpoint(tmp_path / "m.d2sm")
    restored = ckpt.optimizer()
    assert restored.step_count == 2
    for name in params.tensors:
        assert np.array_equal(restored.m[name], opt.m[name].astype(np.float32))
        assert np.array_equal(restored.v[name], opt.v[name].astype(np.float32))


def test_checkpoint_architecture_mismatch():
    data = encode_checkpoint(small_params())
    with pytest.raises(ArchitectureMismatch):
        decode_checkpoint(data, Architecture(8, 2, 4, (6, 5)))


def test_checkpoint_corruption_detected():
    data = encode_checkpoint(small_params())
    step = max(1, len(data) // 200)
    for i in range(0, len(data), step):
        bad = bytearray(data)
        bad[i] ^= 0x5A
        with pytest.raises(FormatError):
            decode_checkpoint(bytes(bad))
    with pytest.raises(FormatError):
        decode_checkpoint(data + b"\x00")
    with pytest.raises(FormatError):
        decode_checkpoint(data[:-7])


def test_parse_key_values():
    assert parse_key_values("a = 1\n# comment\n\nb=x  # tail\n") == {"a": "1", "b": "x"}
    with pytest.raises(BadConfig):
        parse_key_values("no equals sign")


def test_settings_unknown_key():
    with pytest.raises(BadConfig):
        Settings.from_text("num_layer = 3\n")


def test_settings_coercion_and_seed():
    s = Settings.from_text("seed = 7\nhead_widths = 4,5\nnum_layers = 1\nnormalize_by_reliable = true\n")
    assert s.train.head_widths == (4, 5) and s.train.num_layers == 1
    assert s.train.normalize_by_reliable is True
    assert s.render.seed == s.train.seed == s.solver.seed == 7
    assert Settings.from_text(s.to_text()) == s
    with pytest.raises(BadConfig):
        Settings.from_text("num_layers = many\n")


def test_presets_load():
    desk, hard = load_preset("desk"), load_preset("hard")
    assert (desk.trajectory.n_train, desk.trajectory.n_test, desk.trajectory.n_unlabeled) == (100, 50, 50)
    assert desk.scene.num_points == 200 and desk.scene.descriptor_dim == 64
    assert hard.scene.unreliable_fraction > desk.scene.unreliable_fraction
    assert hard.render.descriptor_noise_sigma > desk.render.descriptor_noise_sigma
    with pytest.raises(BadConfig):
        load_preset("nope")
    assert load_settings(None) == Settings()
    assert load_settings("desk") == desk
    with pytest.raises(IoError):
        load_settings("/nonexistent/path.cfg")


def test_training_defaults_match_reference_values():
    c = TrainConfig()
    assert c.num_layers == 5 and c.num_heads == 4
    assert c.head_widths == (512, 1024, 1024, 512)
    assert c.beta == 100.0 and c.batch_size == 8
    assert c.stage1_iters == 300_000 and c.stage2_iters == 100_000 and c.update_iters == 50_000
    assert c.lr_stage1 == 1e-4 and c.lr_stage2 == 1e-5 and c.lr_decay == 0.5
    assert c.stage2_alpha_r == 10.0 and c.update_alpha_r == 1.0
    assert c.warp_prob == 0.3 and c.distortion_scale == 0.4
    from d2s.pose_solver import RansacConfig
    assert RansacConfig().inlier_threshold_px == 12


def test_every_config_key_is_documented_in_text_dump():
    dumped = set(parse_key_values(Settings().to_text()))
    assert dumped == known_keys()
    assert {f.name for f in fields(TrainConfig)} <= dumped
