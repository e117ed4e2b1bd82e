from __future__ import annotations

import json
import logging
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from humangs.articulation import PoseFrame, toy_biped, toy_biped_mesh
from humangs.enhance import CameraTrajectory, PoseSequence
from humangs.io.checkpoint import (
    FORMAT_VERSION, MAGIC, Checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint,
)
from humangs.io.config import RunConfig, dump_config, parse_config
from humangs.io.dataset import load_dataset, write_metrics
from humangs.io.errors import (
    CameraFormatError, CheckpointError, ConfigError, FormatError, ImageFormatError, ManifestError, PlyBodyError,
    PlyHeaderError, PlyTruncatedError, PlyUnsupportedError, PoseFormatError, RigFormatError, UnsupportedVersionError,
)
from humangs.io.images import (
    decode_image, decode_png, decode_ppm, encode_png, encode_ppm, load_image, load_mask, save_png, save_ppm, to_uint8,
)
from humangs.io.ply import encode_ply, load_ply, parse_ply, quantize_color, save_cloud_ply
from humangs.io.poses import (
    camera_to_dict, encode_pose_sequence, parse_camera, parse_pose_sequence, parse_trajectory, save_trajectory,
)
from humangs.io.rig import Rig, encode_rig, parse_rig
from humangs.io.sequence import parse_manifest, read_manifest, write_image_sequence
from humangs.reconstruction import Reconstruction, build_avatar
from humangs.synthetic import blob_cloud, orbit_cameras, perturbed_init, render_views
from humangs.train import AdamState, TrainConfig, Trainer, evaluate
from fuzzing import format_corpus, fuzz

FIXTURES = Path(__file__).parent / "fixtures"


# --------------------------------------------------------------------------
# PLY


class TestPly:
    def test_ascii_golden(self):
        ps = load_ply(FIXTURES / "three_vertices.ply")
        np.testing.assert_array_equal(ps.positions, [[0.5, -1.25, 2], [1, 0, 3.75], [-0.125, 0.25, 4]])
        np.testing.assert_array_equal(ps.colors, [[255, 0, 0], [0, 128, 0], [10, 20, 30]])
        assert ps.colors.dtype == np.uint8

    def test_binary_matches_ascii(self):
        a = load_ply(FIXTURES / "three_vertices.ply")
        b = load_ply(FIXTURES / "three_vertices_le.ply")
        np.testing.assert_array_equal(a.positions, b.positions)
        np.testing.assert_array_equal(a.colors, b.colors)

    def test_declared_five_present_four(self):
        head = "ply\nformat ascii 1.0\nelement vertex 5\nproperty float x\nproperty float y\nproperty float z\nend_header\n"
        body = "".join(f"{i} 0 0\n" for i in range(4))
        with pytest.raises(PlyTruncatedError) as ei:
            parse_ply((head + body).encode())
        assert ei.value.line is not None
        binary = head.replace("ascii", "binary_little_endian").encode() + struct.pack("<12f", *range(12))
        with pytest.raises(PlyTruncatedError) as ei:
            parse_ply(binary)
        assert ei.value.offset is not None

    def test_vertex_count_honoured(self):
        # trailing rows beyond the declared count are not read
        data = encode_ply(np.ones((2, 3)), binary=False) + b"9 9 9\n"
        assert len(parse_ply(data)) == 2

    def test_big_endian_rejected(self):
        data = (FIXTURES / "three_vertices_le.ply").read_bytes().replace(b"binary_little_endian",
                                                                         b"binary_big_endian")
        with pytest.raises(PlyUnsupportedError):
            parse_ply(data)

    def test_error_kinds_are_distinct(self):
        assert len({PlyHeaderError, PlyBodyError, PlyTruncatedError, PlyUnsupportedError}) == 4
        with pytest.raises(PlyHeaderError):
            parse_ply(b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n1\n")
        with pytest.raises(PlyBodyError):
            parse_ply(encode_ply(np.zeros((1, 3)), binary=False).replace(b"0.0 0.0 0.0", b"0.0 abc 0.0"))
        with pytest.raises(PlyHeaderError):
            parse_ply(b"not a ply")

    def test_colour_out_of_range(self):
        data = (FIXTURES / "three_vertices.ply").read_bytes().replace(b"255 0 0", b"256 0 0")
        with pytest.raises(PlyBodyError):
            parse_ply(data)

    @pytest.mark.parametrize("binary", [False, True])
    def test_round_trip_f32_exact(self, binary):
        rng = np.random.default_rng(3)
        pos = rng.normal(0, 100, (50, 3))
        col = rng.integers(0, 256, (50, 3)).astype(np.uint8)
        ps = parse_ply(encode_ply(pos, col, binary))
        np.testing.assert_array_equal(ps.positions, pos.astype(np.float32).astype(np.float64))
        np.testing.assert_array_equal(ps.colors, col)

    def test_empty_cloud(self):
        for binary in (False, True):
            ps = parse_ply(encode_ply(np.zeros((0, 3)), np.zeros((0, 3)), binary))
            assert len(ps) == 0 and ps.positions.shape == (0, 3)

    def test_quantization_round_half_up(self):
        # 0.5/255 sits exactly halfway between codes 0 and 1 and must go up
        x = np.array([0.0, 0.5 / 255, 0.49 / 255, 1.5 / 255, 1.0, 1.2, -0.3])
        np.testing.assert_array_equal(quantize_color(x), [0, 1, 0, 2, 255, 255, 0])

    def test_cloud_export(self, tmp_path):
        cloud = blob_cloud(20)
        save_cloud_ply(cloud, tmp_path / "c.ply")
        ps = load_ply(tmp_path / "c.ply")
        np.testing.assert_array_equal(ps.positions, cloud.positions.astype(np.float32))
        assert ps.colors.shape == (20, 3)

    @given(st.lists(st.tuples(*[st.floats(width=32, allow_nan=False, allow_infinity=False)] * 3), max_size=20), st.booleans())
    def test_round_trip_property(self, rows, binary):
        pos = np.array(rows, dtype=np.float64).reshape(-1, 3)
        np.testing.assert_array_equal(parse_ply(encode_ply(pos, None, binary)).positions, pos)


# --------------------------------------------------------------------------
# images


def checkerboard(h=6, w=8):
    y, x = np.mgrid[:h, :w]
    board = ((x + y) % 2).astype(np.uint8) * 255
    return np.stack([board, 255 - board, np.full_like(board, 77)], axis=2)


class TestImages:
    def test_checkerboard_png(self, tmp_path):
        save_png(tmp_path / "a.png", checkerboard())
        np.testing.assert_array_equal(decode_image((tmp_path / "a.png").read_bytes()), checkerboard())

    def test_checkerboard_ppm(self, tmp_path):
        save_ppm(tmp_path / "a.ppm", checkerboard())
        np.testing.assert_array_equal(decode_ppm((tmp_path / "a.ppm").read_bytes()), checkerboard())

    def test_ppm_header_literal(self):
        assert encode_ppm(np.zeros((2, 3, 3), np.uint8)) == b"P6\n3 2\n255\n" + bytes(18)

    def test_cross_codec(self):
        img = np.random.default_rng(0).integers(0, 256, (9, 11, 3)).astype(np.uint8)
        np.testing.assert_array_equal(decode_image(encode_png(img)), decode_image(encode_ppm(img)))

    def test_float_quantization(self):
        f = np.array([[[0.0, 0.5 / 255, 1.0]]])
        np.testing.assert_array_equal(to_uint8(f), [[[0, 1, 255]]])
        np.testing.assert_array_equal(decode_png(encode_png(f)), [[[0, 1, 255]]])

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.png").write_bytes(b"")
        with pytest.raises(ImageFormatError):
            load_image(tmp_path / "e.png")

    def test_truncated_ppm(self):
        with pytest.raises(ImageFormatError):
            decode_ppm(encode_ppm(checkerboard())[:-1])

    def test_ppm_comments_and_maxval(self):
        data = b"P6 # c\n1 1\n# x\n15\n" + bytes([15, 0, 7])
        np.testing.assert_array_equal(decode_ppm(data), [[[255, 0, 119]]])

    def test_rgba_and_mask(self, tmp_path):
        img = checkerboard()
        alpha = np.zeros(img.shape[:2])
        alpha[:, :4] = 1
        save_png(tmp_path / "m.png", img, alpha)
        np.testing.assert_array_equal(decode_png((tmp_path / "m.png").read_bytes(), keep_alpha=True)[..., 3],
                                      to_uint8(alpha))
        m = load_mask(tmp_path / "m.png")
        assert set(np.unique(m)) <= {0.0, 1.0}

    @given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
    def test_round_trip_property(self, h, w, seed):
        img = np.random.default_rng(seed).integers(0, 256, (h, w, 3)).astype(np.uint8)
        np.testing.assert_array_equal(decode_png(encode_png(img)), img)
        np.testing.assert_array_equal(decode_ppm(encode_ppm(img)), img)


# --------------------------------------------------------------------------
# poses, cameras, rigs


def pose_doc(n_joints, frames=2, rotations=None):
    rot = rotations if rotations is not None else [[1, 0, 0, 0]] * n_joints
    return json.dumps({"fps": 30, "shape": [0.1, -0.2],
                       "frames": [{"t": i / 30, "root": [0, i, 0], "rotations": rot} for i in range(frames)]})


class TestPoses:
    def test_rest_frame(self):
        seq = parse_pose_sequence(pose_doc(24, frames=1), 24)
        np.testing.assert_array_equal(seq.frames[0].joint_rotations, np.tile([1.0, 0, 0, 0], (24, 1)))
        assert seq.fps == 30 and list(seq.shape_params) == [0.1, -0.2]

    def test_unnormalized_quaternion(self, caplog):
        rot = [[2, 0, 0, 0]] + [[1, 0, 0, 0]] * 23
        with caplog.at_level(logging.WARNING):
            seq = parse_pose_sequence(pose_doc(24, 1, rot), 24)
        np.testing.assert_array_equal(seq.frames[0].joint_rotations[0], [1, 0, 0, 0])
        assert "normalized" in caplog.text

    def test_missing_joint(self):
        with pytest.raises(PoseFormatError):
            parse_pose_sequence(pose_doc(24, 1, [[1, 0, 0, 0]] * 23), 24)

    @pytest.mark.parametrize("bad", [
        '{"frames": []}', '{"fps": 0, "frames": [{"rotations": [[1,0,0,0]]}]}',
        '{"frames": [{"rotations": [[0,0,0,0]]}]}', '{"frames": [{"rotations": [[1,0,0]]}]}',
        '{"frames": [{"t": 1, "rotations": [[1,0,0,0]]}, {"t": 1, "rotations": [[1,0,0,0]]}]}',
        '{"frames": [{"rotations": [[1,0,0,"x"]]}]}', "[1, 2", '{"frames": [{"rotations": [[1,0,0,NaN]]}]}',
    ])
    def test_malformed(self, bad):
        with pytest.raises(PoseFormatError):
            parse_pose_sequence(bad)

    def test_round_trip(self):
        rng = np.random.default_rng(1)
        q = rng.normal(size=(5, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        seq = PoseSequence([PoseFrame(q, rng.normal(size=3), 0.0), PoseFrame(q[::-1].copy(), np.zeros(3), 0.25)],
                           rng.normal(size=3), 4.0)
        back = parse_pose_sequence(encode_pose_sequence(seq), 5)
        for a, b in zip(seq.frames, back.frames):
            np.testing.assert_allclose(b.joint_rotations, a.joint_rotations, atol=1e-15)
            np.testing.assert_array_equal(b.root_translation, a.root_translation)
            assert b.time == a.time
        np.testing.assert_array_equal(back.shape_params, seq.shape_params)

    def test_camera_worked_example(self):
        # identity extrinsics: a world point at (0.1, -0.2, 2) lands at cx + fx*0.05, cy - fy*0.1
        cam = parse_camera(json.dumps({"width": 64, "height": 48, "fx": 60, "fy": 60, "cx": 32, "cy": 24,
                                       "rotation": [1, 0, 0, 0, 1, 0, 0, 0, 1], "translation": [0, 0, 0]}))
        pc = cam.world_to_camera @ np.array([0.1, -0.2, 2.0, 1.0])
        assert pc[2] == 2.0
        np.testing.assert_allclose([cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy], [35.0, 18.0])
        np.testing.assert_array_equal(cam.center, [0, 0, 0])

    def test_camera_round_trip(self):
        cam = orbit_cameras(3)[1]
        back = parse_camera(json.dumps(camera_to_dict(cam)))
        np.testing.assert_array_equal(back.world_to_camera, cam.world_to_camera)

    @pytest.mark.parametrize("change", [{"width": 0}, {"rotation": [1, 0, 0, 0, 1, 0, 0, 0, -1]}, {"fx": "a"},
                                        {"translation": [0, 0]}])
    def test_camera_errors(self, change):
        d = dict(camera_to_dict(orbit_cameras(1)[0]), **change)
        with pytest.raises(CameraFormatError):
            parse_camera(json.dumps(d))

    def test_trajectory_round_trip(self, tmp_path):
        traj = CameraTrajectory([(0.1 * i, c) for i, c in enumerate(orbit_cameras(4))])
        save_trajectory(tmp_path / "t.json", traj)
        back = parse_trajectory((tmp_path / "t.json").read_bytes())
        assert [t for t, _ in back.entries] == [t for t, _ in traj.entries]
        for (_, a), (_, b) in zip(traj.entries, back.entries):
            np.testing.assert_array_equal(a.world_to_camera, b.world_to_camera)

    def test_rig_round_trip(self):
        mesh, w = toy_biped_mesh(0)
        rig = Rig(mesh, toy_biped(), w)
        back = parse_rig(encode_rig(rig))
        np.testing.assert_array_equal(back.mesh.vertices, mesh.vertices)
        np.testing.assert_array_equal(back.mesh.faces, mesh.faces)
        np.testing.assert_array_equal(back.weights, w)
        np.testing.assert_allclose(back.skeleton.rest_local_transforms, rig.skeleton.rest_local_transforms,
                                   atol=1e-15)
        np.testing.assert_array_equal(back.skeleton.parents, rig.skeleton.parents)

    @pytest.mark.parametrize("text", ["joint a - 0 0 0\n", "v 0 0 0\n", "v 0 0 0\njoint a b 0 0 0\nw 1 a 1\n",
                                      "v 0 0 0\njoint a - 0 0 0\nw 1 a -1\n", "v 0 0 0\njoint a - 0 0 0\nf 1 2 3\n",
                                      "v 0 0 0\njoint a - 0 0 0\nzz\n"])
    def test_rig_errors(self, text):
        with pytest.raises(RigFormatError):
            parse_rig(text)


# --------------------------------------------------------------------------
# config, manifests, datasets


class TestConfig:
    def test_empty_gives_defaults(self):
        assert parse_config("") == RunConfig()
        assert parse_config(b"{}") == RunConfig()

    @pytest.mark.parametrize("doc", ['{"trian": {}}', '{"train": {"iteration": 5}}',
                                     '{"train": {"weights": {"lamda1": 1}}}', '{"critic": {"urll": "x"}}'])
    def test_unknown_keys(self, doc):
        with pytest.raises(ConfigError):
            parse_config(doc)

    @pytest.mark.parametrize("doc", ['{"train": {"iterations": "5"}}', '{"train": {"iterations": true}}',
                                     '{"critic": {"kind": "oracle"}}', '{"train": {"background": [0, 0]}}',
                                     '{"train": {"iterations": 0}}', "{bad json"])
    def test_invalid_values(self, doc):
        with pytest.raises(ConfigError):
            parse_config(doc)

    def test_canonical_echo(self):
        cfg = parse_config('{"train": {"iterations": 7, "weights": {"omega": 2}}, "critic": {"kind": "http", '
                           '"url": "http://x"}}')
        text = dump_config(cfg)
        assert parse_config(text) == cfg
        assert dump_config(parse_config(text)) == text
        assert json.loads(text)["train"]["iterations"] == 7


class TestManifest:
    def test_sequence_directory(self, tmp_path):
        frames = [checkerboard() / 255.0, 1 - checkerboard() / 255.0]
        names = write_image_sequence(tmp_path / "seq", frames, fps=12.5)
        assert names == ["frame_00000.png", "frame_00001.png"]
        got, fps = read_manifest(tmp_path / "seq" / "manifest.txt")
        assert got == names and fps == 12.5
        np.testing.assert_array_equal(load_image(tmp_path / "seq" / names[1]), frames[1])

    @pytest.mark.parametrize("text", ["", "fps\n", "fps -1\n", "fps x\n", "fps 30\n../evil.png\n", "rate 30\n"])
    def test_errors(self, text):
        with pytest.raises(ManifestError):
            parse_manifest(text)

    def test_dataset(self, tmp_path):
        cams = orbit_cameras(2, size=16, focal=20.0)
        views = render_views(blob_cloud(30), cams, with_mask=True)
        doc = {"views": []}
        for i, v in enumerate(views):
            save_png(tmp_path / f"v{i}.png", v.image)
            save_png(tmp_path / f"m{i}.png", np.repeat(v.mask[..., None], 3, axis=2))
            (tmp_path / f"c{i}.json").write_text(json.dumps(camera_to_dict(v.camera)))
            doc["views"].append({"image": f"v{i}.png", "mask": f"m{i}.png", "camera": f"c{i}.json"})
        (tmp_path / "d.json").write_text(json.dumps(doc))
        ds = load_dataset(tmp_path / "d.json")
        assert len(ds.views) == 2 and ds.rig is None
        np.testing.assert_array_equal(ds.views[0].image, to_uint8(views[0].image) / 255.0)
        doc["extra"] = 1
        (tmp_path / "d.json").write_text(json.dumps(doc))
        with pytest.raises(ManifestError):
            load_dataset(tmp_path / "d.json")

    def test_metrics_files(self, tmp_path):
        txt, js = write_metrics(tmp_path / "m.txt", {"mean": {"psnr": 31.5}, "n": 2, "bad": float("inf")})
        assert "mean.psnr=31.5" in txt.read_text().splitlines()
        assert json.loads(js.read_text())["bad"] == "inf"


# --------------------------------------------------------------------------
# checkpoints


def avatar_recon(seed=0):
    mesh, w = toy_biped_mesh(0)
    av = build_avatar(mesh, w, toy_biped(), 10, seed, feature_dim=3, plane_resolution=3, hidden=4)
    rng = np.random.default_rng(seed)
    av.decoders.triplane.planes[:] = rng.normal(size=av.decoders.triplane.planes.shape)
    return Reconstruction(blob_cloud(15, seed), av, np.array([0.1, 0.2, 0.3]))


class TestCheckpoint:
    def test_byte_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        state = AdamState({"scene.positions": rng.normal(size=(15, 3))}, {"scene.positions": rng.random((15, 3))},
                          step=12, skipped=1)
        ck = Checkpoint(avatar_recon(), state, 12, {"seed": 3, "config_hash": "abc"})
        a = save_checkpoint(tmp_path / "a.hgsc", ck)
        b = save_checkpoint(tmp_path / "b.hgsc", load_checkpoint(tmp_path / "a.hgsc"))
        assert a == b
        back = decode_checkpoint(a)
        assert back.iteration == 12 and back.provenance == {"seed": 3, "config_hash": "abc"}
        assert back.train_state.step == 12 and back.train_state.skipped == 1
        np.testing.assert_array_equal(back.train_state.m["scene.positions"],
                                      state.m["scene.positions"].astype(np.float32))

    def test_iteration_without_optimizer_state(self):
        ck = decode_checkpoint(encode_checkpoint(Checkpoint(Reconstruction(blob_cloud(2)), None, 41)))
        assert ck.iteration == 41 and ck.train_state is None

    def test_loaded_equals_quantized(self):
        rec = avatar_recon()
        back = decode_checkpoint(encode_checkpoint(Checkpoint(rec))).recon
        q = rec.quantized()
        np.testing.assert_array_equal(back.scene.positions, q.scene.positions)
        np.testing.assert_array_equal(back.human.decoders.triplane.planes, q.human.decoders.triplane.planes)
        np.testing.assert_array_equal(back.compose().positions, q.compose().positions)

    def test_little_endian_floats(self):
        rec = Reconstruction(blob_cloud(1))
        data = encode_checkpoint(Checkpoint(rec))
        assert data[:4] == MAGIC
        assert struct.unpack("<I", data[4:8])[0] == FORMAT_VERSION
        x = np.float32(rec.scene.positions[0, 0])
        assert struct.pack("<f", x) in data

    def test_corrupted_magic(self):
        data = bytearray(encode_checkpoint(Checkpoint(avatar_recon())))
        data[0] ^= 0xFF
        with pytest.raises(CheckpointError):
            decode_checkpoint(bytes(data))

    def test_version_mismatch(self):
        data = bytearray(encode_checkpoint(Checkpoint(avatar_recon())))
        data[4:8] = struct.pack("<I", FORMAT_VERSION + 1)
        with pytest.raises(UnsupportedVersionError, match="version"):
            decode_checkpoint(bytes(data))

    def test_unknown_section_skipped(self, caplog):
        data = encode_checkpoint(Checkpoint(Reconstruction(blob_cloud(4))))
        count = struct.unpack("<I", data[8:12])[0]
        extra = struct.pack("<H", 6) + b"future" + struct.pack("<Q", 3) + b"xyz"
        patched = data[:8] + struct.pack("<I", count + 1) + data[12:] + extra
        with caplog.at_level(logging.WARNING):
            ck = decode_checkpoint(patched)
        assert ck.skipped_sections == ["future"] and "future" in caplog.text
        assert encode_checkpoint(ck) == data

    def test_truncated(self):
        data = encode_checkpoint(Checkpoint(avatar_recon()))
        for cut in (3, 10, 40, len(data) // 2, len(data) - 1):
            with pytest.raises(CheckpointError):
                decode_checkpoint(data[:cut])

    def test_trained_run_reevaluates_identically(self, tmp_path):
        gt = blob_cloud(500)
        cams = orbit_cameras(4, size=24, focal=26.0)
        views = render_views(gt, cams)
        tr = Trainer(Reconstruction(perturbed_init(gt)), views, TrainConfig(iterations=15, densify_from=10**9))
        tr.run(15)
        save_checkpoint(tmp_path / "run.hgsc", Checkpoint(tr.recon, tr.state, tr.iteration))
        back = load_checkpoint(tmp_path / "run.hgsc")
        assert back.iteration == 15
        held = render_views(gt, orbit_cameras(2, 0.4, size=24, focal=26.0))
        a = evaluate(back.recon, held, perceptual=None).mean["psnr"]
        b = evaluate(tr.recon.quantized(), held, perceptual=None).mean["psnr"]
        assert a == b
        assert abs(a - evaluate(tr.recon, held, perceptual=None).mean["psnr"]) < 1e-3


# --------------------------------------------------------------------------
# fuzzing


CORPUS = format_corpus()


@pytest.mark.parametrize("fmt", sorted(CORPUS))
def test_seed_files_parse(fmt):
    parse, seeds = CORPUS[fmt]
    for s in seeds:
        parse(s)


@pytest.mark.parametrize("fmt", sorted(CORPUS))
def test_fuzz_never_crashes(fmt):
    parse, seeds = CORPUS[fmt]
    logging.disable(logging.WARNING)
    try:
        with np.errstate(all="ignore"):
            ok, crashes = fuzz(parse, seeds, n=2000, seed=7)
    finally:
        logging.disable(logging.NOTSET)
    assert not crashes, [(d[:40], repr(e)) for d, e in crashes[:3]]
    assert issubclass(FormatError, ValueError)
