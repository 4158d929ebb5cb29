"""Volume/checkpoint round-trips, phantom generator properties, and the
command-line interface end to end."""

import json

import numpy as np
import pytest

from emnet import cli, network, phantom, volio
from emnet.errors import CheckpointError, DataError


class TestVolumeIO:
    def test_image_round_trip_bitwise(self, tmp_path, rng):
        vol = rng.standard_normal((6, 5, 4)).astype(np.float32)
        volio.save_volume(tmp_path / "v", vol, spacing=(0.5, 1.0, 2.0))
        back, meta = volio.load_volume(tmp_path / "v")
        assert back.dtype == np.float32
        assert np.array_equal(back, vol)
        assert meta["spacing"] == [0.5, 1.0, 2.0]
        assert meta["kind"] == "image"
        assert meta["dims"] == [6, 5, 4]

    def test_labels_round_trip_bitwise(self, tmp_path, rng):
        lab = rng.integers(0, 5, (4, 6, 8)).astype(np.uint8)
        volio.save_volume(tmp_path / "L", lab, kind="labels")
        back, meta = volio.load_volume(tmp_path / "L")
        assert back.dtype == np.uint8
        assert np.array_equal(back, lab)
        assert meta["dtype"] == "uint8"

    def test_raw_layout_is_x_fastest(self, tmp_path):
        vol = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        volio.save_volume(tmp_path / "v", vol)
        raw = np.frombuffer((tmp_path / "v.raw").read_bytes(), dtype="<f4")
        # flat index x + X*(y + Y*z)
        for z in range(4):
            for y in range(3):
                for x in range(2):
                    assert raw[x + 2 * (y + 3 * z)] == vol[x, y, z]

    def test_missing_pair(self, tmp_path):
        with pytest.raises(DataError):
            volio.load_volume(tmp_path / "nope")

    def test_size_mismatch(self, tmp_path, rng):
        volio.save_volume(tmp_path / "v", rng.standard_normal((4, 4, 4)))
        meta = json.loads((tmp_path / "v.json").read_text())
        meta["dims"] = [4, 4, 5]
        (tmp_path / "v.json").write_text(json.dumps(meta))
        with pytest.raises(DataError, match="does not match dims"):
            volio.load_volume(tmp_path / "v")

    def test_not_3d(self, tmp_path):
        with pytest.raises(DataError, match="3-D"):
            volio.save_volume(tmp_path / "v", np.zeros((4, 4)))


def tiny_net(seed=0):
    cfg = network.make_config("emnet", extents=(32, 32, 32), classes=3,
                              base_channels=4, d_state=4)
    return network.build(cfg, seed=seed)


class TestCheckpoints:
    def test_round_trip_restores_every_parameter(self, tmp_path):
        net = tiny_net(seed=3)
        volio.save_checkpoint(tmp_path / "m.ckpt", net)
        restored = volio.load_network(tmp_path / "m.ckpt")
        want = dict(net.named_params())
        got = dict(restored.named_params())
        assert sorted(want) == sorted(got)
        for name in want:
            assert np.array_equal(want[name].data, got[name].data), name
        assert restored.cfg.to_dict() == net.cfg.to_dict()

    def test_same_net_serializes_to_identical_bytes(self, tmp_path):
        net = tiny_net(seed=3)
        volio.save_checkpoint(tmp_path / "a.ckpt", net)
        volio.save_checkpoint(tmp_path / "b.ckpt", net)
        assert (tmp_path / "a.ckpt").read_bytes() == \
            (tmp_path / "b.ckpt").read_bytes()

    def test_restored_network_forward_is_bitwise(self, tmp_path, rng):
        from emnet.tensor import Tensor, no_grad
        net = tiny_net(seed=5)
        volio.save_checkpoint(tmp_path / "m.ckpt", net)
        restored = volio.load_network(tmp_path / "m.ckpt")
        x = rng.standard_normal((1, 32, 32, 32))
        with no_grad():
            a = net(Tensor(x)).data
            b = restored(Tensor(x)).data
        assert np.array_equal(a, b)

    def test_corruption_detected(self, tmp_path):
        net = tiny_net()
        p = tmp_path / "m.ckpt"
        volio.save_checkpoint(p, net)
        blob = bytearray(p.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        p.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            volio.load_checkpoint(p)

    def test_truncation_detected(self, tmp_path):
        net = tiny_net()
        p = tmp_path / "m.ckpt"
        volio.save_checkpoint(p, net)
        p.write_bytes(p.read_bytes()[:40])
        with pytest.raises(CheckpointError):
            volio.load_checkpoint(p)

    def test_empty_file_detected(self, tmp_path):
        p = tmp_path / "m.ckpt"
        p.write_bytes(b"")
        with pytest.raises(CheckpointError):
            volio.load_checkpoint(p)


class TestPhantom:
    def test_deterministic(self):
        spec = phantom.PhantomSpec(seed=7)
        img1, lab1 = phantom.gen_phantom(spec)
        img2, lab2 = phantom.gen_phantom(spec)
        assert np.array_equal(img1, img2)
        assert np.array_equal(lab1, lab2)

    def test_different_seeds_differ(self):
        _, lab1 = phantom.gen_phantom(phantom.PhantomSpec(seed=1))
        _, lab2 = phantom.gen_phantom(phantom.PhantomSpec(seed=2))
        assert not np.array_equal(lab1, lab2)

    def test_shapes_and_dtypes(self):
        img, lab = phantom.gen_phantom(phantom.PhantomSpec(extents=(16, 32, 8)))
        assert img.shape == (1, 16, 32, 8) and img.dtype == np.float32
        assert lab.shape == (16, 32, 8) and lab.dtype == np.uint8

    @pytest.mark.parametrize("classes", [2, 3, 5])
    def test_class_census(self, classes):
        """Every label appears, and no foreground class dominates."""
        for seed in range(5):
            _, lab = phantom.gen_phantom(
                phantom.PhantomSpec(classes=classes, seed=seed))
            n = lab.size
            assert set(np.unique(lab)) == set(range(classes))
            for k in range(1, classes):
                frac = (lab == k).sum() / n
                assert 0.005 <= frac <= 0.20, (seed, k, frac)

    def test_zero_noise_labels_match_ellipsoid_equation(self):
        organs = [(1, (16.0, 16.0, 16.0), (6.0, 4.0, 5.0))]
        spec = phantom.PhantomSpec(classes=2, organs=organs, noise=0.0)
        _, lab = phantom.gen_phantom(spec)
        gx, gy, gz = np.meshgrid(*[np.arange(32.0)] * 3, indexing="ij")
        e = ((gx - 16) / 6) ** 2 + ((gy - 16) / 4) ** 2 + ((gz - 16) / 5) ** 2
        assert np.array_equal(lab == 1, e <= 1.0)

    def test_zero_noise_background_intensity_is_flat(self):
        organs = [(1, (8.0, 8.0, 8.0), (3.0, 3.0, 3.0))]
        spec = phantom.PhantomSpec(extents=(32, 32, 32), classes=2,
                                   organs=organs, noise=0.0)
        img, lab = phantom.gen_phantom(spec)
        corner = img[0, 20:, 20:, 20:]
        assert np.allclose(corner, corner.flat[0])

    def test_overlapping_organs_later_wins(self):
        organs = [(1, (16.0, 16.0, 16.0), (8.0, 8.0, 8.0)),
                  (2, (16.0, 16.0, 16.0), (4.0, 4.0, 4.0))]
        spec = phantom.PhantomSpec(classes=3, organs=organs, noise=0.0)
        _, lab = phantom.gen_phantom(spec)
        assert lab[16, 16, 16] == 2
        assert lab[16, 16, 9] == 1

    def test_organ_validation(self):
        cases = [
            [(0, (16, 16, 16), (4, 4, 4))],          # background label
            [(5, (16, 16, 16), (4, 4, 4))],          # label >= classes
            [(1, (2.0, 16, 16), (4, 4, 4))],         # pokes out of bounds
            [(1, (16, 16, 16), (4, -1, 4))],         # negative radius
            [(1, (16, 16), (4, 4, 4))],              # 2-D center
        ]
        for organs in cases:
            with pytest.raises(DataError):
                phantom.gen_phantom(phantom.PhantomSpec(classes=3,
                                                        organs=organs))

    def test_dataset_items_are_independent_and_deterministic(self):
        spec = phantom.PhantomSpec()
        a = phantom.gen_dataset(3, spec, seed=11)
        b = phantom.gen_dataset(3, spec, seed=11)
        for (ia, la), (ib, lb) in zip(a, b):
            assert np.array_equal(ia, ib) and np.array_equal(la, lb)
        assert not np.array_equal(a[0][1], a[1][1])


def run_cli(*argv, capsys=None):
    code = cli.main(list(argv))
    if capsys is None:
        return code
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestCli:
    def test_end_to_end_pipeline(self, tmp_path, capsys):
        data = tmp_path / "data"
        run = tmp_path / "run"
        code, out, err = run_cli(
            "gen-phantom", "--out", str(data), "--count", "2",
            "--classes", "3", "--seed", "4", capsys=capsys)
        assert code == 0 and "wrote 2 phantom pair(s)" in out
        assert sorted(p.name for p in data.glob("*.raw")) == [
            "case0000_img.raw", "case0000_lab.raw",
            "case0001_img.raw", "case0001_lab.raw"]

        code, out, err = run_cli(
            "train", "--data", str(data), "--out", str(run),
            "--epochs", "2", "--val-count", "1", "--seed", "4",
            capsys=capsys)
        assert code == 0 and "done: 2 epoch(s)" in out
        assert (run / "model.ckpt").exists()
        history = (run / "history.csv").read_text().splitlines()
        assert history[0] == "epoch,loss,mean_dsc,dsc_1,dsc_2"
        assert len(history) == 3

        code, out, err = run_cli(
            "infer", "--checkpoint", str(run / "model.ckpt"),
            "--image", str(data / "case0001_img"),
            "--out", str(run / "pred"), capsys=capsys)
        assert code == 0
        pred, meta = volio.load_volume(run / "pred")
        assert pred.shape == (32, 32, 32) and meta["kind"] == "labels"

        code, out, err = run_cli(
            "eval", "--pred", str(run / "pred"),
            "--ref", str(data / "case0001_lab"), "--classes", "3",
            "--hd95", "--out", str(run / "report.csv"), capsys=capsys)
        assert code == 0
        assert out.splitlines()[0].split() == ["label", "dsc%", "hausdorff",
                                               "hd95"]
        report = (run / "report.csv").read_text().splitlines()
        assert report[0] == "case,class,dsc,hd"
        assert len(report) == 3  # header + 2 foreground labels

    def test_infer_with_window_matches_direct(self, tmp_path):
        data = tmp_path / "data"
        run = tmp_path / "run"
        assert run_cli("gen-phantom", "--out", str(data), "--count", "1") == 0
        assert run_cli("train", "--data", str(data), "--out", str(run),
                       "--epochs", "1") == 0
        common = ["infer", "--checkpoint", str(run / "model.ckpt"),
                  "--image", str(data / "case0000_img")]
        assert run_cli(*common, "--out", str(run / "whole")) == 0
        assert run_cli(*common, "--out", str(run / "tiled"),
                       "--window", "32,32,32") == 0
        a, _ = volio.load_volume(run / "whole")
        b, _ = volio.load_volume(run / "tiled")
        assert np.array_equal(a, b)

    def test_config_file_precedence(self, tmp_path):
        """config file overrides parser defaults; explicit flags override both."""
        data = tmp_path / "data"
        assert run_cli("gen-phantom", "--out", str(data), "--count", "1") == 0
        conf = tmp_path / "train.conf"
        conf.write_text("epochs = 2\nlr = 0.5\n# comment line\n\nseed = 9\n")

        out1 = tmp_path / "run1"
        assert run_cli("train", "--data", str(data), "--out", str(out1),
                       "--config", str(conf)) == 0
        hist1 = out1 / "history.csv"
        assert len(hist1.read_text().splitlines()) == 3  # 2 epochs from file

        out2 = tmp_path / "run2"
        assert run_cli("train", "--data", str(data), "--out", str(out2),
                       "--config", str(conf), "--epochs", "1") == 0
        assert len((out2 / "history.csv").read_text().splitlines()) == 2

    def test_config_file_unknown_key(self, tmp_path, capsys):
        data = tmp_path / "data"
        assert run_cli("gen-phantom", "--out", str(data), "--count", "1") == 0
        conf = tmp_path / "bad.conf"
        conf.write_text("epohcs = 2\n")
        code, out, err = run_cli("train", "--data", str(data),
                                 "--out", str(tmp_path / "r"),
                                 "--config", str(conf), capsys=capsys)
        assert code == 2
        assert err.count("\n") == 1 and err.startswith("error: config:")

    def test_errors_are_single_line_with_code(self, tmp_path, capsys):
        code, out, err = run_cli("train", "--data", str(tmp_path / "missing"),
                                 "--out", str(tmp_path / "r"), capsys=capsys)
        assert code == 2
        assert err.count("\n") == 1 and err.startswith("error: data:")

        code, out, err = run_cli("gen-phantom", "--out", str(tmp_path / "d"),
                                 "--extents", "banana", capsys=capsys)
        assert code == 2
        assert err.startswith("error: config:")

    def test_params_table(self, capsys):
        code, out, err = run_cli("params", "--preset", "emnet", capsys=capsys)
        assert code == 0
        lines = out.splitlines()
        assert lines[0].split() == ["preset", "stage", "blocks", "params",
                                    "flops"]
        assert len(lines) == 2 and "csrm,csrm,csrmf,csrmf" in lines[1]
        assert "172,970" in lines[1]

    def test_gradcheck_single_case(self, capsys):
        code, out, err = run_cli("gradcheck", "--case", "layer_norm",
                                 "--samples", "4", capsys=capsys)
        assert code == 0
        assert "layer_norm" in out and "pass" in out
        assert "conv3d" not in out

    def test_bench_selected_op(self, tmp_path, capsys):
        out_csv = tmp_path / "bench.csv"
        code, out, err = run_cli("bench", "--ops", "scan",
                                 "--out", str(out_csv), capsys=capsys)
        assert code == 0
        assert "scan scaling slope" in out
        lines = out_csv.read_text().splitlines()
        assert lines[0] == "op,backend,size,seconds,bytes"
        assert all(line.startswith("scan,") for line in lines[1:])
