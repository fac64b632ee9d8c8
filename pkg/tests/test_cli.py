"""End-to-end command-line checks through main(argv)."""

import pathlib

import numpy as np
import pytest

from mffd import cli, cli_io, netgraph as ng, tensor_core as tc, trainer as tr

DATA = pathlib.Path(__file__).parent / "data"

TOY_CFG = """input 3 64 64
front 4 4 8
tinier T1 2 8
maxpool
tinier T2 2 8
detect low 2 3
upsample from=T2
concat T1 upsample1
detect high 2 3 from=concat1
anchors 1,1 2,1.5
"""


def write_toy_net(tmp_path, zero=False, seed=0):
    cfg = tmp_path / "toy.cfg"
    cfg.write_text(TOY_CFG)
    spec = cli_io.read_network(cfg)
    store = tr.init_weights(spec, seed=seed)
    if zero:
        for params in store.values():
            if isinstance(params, tc.ConvWeights):
                params.weights[:] = 0
                params.bias[:] = 0
    weights = tmp_path / "toy.weights"
    cli_io.save_weights(weights, spec, store)
    return cfg, weights, spec


def write_image(path, hw=(64, 64), seed=0):
    r = np.random.Generator(np.random.PCG64(seed))
    img = (r.integers(0, 256, (3, *hw)) / 255.0).astype(np.float32)
    cli_io.save_ppm(path, img)
    return img


# -- report commands -------------------------------------------------------------


def test_params_reference_table(capsys):
    assert cli.main(["params", "--variant", "ref", "--classes", "20", "--boxes", "5"]) == 0
    out = capsys.readouterr().out
    assert "112,320" in out  # Front
    assert "2,555,904" in out  # Tin.4
    assert "3,635,904" in out  # total
    assert out.splitlines()[0].split() == ["Module", "Params"]


def test_params_variant_b(capsys):
    assert cli.main(["params", "--variant", "mffd_b"]) == 0
    assert "6,256,320" in capsys.readouterr().out


def test_shapes_reference_table(capsys):
    assert cli.main(["shapes", "--variant", "ref", "--classes", "20"]) == 0
    out = capsys.readouterr().out
    lines = out.splitlines()
    assert lines[0].split() == ["Layer", "Output", "size"]
    assert lines[1].split() == ["Input", "320", "x", "576", "x", "3"]
    assert any(l.split() == ["Tin.3", "20", "x", "36", "x", "512"] for l in lines)
    assert any(l.split() == ["Det", "10", "x", "18", "x", "125"] for l in lines)


def test_config_prints_golden_text(capsys):
    assert cli.main(["config", "--variant", "mffd_a", "--classes", "3", "--boxes", "5"]) == 0
    assert capsys.readouterr().out == (DATA / "mffd_a.cfg").read_text()


def test_config_writes_parseable_file(tmp_path, capsys):
    out = tmp_path / "net.cfg"
    assert cli.main(["config", "--variant", "mffd_b", "--out", str(out)]) == 0
    spec = cli_io.read_network(out)
    assert spec.variant == "custom"  # parsed configs are plain graphs
    assert ng.count_params(spec).total == 6_256_320


# -- inference -------------------------------------------------------------------


def test_infer_zero_weights_finds_nothing(tmp_path, capsys):
    cfg, weights, _ = write_toy_net(tmp_path, zero=True)
    img = tmp_path / "in.ppm"
    write_image(img)
    rc = cli.main(["infer", "--config", str(cfg), "--weights", str(weights), "--image", str(img)])
    assert rc == 0
    assert capsys.readouterr().out == ""  # score 0.5 * 1/3 sits under conf 0.25


def test_infer_low_conf_emits_lines_and_heatmap(tmp_path, capsys):
    cfg, weights, _ = write_toy_net(tmp_path, zero=True)
    img = tmp_path / "in.ppm"
    write_image(img)
    heat = tmp_path / "heat.pgm"
    rc = cli.main(
        ["infer", "--config", str(cfg), "--weights", str(weights), "--image", str(img), "--conf", "0.1", "--heatmap", str(heat), "--names", "a,b,c"]
    )
    assert rc == 0
    out_lines = capsys.readouterr().out.splitlines()
    assert out_lines, "expected detections at conf 0.1"
    name, score, *coords = out_lines[0].split()
    assert name in ("a", "b", "c")
    assert 0.1 <= float(score) <= 1.0
    assert len(coords) == 4
    # all-zero logits give sigma(0) = 0.5 everywhere: a uniform mid-gray map
    blob = heat.read_bytes()
    assert blob.startswith(b"P5\n64 64\n255\n")
    assert set(blob[-64 * 64 :]) == {128}


def test_infer_writes_detection_file(tmp_path):
    cfg, weights, _ = write_toy_net(tmp_path, zero=True)
    img = tmp_path / "in.ppm"
    write_image(img)
    out = tmp_path / "dets.txt"
    rc = cli.main(["infer", "--config", str(cfg), "--weights", str(weights), "--image", str(img), "--conf", "0.1", "--out", str(out)])
    assert rc == 0
    rows = cli_io.read_detections(out)
    assert rows and all(len(r) == 3 for r in rows)


# -- training --------------------------------------------------------------------


def write_training_dir(tmp_path, n=2):
    data = tmp_path / "data"
    data.mkdir()
    for i in range(n):
        write_image(data / f"img{i}.ppm", seed=i)
        # one 24x16 Car per image, shifted per index
        x1, y1 = 8 + 4 * i, 16
        (data / f"img{i}.txt").write_text(
            f"Car 0.00 0 0.0 {x1}.00 {y1}.00 {x1 + 24}.00 {y1 + 16}.00 0 0 0 0 0 0 0\n"
        )
    return data


def test_train_writes_weights_and_log(tmp_path, capsys):
    cfg, _, spec = write_toy_net(tmp_path)
    data = write_training_dir(tmp_path)
    out = tmp_path / "model.weights"
    log = tmp_path / "train.log"
    rc = cli.main(
        [
            "train", "--config", str(cfg), "--data", str(data),
            "--epochs", "4", "--batch-size", "2", "--seed", "1",
            "--out", str(out), "--log", str(log),
        ]
    )
    assert rc == 0
    assert out.exists()
    lines = log.read_text().splitlines()
    assert len(lines) == 4  # one batch per epoch
    assert lines[0].split()[0] == "1"
    store = cli_io.load_weights(out, cli_io.read_network(cfg))
    assert set(store) == set(tr.init_weights(spec, 0))


def test_train_is_reproducible(tmp_path):
    cfg, _, _ = write_toy_net(tmp_path)
    data = write_training_dir(tmp_path)
    outs = []
    for run in ("a", "b"):
        out = tmp_path / f"{run}.weights"
        log = tmp_path / f"{run}.log"
        rc = cli.main(
            ["train", "--config", str(cfg), "--data", str(data), "--epochs", "3", "--batch-size", "2", "--seed", "5", "--out", str(out), "--log", str(log)]
        )
        assert rc == 0
        outs.append((out.read_bytes(), log.read_bytes()))
    assert outs[0] == outs[1]


def test_train_resume_continues_from_weights(tmp_path):
    cfg, weights, _ = write_toy_net(tmp_path, seed=3)
    data = write_training_dir(tmp_path)
    out = tmp_path / "resumed.weights"
    rc = cli.main(
        ["train", "--config", str(cfg), "--data", str(data), "--epochs", "1", "--batch-size", "2", "--resume", str(weights), "--out", str(out), "--log", str(tmp_path / "r.log")]
    )
    assert rc == 0
    assert out.read_bytes() != weights.read_bytes()  # a step actually happened


# -- evaluation ------------------------------------------------------------------


def write_eval_dirs(tmp_path, perfect=True):
    labels = tmp_path / "labels"
    dets = tmp_path / "dets"
    labels.mkdir()
    dets.mkdir()
    boxes = [("Car", 10, 20, 60, 60), ("Pedestrian", 100, 30, 120, 80)]
    for img in range(2):
        label_lines = []
        det_lines = []
        for name, x1, y1, x2, y2 in boxes:
            x1 += img * 5
            x2 += img * 5
            label_lines.append(f"{name} 0.00 0 0.0 {x1}.00 {y1}.00 {x2}.00 {y2}.00 0 0 0 0 0 0 0")
            bx1 = x1 if perfect else x1 + 30
            det_lines.append(f"{name} 0.900000 {bx1}.000000 {y1}.000000 {x2 if perfect else bx1 + 10}.000000 {y2}.000000")
        (labels / f"{img:06d}.txt").write_text("\n".join(label_lines) + "\n")
        (dets / f"{img:06d}.txt").write_text("\n".join(det_lines) + "\n")
    return labels, dets


def test_eval_perfect_detections_score_full_marks(tmp_path, capsys):
    labels, dets = write_eval_dirs(tmp_path, perfect=True)
    rc = cli.main(["eval", "--dets", str(dets), "--labels", str(labels), "--voc", "--difficulty", "all"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "mAP" in out and "100.0000" in out


def test_eval_kitti_default_table(tmp_path, capsys):
    labels, dets = write_eval_dirs(tmp_path, perfect=True)
    rc = cli.main(["eval", "--dets", str(dets), "--labels", str(labels)])
    assert rc == 0
    out = capsys.readouterr().out
    assert out.startswith("difficulty: moderate")
    assert "Car" in out and "Cyclist" in out and "(no gt)" in out


def test_eval_writes_pr_csvs(tmp_path):
    labels, dets = write_eval_dirs(tmp_path, perfect=True)
    pr = tmp_path / "pr"
    rc = cli.main(["eval", "--dets", str(dets), "--labels", str(labels), "--voc", "--difficulty", "all", "--pr-dir", str(pr)])
    assert rc == 0
    car_csv = (pr / "Car.csv").read_text().splitlines()
    assert car_csv[0] == "recall,precision"
    assert car_csv[-1] == "1.000000,1.000000"


# -- anchors and bench ---------------------------------------------------------------


def test_anchors_command_prints_fitted_priors(tmp_path, capsys):
    labels, _ = write_eval_dirs(tmp_path)
    rc = cli.main(["anchors", "--labels", str(labels), "--image-size", "576x320", "--k", "2", "--seed", "0"])
    assert rc == 0
    out = capsys.readouterr().out
    assert out.startswith("anchors ")
    pairs = out.split()[1:]
    assert len(pairs) == 2
    for p in pairs:
        w, h = p.split(",")
        assert float(w) > 0 and float(h) > 0


def test_bench_reports_timing(tmp_path, capsys):
    cfg, weights, _ = write_toy_net(tmp_path)
    rc = cli.main(["bench", "--config", str(cfg), "--weights", str(weights), "--iters", "3"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "iters: 3" in out
    mean = [l for l in out.splitlines() if l.startswith("mean_ms:")]
    assert mean and float(mean[0].split()[1]) > 0


# -- exit codes -----------------------------------------------------------------------


def test_no_arguments_prints_usage_and_fails(capsys):
    assert cli.main([]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_subcommand_fails(capsys):
    assert cli.main(["frobnicate"]) == 1


def test_missing_file_exits_2(tmp_path, capsys):
    rc = cli.main(["infer", "--config", str(tmp_path / "nope.cfg"), "--weights", "x", "--image", "y"])
    assert rc == 2


def test_malformed_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("input 3 64\n")
    rc = cli.main(["infer", "--config", str(bad), "--weights", "x", "--image", "y"])
    assert rc == 2
