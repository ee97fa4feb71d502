import csv
import filecmp
import shutil

import numpy as np
import pytest

from gar3d import cli
from gar3d.attention import AttentionMask, build_group_causal_mask
from gar3d.fileio import load_predictions, read_kv
from gar3d.model import load_checkpoint

MODEL = ["--layers", "2", "--dim", "16", "--heads", "2", "--patch", "4"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--n-scenes", 2, "--n-frames", 4, "--height", 8, "--width", 8,
               "--seed", 1, "--out", root / "data") == 0
    assert run("train", "--dataset", root / "data", "--out", root / "run", "--steps", 2,
               "--seq-min", 2, "--seq-max", 3, *MODEL) == 0
    return root


def _tree_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(_tree_equal(a / d, b / d) for d in cmp.common_dirs)


def test_synth_byte_identical(tmp_path, capsys):
    args = ["synth", "--n-scenes", 2, "--n-frames", 2, "--height", 8, "--width", 8, "--seed", 4,
            "--out", tmp_path / "a", "--force"]
    assert run(*args) == 0
    shutil.copytree(tmp_path / "a", tmp_path / "first")
    assert run(*args) == 0
    assert _tree_equal(tmp_path / "a", tmp_path / "first")
    assert "# effective config" in capsys.readouterr().out
    man = read_kv(tmp_path / "a" / "manifest.txt")
    assert int(man["total_frames"]) == 4
    assert sum(k.startswith("scene_") for k in man) == 2
    assert (tmp_path / "a" / "config.txt").exists()


def test_synth_zero_scenes(tmp_path):
    assert run("synth", "--n-scenes", 0, "--out", tmp_path / "e") == 0
    man = read_kv(tmp_path / "e" / "manifest.txt")
    assert man["total_frames"] == "0" and not any(k.startswith("scene_") for k in man)


def test_refuses_non_empty_dir_without_force(tmp_path):
    args = ["synth", "--n-scenes", 1, "--n-frames", 1, "--height", 8, "--width", 8, "--out", tmp_path]
    (tmp_path / "junk").write_text("x")
    assert run(*args) == cli.EXIT_USAGE
    assert run(*args, "--force") == 0
    assert not (tmp_path / "junk").exists()


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "synth.cfg"
    cfg.write_text("# desk scale\nn-scenes=1\nn_frames=2\nheight=8\nwidth=8\nseed=9\n")
    assert run("synth", "--config", cfg, "--seed", 3, "--out", tmp_path / "d") == 0
    eff = read_kv(tmp_path / "d" / "config.txt")
    assert eff["seed"] == "3" and eff["n_frames"] == "2" and eff["n_scenes"] == "1"
    cfg.write_text("colour=blue\n")
    assert run("synth", "--config", cfg, "--out", tmp_path / "x") == cli.EXIT_USAGE
    assert run("synth", "--config", tmp_path / "missing.cfg", "--out", tmp_path / "x") == cli.EXIT_USAGE


def test_usage_errors(tmp_path):
    assert run() == cli.EXIT_USAGE
    assert run("frobnicate") == cli.EXIT_USAGE
    assert run("bench", "--queues", "0", "--out", tmp_path) == cli.EXIT_USAGE


def test_train_outputs(workspace):
    run_dir = workspace / "run"
    rows = list(csv.reader(open(run_dir / "losses.csv")))
    assert rows[0][0] == "step" and len(rows) == 3
    eff = read_kv(run_dir / "config.txt")
    assert eff["lr"] == "0.003" and eff["schedule"] == "cosine"
    assert load_checkpoint(run_dir / "checkpoint.garg").config.layers == 2


def test_train_zero_steps_is_initialisation(workspace, tmp_path):
    from gar3d.model import GroupAutoregressiveModel

    assert run("train", "--dataset", workspace / "data", "--out", tmp_path / "r", "--steps", 0, *MODEL) == 0
    m = load_checkpoint(tmp_path / "r" / "checkpoint.garg")
    fresh = GroupAutoregressiveModel(m.config)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(m.parameters(), fresh.parameters()))


def test_train_rerun_identical(workspace, tmp_path):
    args = ["train", "--dataset", workspace / "data", "--steps", 2, "--seq-min", 2, "--seq-max", 3, *MODEL]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "a", "--force") == 0
    assert run(*args, "--out", workspace / "run", "--force") == 0
    assert filecmp.cmp(tmp_path / "a" / "losses.csv", workspace / "run" / "losses.csv", shallow=False)
    assert filecmp.cmp(tmp_path / "a" / "checkpoint.garg", workspace / "run" / "checkpoint.garg", shallow=False)


def test_train_errors(workspace, tmp_path):
    assert run("train", "--dataset", tmp_path / "nothing", "--out", tmp_path / "o") == cli.EXIT_CONTRACT
    assert run("train", "--dataset", workspace / "data", "--out", tmp_path / "o",
               "--seq-min", 1) == cli.EXIT_USAGE


def _infer(workspace, out, *extra):
    return run("infer", "--checkpoint", workspace / "run" / "checkpoint.garg",
               "--scene", workspace / "data" / "scene_000", "--out", out, "--force", *extra)


@pytest.mark.parametrize("G", [1, 2])
def test_offline_online_exports_agree(workspace, tmp_path, G):
    assert _infer(workspace, tmp_path / "off", "--mode", "offline", "--group-size", G) == 0
    assert _infer(workspace, tmp_path / "on", "--mode", "online", "--group-size", G, "--queue", "inf") == 0
    a, b = load_predictions(tmp_path / "off"), load_predictions(tmp_path / "on")
    np.testing.assert_allclose(a.points, b.points, atol=1e-5)
    np.testing.assert_allclose(a.confidence, b.confidence, atol=1e-5)
    assert b.manifest["queue"] == "inf" and b.manifest["mode"] == "online"


def test_online_matches_masked_offline(workspace, tmp_path):
    from gar3d.model import load_checkpoint
    from gar3d.synthdata import read_scene
    from gar3d import numkernel as nk

    assert _infer(workspace, tmp_path / "on", "--mode", "online", "--group-size", 2, "--queue", "inf") == 0
    model = load_checkpoint(workspace / "run" / "checkpoint.garg")
    with nk.no_grad():
        ref = model.forward_offline(read_scene(workspace / "data" / "scene_000").bundles(), group_size=2)
    np.testing.assert_allclose(load_predictions(tmp_path / "on").points, ref.local_points.data, atol=1e-5)


def test_online_respects_queue(workspace, tmp_path):
    assert _infer(workspace, tmp_path / "q", "--mode", "online", "--group-size", 1, "--queue", 2) == 0
    man = load_predictions(tmp_path / "q").manifest
    assert int(man["peak_cache_frames"]) <= 2 + 1 and man["queue"] == "2"
    assert _infer(workspace, tmp_path / "auto", "--mode", "online", "--group-size", 2) == 0
    assert load_predictions(tmp_path / "auto").manifest["queue"] == "4"


def test_hybrid_full_prefill_equals_offline(workspace, tmp_path):
    assert _infer(workspace, tmp_path / "off", "--mode", "offline") == 0
    assert _infer(workspace, tmp_path / "hyb", "--mode", "hybrid", "--prefill", 4) == 0
    np.testing.assert_allclose(load_predictions(tmp_path / "hyb").points,
                               load_predictions(tmp_path / "off").points, atol=1e-10)


def test_infer_group_exceeding_queue_is_usage_error(workspace, tmp_path):
    assert _infer(workspace, tmp_path / "x", "--mode", "online", "--group-size", 3, "--queue", 2) == cli.EXIT_USAGE
    assert _infer(workspace, tmp_path / "x", "--mode", "hybrid", "--prefill", 3, "--queue", 2) == cli.EXIT_USAGE


def test_eval_ground_truth_as_prediction(workspace, tmp_path, capsys):
    from gar3d.fileio import save_predictions
    from gar3d.synthdata import read_scene

    scene = read_scene(workspace / "data" / "scene_000")
    save_predictions(tmp_path / "gt", scene.local_points, np.ones(scene.depth.shape),
                     [f.pose for f in scene.frames], {"mode": "gt"})
    assert run("eval", "--pred", tmp_path / "gt", "--scene", workspace / "data" / "scene_000",
               "--out", tmp_path / "r.csv") == 0
    header, values = list(csv.reader(open(tmp_path / "r.csv")))
    r = dict(zip(header, values))
    for k in ("ate", "rpe_tra", "rpe_rot", "absrel", "rmse", "acc", "comp"):
        assert float(r[k]) < 1e-6, k
    assert float(r["delta125"]) == 1.0 and abs(float(r["nc"]) - 1) < 1e-9
    assert "delta125" in capsys.readouterr().out

    save_predictions(tmp_path / "x2", 2 * scene.local_points, np.ones(scene.depth.shape),
                     [f.pose for f in scene.frames], {"mode": "gt"})
    assert run("eval", "--pred", tmp_path / "x2", "--scene", workspace / "data" / "scene_000",
               "--align", "median", "--out", tmp_path / "m.csv") == 0
    header, values = list(csv.reader(open(tmp_path / "m.csv")))
    assert float(dict(zip(header, values))["absrel"]) < 1e-12


def test_eval_reproducible_and_count_mismatch(workspace, tmp_path):
    assert _infer(workspace, tmp_path / "p", "--mode", "offline") == 0
    for name in ("a.csv", "b.csv"):
        assert run("eval", "--pred", tmp_path / "p", "--scene", workspace / "data" / "scene_000",
                   "--out", tmp_path / name) == 0
    assert filecmp.cmp(tmp_path / "a.csv", tmp_path / "b.csv", shallow=False)
    assert run("eval", "--pred", tmp_path / "p", "--scene", workspace / "data" / "scene_001") == 0
    from gar3d.synthdata import generate_scene, write_scene
    write_scene(generate_scene(3, 2, 8, 8), tmp_path / "short")
    assert run("eval", "--pred", tmp_path / "p", "--scene", tmp_path / "short") == cli.EXIT_CONTRACT


def test_bench_outputs(tmp_path):
    assert run("bench", "--frames", "4,8", "--queues", "2,inf", "--group-sizes", "1,2", "--out", tmp_path,
               "--emit-plot", *MODEL) == 0
    rows = list(csv.DictReader(open(tmp_path / "bench.csv")))
    assert len(rows) == 2 * 2 * 2
    for r in rows:
        assert int(r["peak_kv_floats"]) == int(r["expected_kv_floats"])
        if r["Q"] != "inf":
            assert int(r["peak_cache_frames"]) <= int(r["Q"]) + int(r["G"])
    bounded = [r for r in rows if r["Q"] == "2" and r["G"] == "1"]
    assert len({r["touched_keys_last_step"] for r in bounded}) == 1
    unbounded = [r for r in rows if r["Q"] == "inf" and r["G"] == "1"]
    assert int(unbounded[1]["touched_keys_last_step"]) > int(unbounded[0]["touched_keys_last_step"])
    for name in ("capacity_sweep.svg", "group_sweep.svg"):
        assert (tmp_path / name).read_text().startswith("<?xml")


def test_bench_plot_deterministic(tmp_path):
    rows = [{"N": n, "Q": "inf", "G": 1, "t": float(n)} for n in (1, 2, 3)]
    cli.write_bench_svg(rows, tmp_path / "a.svg", "N", "t", "Q", "t")
    cli.write_bench_svg(rows, tmp_path / "b.svg", "N", "t", "Q", "t")
    assert filecmp.cmp(tmp_path / "a.svg", tmp_path / "b.svg", shallow=False)


def test_expected_peak_floats():
    # 5 frames, groups of 2, queue 2: queue holds 2, plus an incoming group of 2
    assert cli.expected_peak_floats(1, 1, 1, 5, 2, 2) == 2 * 4
    assert cli.expected_peak_floats(2, 3, 4, 5, 1, None) == 2 * 5 * 3 * 4 * 2


def test_check_passes(capsys):
    assert run("check") == cli.EXIT_OK
    out = capsys.readouterr().out
    lines = [l for l in out.splitlines() if l.startswith(("PASS", "FAIL"))]
    assert len(lines) >= 9 and all("tolerance=" in l and "measured=" in l for l in lines)


def test_check_fails_on_corrupted_mask(capsys):
    def corrupted(N, G):
        allow = build_group_causal_mask(N, G).allow.copy()
        allow[0, -1] = True          # first frame peeks at the last one
        return AttentionMask(allow)

    assert cli.cmd_check(None, mask_builder=corrupted) == cli.EXIT_CHECK
    out = capsys.readouterr().out
    assert any(l.startswith("FAIL") and "mask_oracle" in l for l in out.splitlines())
