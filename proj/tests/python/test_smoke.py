"""Smoke tests for the compiled petlab module."""

import json
import subprocess
import os

import numpy as np
import pytest

import petlab


def test_version():
    assert petlab.__version__


def test_matmul_matches_numpy():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((5, 7))
    b = rng.standard_normal((7, 3))
    out = petlab.matmul(petlab.Tensor(a), petlab.Tensor(b)).numpy()
    assert np.allclose(out, a @ b, atol=1e-12)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 9))
    s = petlab.softmax(petlab.Tensor(x)).numpy()
    assert np.allclose(s.sum(axis=1), 1.0, atol=1e-9)
    assert (s >= 0).all()


def test_tape_gradients():
    w = petlab.Tensor(np.array([1.0, -2.0, 3.0]))
    w.requires_grad = True
    with petlab.Tape() as tape:
        loss = petlab.sum(petlab.mul(w, w))
        tape.backward(loss)
    assert np.allclose(w.grad(), [2.0, -4.0, 6.0])


def test_cross_entropy_gradcheck_small():
    result = petlab.gradcheck(cases=3, coords=10)
    assert result["passed"], result["report"]


def test_task_generation_is_deterministic():
    (xa, ya), _ = petlab.make_task("cue", classes=6, n_train=24, n_test=12, seed=9)
    (xb, yb), _ = petlab.make_task("cue", classes=6, n_train=24, n_test=12, seed=9)
    assert (xa == xb).all()
    assert (ya == yb).all()
    assert xa.shape == (24, 3, 16, 16)
    assert set(ya) == set(range(6))


def test_corpus_roundtrip(tmp_path):
    (x, y), _ = petlab.make_task("template", classes=4, n_train=10, n_test=5, seed=3)
    path = str(tmp_path / "t.pimg")
    petlab.save_corpus(path, x, y)
    rx, ry = petlab.load_corpus(path)
    assert (rx == x).all()
    assert (ry == y).all()


def test_param_counts_match_linear_closed_form():
    cfg = json.loads(petlab.default_config())
    counts = {row["method"]: row for row in petlab.param_counts(json.dumps(cfg))}
    width = cfg["vit"]["width"]
    classes = cfg["tasks"][0]["classes"]
    assert counts["linear"]["trainable"] == classes * width + classes
    assert counts["dvpt-shared-l4"]["metanet"] > 0


def test_tiny_experiment_end_to_end(tmp_path):
    cfg = json.loads(petlab.default_config())
    cfg["backbone"] = str(tmp_path / "backbone.ckpt")
    cfg["output"] = str(tmp_path / "out")
    cfg["vit"] = {
        "layers": 2, "width": 16, "heads": 4,
        "image_h": 8, "image_w": 8, "patch_h": 2, "patch_w": 2,
        "upstream_classes": 6,
    }
    cfg["upstream"] = {"classes": 6, "n_train": 48, "n_test": 12, "seed": 5}
    cfg["pretrain"] = {"epochs": 150, "batch_size": 16, "seed": 5}
    cfg["train"] = {"epochs": 2, "batch_size": 16}
    cfg["seeds"] = [1]
    cfg["tasks"] = [{
        "name": "toy", "kind": "template", "classes": 4,
        "n_train": 40, "n_test": 16, "seed": 21,
    }]
    cfg["methods"] = [{"kind": "linear"}, {"kind": "dvpt", "p": 2, "metanet_layers": 2}]

    ckpt = petlab.pretrain(json.dumps(cfg))
    assert os.path.exists(ckpt)

    csv = petlab.run_matrix(json.dumps(cfg))
    lines = csv.strip().splitlines()
    assert lines[0] == "method,task,seed_count,mean_acc,std,trainable_params,wins_vs_full"
    assert len(lines) == 3
    for line in lines[1:]:
        acc = float(line.split(",")[3])
        assert 0.0 <= acc <= 1.0
    assert (tmp_path / "out" / "matrix" / "summary.csv").exists()


def test_cli_exit_codes(tmp_path):
    cli = os.environ.get("PETLAB_CLI")
    if not cli:
        pytest.skip("PETLAB_CLI not set")
    # unknown flag: usage and exit 2
    proc = subprocess.run([cli, "run", "--bogus"], capture_output=True)
    assert proc.returncode == 2
    # config error: exit 2
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    proc = subprocess.run([cli, "run", "--config", str(bad)], capture_output=True)
    assert proc.returncode == 2
