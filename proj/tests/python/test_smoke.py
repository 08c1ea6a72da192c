import json
import math
import os
import subprocess

import numpy as np
import pytest

import rcalign


def test_mechanisms_listed():
    assert sorted(rcalign.mechanism_names()) == sorted(["location_sensitive", "gmm", "forward", "rc"])


def test_recursion_matches_hand_example():
    out = rcalign.rc_recursion([0.5, 0.5, 0.0], [0.4, 0.6, 0.8])
    assert out == pytest.approx([0.2, 0.6, 0.2], abs=1e-15)


def test_recursion_keeps_unit_mass():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 20))
        prev = rng.dirichlet(np.ones(n))
        out = rcalign.rc_recursion(prev.tolist(), rng.uniform(size=n).tolist())
        assert math.isclose(sum(out), 1.0, abs_tol=1e-12)
        assert min(out) >= 0.0


def test_spearman_against_scipy_free_oracle():
    x = [1.0, 2.0, 3.0, 4.0, 5.0]
    y = [5.0, 6.0, 7.0, 8.0, 7.0]
    # Ranks of y with ties averaged: 1, 2, 3.5, 5, 3.5.
    rx = np.array([1, 2, 3, 4, 5], float)
    ry = np.array([1, 2, 3.5, 5, 3.5])
    expect = np.corrcoef(rx, ry)[0, 1]
    assert rcalign.spearman(x, y) == pytest.approx(expect, abs=1e-12)
    assert rcalign.spearman([1.0, 1.0], [2.0, 3.0]) is None


def test_corpus_generation_is_deterministic(tmp_path):
    cfg = json.dumps({"n_utterances": 10, "seed": 20240})
    a = rcalign.gen_corpus(cfg)
    b = rcalign.gen_corpus(cfg)
    assert len(a) == 10
    assert a.content_hash == b.content_hash
    u = a.utterance(0)
    assert u["frames"].shape == (sum(u["durations"]), a.feature_dim)
    path = tmp_path / "c.rcds"
    a.save(str(path))
    assert rcalign.load_corpus(str(path)).content_hash == a.content_hash


def test_bad_config_raises():
    with pytest.raises(rcalign.ConfigError):
        rcalign.gen_corpus(json.dumps({"n_utterances": 10, "typo": 1}))
    with pytest.raises(rcalign.FormatError):
        rcalign.load_corpus("/nonexistent/corpus.rcds")


def test_synthesis_shapes_and_normalization():
    cfg = json.dumps({"vocab_size": 6, "feature_dim": 3, "d_dec": 16, "mechanism": "rc"})
    model = rcalign.new_model(cfg, seed=3)
    assert model.mechanism == "rc"
    out = model.synthesize([1, 4, 2], [3, 2, 5], style=0, max_steps=25)
    t = out["alignment"].shape[0]
    assert out["alignment"].shape == (t, 3)
    assert out["frames"].shape == (t, 3)
    assert out["omegas"].shape == (t, 3)
    np.testing.assert_allclose(out["alignment"].sum(axis=1), 1.0, atol=1e-9)
    assert out["truncated"] == (t == 25)


def test_pgm_pixels():
    a = np.array([[0.0, 0.5, 1.0], [0.2, 1.5, -0.1]])
    pgm = rcalign.to_pgm(a)
    assert pgm.startswith(b"P5\n3 2\n255\n")
    assert list(pgm[len(b"P5\n3 2\n255\n"):]) == [0, 128, 255, 51, 255, 0]


def test_defects_of_diagonal_alignment():
    d = rcalign.alignment_defects(np.eye(4))
    assert d == {"skips": 0, "repeats": 0, "collapses": 0, "truncated": False}


@pytest.mark.skipif("RC_ALIGN_CLI" not in os.environ, reason="CLI path not provided")
def test_cli_checkpoint_loads(tmp_path):
    cli = os.environ["RC_ALIGN_CLI"]
    corpus_cfg = tmp_path / "corpus.json"
    corpus_cfg.write_text(json.dumps({"n_utterances": 10, "seed": 3}))
    data = tmp_path / "c.rcds"
    subprocess.run([cli, "gen-data", "--config", str(corpus_cfg), "--out", str(data)], check=True)
    run_cfg = tmp_path / "run.json"
    run_cfg.write_text(json.dumps({"model": {"d_dec": 16}, "train": {"steps": 2, "batch_size": 2}}))
    out = tmp_path / "run"
    subprocess.run(
        [cli, "train", "--config", str(run_cfg), "--data", str(data), "--mechanism", "rc", "--out", str(out)],
        check=True,
    )
    model = rcalign.load_model(str(out / "final.rcat"))
    assert model.mechanism == "rc"
    assert model.num_parameters > 0
