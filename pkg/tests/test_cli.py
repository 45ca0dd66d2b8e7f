import json

import numpy as np
import pytest
import torch

from latentmark import cli
from latentmark.cli import load_png, save_png
from latentmark.diffusion import GuidanceConfig, sample


@pytest.fixture()
def workdir(artifacts, tmp_path):
    return artifacts.workdir_copy(tmp_path / "run")


def _main(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_embed_verify_extract(workdir, capsys):
    png = workdir / "wm.png"
    code, out, _ = _main(capsys, "embed", "--workdir", workdir, "--bits", "1011001110", "--condition", 1,
                         "--out", png, "--seed", 5)
    assert code == 0 and json.loads(out)["payload"]
    code, out, _ = _main(capsys, "verify", png, "--workdir", workdir, "--bits", "1011001110",
                         "--report", workdir / "r.json")
    rep = json.loads(out)
    assert code == 0 and rep["detected"] and rep["matches"] >= 33
    assert json.loads((workdir / "r.json").read_text()) == rep
    code, out, _ = _main(capsys, "extract", png, "--workdir", workdir)
    got = json.loads(out)
    assert code == 0 and len(got["raw_bits"]) == 48
    assert got["payload"] == rep["traced_payload"]


def test_unwatermarked_image_exits_3(workdir, capsys, artifacts):
    # false positives happen at rate alpha, so the inputs are seeded; calibration is tested elsewhere
    rng = np.random.default_rng(0)
    z = torch.randn(1, 4, 8, 8, generator=torch.Generator().manual_seed(0))
    save_png(workdir / "plain.png", sample(z, GuidanceConfig(5.0, 1, 20), artifacts.backend)[0])
    save_png(workdir / "noise.png", rng.random((32, 32, 3)))
    for name in ("plain.png", "noise.png"):
        code, out, _ = _main(capsys, "verify", workdir / name, "--workdir", workdir, "--bits", "1011001110")
        assert code == 3 and not json.loads(out)["detected"]


def test_registered_user_roundtrip(workdir, capsys):
    code, out, _ = _main(capsys, "register", "alice", "--workdir", workdir, "--note", "first")
    assert code == 0 and len(json.loads(out)["bits"]) == 10
    _main(capsys, "register", "bob", "--workdir", workdir)
    code, _, err = _main(capsys, "register", "alice", "--workdir", workdir)
    assert code == 64 and "alice" in err
    png = workdir / "alice.png"
    assert _main(capsys, "embed", "--workdir", workdir, "--user", "alice", "--out", png)[0] == 0
    code, out, _ = _main(capsys, "extract", png, "--workdir", workdir)
    assert json.loads(out)["user"] == "alice"
    code, out, _ = _main(capsys, "verify", png, "--workdir", workdir, "--user", "alice")
    assert code == 0 and json.loads(out)["traced_user"] == "alice"
    assert _main(capsys, "verify", png, "--workdir", workdir, "--user", "carol")[0] == 64


def test_attack_command(workdir, capsys, artifacts):
    src = workdir / "in.png"
    save_png(src, artifacts.backend.decode(torch.zeros(1, 4, 8, 8))[0])
    code, out, _ = _main(capsys, "attack", src, "--workdir", workdir, "--attack", "brightness:2",
                         "--out", workdir / "out.png")
    assert code == 0 and json.loads(out)["attack"]["kind"] == "brightness"
    assert load_png(workdir / "out.png").mean() >= load_png(src).mean()
    assert _main(capsys, "attack", src, "--workdir", workdir, "--out", workdir / "x.png")[0] == 64
    assert _main(capsys, "attack", src, "--workdir", workdir, "--attack", "melt:3",
                 "--out", workdir / "x.png")[0] == 64


def test_eval_command(workdir, capsys):
    code, out, _ = _main(capsys, "eval", "--workdir", workdir, "--n", 6, "--attack", "jpeg:50",
                         "--attack", "external:ghost", "--out", workdir / "eval.json")
    assert code == 0
    assert "bit/detect" in out and "skipped" in out
    data = json.loads((workdir / "eval.json").read_text())
    assert [r["attack"] for r in data["rows"]] == ["none", "jpeg:50", "external:ghost"]


def test_usage_errors(workdir, capsys):
    png = workdir / "p.png"
    code, _, err = _main(capsys, "embed", "--workdir", workdir, "--bits", "0101", "--out", png)
    assert code == 64 and "10-bit payload" in err
    assert _main(capsys, "embed", "--workdir", workdir, "--bits", "01x1", "--out", png)[0] == 64
    assert _main(capsys, "embed", "--workdir", workdir, "--out", png)[0] == 64
    assert _main(capsys, "embed", "--workdir", workdir, "--payload", "10:zz", "--out", png)[0] == 64
    assert _main(capsys, "eval", "--workdir", workdir, "--backend", "adapter:nope")[0] == 64
    assert _main(capsys, "eval", "--workdir", workdir, "--k", 32)[0] == 64
    assert _main(capsys, "frobnicate")[0] == 64
    assert _main(capsys, "verify")[0] == 64


def test_bad_data_errors(workdir, capsys, tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    assert _main(capsys, "extract", bad, "--workdir", workdir)[0] == 65
    assert _main(capsys, "extract", tmp_path / "missing.png", "--workdir", workdir)[0] == 65
    cfg = tmp_path / "cfg.json"
    cfg.write_text("{not json")
    assert _main(capsys, "eval", "--config", cfg)[0] == 65
    cfg.write_text(json.dumps({"workdir": str(workdir), "colour": "blue"}))
    assert _main(capsys, "eval", "--config", cfg)[0] == 64
    save_png(workdir / "p.png", np.zeros((32, 32, 3)))
    (workdir / cli.CODEC_FILE).write_bytes(b"LMK1 truncated")
    assert _main(capsys, "extract", workdir / "p.png", "--workdir", workdir, "--codec",
                 workdir / cli.CODEC_FILE)[0] == 65


def test_missing_checkpoints(tmp_path, capsys):
    code, _, err = _main(capsys, "eval", "--workdir", tmp_path / "empty")
    assert code == 64 and "latentmark train" in err
