import io
import json

import numpy as np
import pytest
from PIL import Image

from comprint import imageio
from comprint.cli import EXIT_INPUT, EXIT_OK, main
from comprint.fingerprint import FingerprintModel

TINY = ["--epochs", "1", "--batches", "2", "--pairs", "2", "--size", "64"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert main(["make-corpus", str(root), "-n", "3", "--size", "80"]) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def pretrained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    assert main(["pretrain", str(corpus), "-o", str(out), *TINY]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def trained(pretrained, corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", str(pretrained / "model.cpm"), str(corpus), "--validation",
                 str(corpus), "-o", str(out), *TINY]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def fixtures(tmp_path_factory):
    out = tmp_path_factory.mktemp("fx")
    assert main(["make-fixtures", str(out), "-n", "3", "--size", "192"]) == EXIT_OK
    return out


def test_pretrain_smoke_and_roundtrip(pretrained):
    model = FingerprintModel.load(pretrained / "model.cpm")
    assert model.stage == "denoiser-pretrained" and model.spec.depth == 5
    assert (pretrained / "loss.png").stat().st_size > 0
    cfg = json.loads((pretrained / "config.json").read_text())
    assert cfg["pretrain"]["batches_per_epoch"] == 2 and cfg["preset"] == "desk"


def test_pretrain_loss_trace_is_deterministic(corpus, pretrained, tmp_path):
    assert main(["pretrain", str(corpus), "-o", str(tmp_path), *TINY]) == EXIT_OK
    assert (tmp_path / "loss.csv").read_bytes() == (pretrained / "loss.csv").read_bytes()
    assert (tmp_path / "model.cpm").read_bytes() == (pretrained / "model.cpm").read_bytes()


def test_pretrain_missing_corpus(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert main(["pretrain", str(missing), "-o", str(tmp_path / "o"), *TINY]) == EXIT_INPUT
    assert str(missing) in capsys.readouterr().err


def test_train_smoke_determinism_and_errors(trained, pretrained, corpus, tmp_path, capsys):
    assert FingerprintModel.load(trained / "model.cpm").stage == "siamese-trained"
    assert (trained / "validation.csv").read_text().startswith("epoch,")
    assert main(["train", str(pretrained / "model.cpm"), str(corpus), "--validation",
                 str(corpus), "-o", str(tmp_path / "again"), *TINY]) == EXIT_OK
    assert (tmp_path / "again" / "loss.csv").read_bytes() == (trained / "loss.csv").read_bytes()
    missing = tmp_path / "nowhere"
    assert main(["train", str(pretrained / "model.cpm"), str(missing), "-o",
                 str(tmp_path / "x"), *TINY]) == EXIT_INPUT
    assert str(missing) in capsys.readouterr().err
    # a Siamese stage must start from a pretrained model
    assert main(["train", str(trained / "model.cpm"), str(corpus), "-o",
                 str(tmp_path / "y"), *TINY]) == 3


def test_make_fixtures_contract(fixtures, tmp_path):
    for i in range(3):
        fake = imageio.load_gray(fixtures / "fake" / f"img{i:03d}.png")
        pristine = imageio.load_gray(fixtures / "pristine" / f"img{i:03d}.png")
        mask = imageio.load_mask(fixtures / "masks" / f"img{i:03d}_mask.png")
        assert fake.shape == pristine.shape == mask.shape == (192, 192)
        # the mask is exactly one axis-aligned rectangle covering 10-40% of the image
        rows, cols = np.flatnonzero(mask.any(1)), np.flatnonzero(mask.any(0))
        box = np.zeros_like(mask)
        box[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1] = 1
        assert np.array_equal(mask != 0, box != 0)
        assert 0.09 <= mask.mean() <= 0.41
        # outside the rectangle the fake is the pristine image
        assert np.array_equal(fake[mask == 0], pristine[mask == 0])
    assert main(["make-fixtures", str(tmp_path), "-n", "3", "--size", "192"]) == EXIT_OK
    for p in sorted(fixtures.rglob("*.png")):
        assert (tmp_path / p.relative_to(fixtures)).read_bytes() == p.read_bytes()


def test_make_fixtures_default_count(tmp_path):
    assert main(["make-fixtures", str(tmp_path), "--size", "64"]) == EXIT_OK
    assert len(list((tmp_path / "fake").glob("*.png"))) == 20
    assert len(list((tmp_path / "masks").glob("*.png"))) == 20
    assert len(list((tmp_path / "pristine").glob("*.png"))) == 20


def test_analyze_outputs_and_determinism(trained, fixtures, tmp_path, capsys):
    img = fixtures / "fake" / "img000.png"
    args = ["analyze", str(img), "--mask", str(fixtures / "masks" / "img000_mask.png"),
            "--model", str(trained / "model.cpm")]
    assert main(args + ["-o", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["-o", str(tmp_path / "b")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "score\t" in out and "provenance\tcomprint" in out
    for name in ("fingerprint_comprint.pfm", "heatmap.pfm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    hm = imageio.read_pfm(tmp_path / "a" / "heatmap.pfm")
    assert hm.shape == (192, 192) and np.all(np.isfinite(hm))
    result = json.loads((tmp_path / "a" / "result.json").read_text())
    assert 0 <= result["max_f1"] <= 1
    for name in ("heatmap.png", "analysis.png", "config.json"):
        assert (tmp_path / "a" / name).is_file()


def test_analyze_fusion_provenance(trained, fixtures, tmp_path, capsys):
    assert main(["analyze", str(fixtures / "fake" / "img001.png"), "--model",
                 str(trained / "model.cpm"), "--provider", "comprint", "--provider",
                 "highpass", "-o", str(tmp_path)]) == EXIT_OK
    assert "provenance\tcomprint,highpass" in capsys.readouterr().out
    result = json.loads((tmp_path / "result.json").read_text())
    assert result["provenance"] == ["comprint", "highpass"]
    assert (tmp_path / "fingerprint_highpass.pfm").is_file()


def test_analyze_errors(trained, tmp_path, capsys):
    small = tmp_path / "small.png"
    imageio.save_gray_png(small, np.random.default_rng(0).integers(0, 256, (100, 100)))
    code = main(["analyze", str(small), "--provider", "highpass", "-o", str(tmp_path / "o")])
    assert code == EXIT_INPUT and "window" in capsys.readouterr().err
    code = main(["analyze", str(tmp_path / "missing.png"), "--provider", "highpass",
                 "-o", str(tmp_path / "o")])
    assert code == EXIT_INPUT and "missing.png" in capsys.readouterr().err
    bad = tmp_path / "bad.cpm"
    bad.write_bytes(b"not a model")
    code = main(["analyze", str(small), "--model", str(bad), "-o", str(tmp_path / "o")])
    assert code == EXIT_INPUT


def test_evaluate_smoke_and_skips(fixtures, tmp_path, capsys):
    (fixtures / "masks" / "img002_mask.png").rename(tmp_path / "held.png")
    try:
        assert main(["evaluate", str(fixtures / "fake"), str(fixtures / "masks"), "--real",
                     str(fixtures / "pristine"), "--provider", "highpass", "--workers", "1",
                     "-o", str(tmp_path / "ev")]) == EXIT_OK
    finally:
        (tmp_path / "held.png").rename(fixtures / "masks" / "img002_mask.png")
    text = (tmp_path / "ev" / "report.tsv").read_text()
    assert "img002.png\tfake\tskipped" in text and "no mask found" in text
    summary = dict(line[2:].split("\t") for line in text.splitlines() if line.startswith("# "))
    assert int(summary["total"]) == 6
    assert int(summary["ok"]) + int(summary["skipped"]) + int(summary["failed"]) == 6
    assert (tmp_path / "ev" / "roc.tsv").is_file() and (tmp_path / "ev" / "roc.png").is_file()
    assert "mean max-F1" in capsys.readouterr().out


def _jpeg_bytes(img, **kw):
    buf = io.BytesIO()
    img.save(buf, "JPEG", **kw)
    return buf.getvalue()


def test_inspect(tmp_path, capsys):
    gray = Image.fromarray(np.random.default_rng(0).integers(0, 256, (32, 32), dtype=np.uint8))
    (tmp_path / "q50.jpg").write_bytes(_jpeg_bytes(gray, quality=50))
    assert main(["inspect", str(tmp_path / "q50.jpg")]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[1].split("\t")[1:] == ["50", "0"]

    color = Image.fromarray(np.random.default_rng(1).integers(0, 256, (32, 32, 3),
                                                              dtype=np.uint8))
    (tmp_path / "color.jpg").write_bytes(_jpeg_bytes(color, quality=75))
    assert main(["inspect", str(tmp_path / "color.jpg"), "--tables-verbose"]) == EXIT_OK
    out = capsys.readouterr().out
    table_lines = [l for l in out.splitlines()[1:] if not l.startswith("  ")]
    assert len(table_lines) == 2
    assert table_lines[0].split("\t")[1:] == ["75", "0"]

    imageio.save_gray_png(tmp_path / "x.png", np.zeros((8, 8)))
    assert main(["inspect", str(tmp_path / "x.png")]) == EXIT_INPUT


def test_config_precedence(corpus, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"pretrain": {"epochs": 1, "batches_per_epoch": 3,
                                            "pairs_per_batch": 2}, "image_size": 64}))
    assert main(["--config", str(cfg), "pretrain", str(corpus), "-o",
                 str(tmp_path / "a")]) == EXIT_OK
    resolved = json.loads((tmp_path / "a" / "config.json").read_text())["pretrain"]
    assert resolved["batches_per_epoch"] == 3 and resolved["pairs_per_batch"] == 2
    # an explicit flag beats the config file, which beats the built-in default
    assert main(["--config", str(cfg), "pretrain", str(corpus), "-o", str(tmp_path / "b"),
                 "--batches", "1"]) == EXIT_OK
    resolved = json.loads((tmp_path / "b" / "config.json").read_text())["pretrain"]
    assert resolved["batches_per_epoch"] == 1 and resolved["pairs_per_batch"] == 2
    assert resolved["crop"] == 48
    cfg.write_text(json.dumps({"pretrain": {"epochz": 1}}))
    assert main(["--config", str(cfg), "pretrain", str(corpus), "-o",
                 str(tmp_path / "c")]) == EXIT_INPUT
