import json

import pytest

from poemgan import corpus as C
from poemgan.cli import main
from poemgan.features import load_features

from pipeline import MINI_CONFIG, ROOT

MINI = ROOT / "data" / "mini"


def test_unknown_command_and_missing_flags(capsys):
    assert main(["frobnicate"]) == 2
    assert main([]) == 2
    assert main(["generate", "--features", "x"]) == 2
    assert "missing required flag" in capsys.readouterr().err


def test_runtime_failure_exit_code(tmp_path):
    assert main(["filter", "--poems", str(tmp_path / "absent.jsonl"), "--out", str(tmp_path / "o")]) == 1


def test_make_synthetic_counts_and_determinism(tmp_path):
    for name in ("a", "b"):
        assert main(["make-synthetic", "--out-dir", str(tmp_path / name), "--n-images", "50", "--seed", "4"]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert len(load_features(a / "features.jsonl")) == 50
    assert len(C.load_poems(a / "poems.jsonl")) >= 50
    assert len(C.load_pairs(a / "pairs.jsonl")) == 50
    for f in sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file()):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_bundled_corpus_is_reproducible(tmp_path):
    assert main(["make-synthetic", "--out-dir", str(tmp_path), "--seed", "0"]) == 0
    for f in ("features.jsonl", "poems.jsonl", "pairs.jsonl", "paragraphs.jsonl"):
        assert (tmp_path / f).read_bytes() == (MINI / f).read_bytes()


def test_filter_and_vocab(tmp_path):
    out = tmp_path / "kept.jsonl"
    assert main(["filter", "--poems", str(MINI / "poems.jsonl"), "--out", str(out)]) == 0
    assert 0 < len(C.load_poems(out)) <= len(C.load_poems(MINI / "poems.jsonl"))
    assert main(["build-vocab", "--poems", str(out), "--out", str(tmp_path / "v.json")]) == 0
    assert len(C.Vocabulary.load(tmp_path / "v.json")) > 5


def test_ingest_plain_text(tmp_path):
    src = tmp_path / "raw.txt"
    src.write_text("the moon\nover water\n\nstone and ember\ncold\n")
    assert main(["ingest", "--input", str(src), "--out", str(tmp_path / "p.jsonl")]) == 0
    poems = C.load_poems(tmp_path / "p.jsonl")
    assert [list(p.lines) for p in poems] == [["the moon", "over water"], ["stone and ember", "cold"]]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    work = tmp_path_factory.mktemp("cli")
    models = work / "m"
    cfg = work / "cfg.json"
    small = json.loads(MINI_CONFIG.read_text())
    small.update(rounds=2, disc_pretrain_steps=2, pretrain_epochs=2, embedding_epochs=3)
    cfg.write_text(json.dumps(small))
    feats, poems, pairs = (str(MINI / f) for f in ("features.jsonl", "poems.jsonl", "pairs.jsonl"))
    common = ["--features", feats, "--poems", poems, "--pairs", pairs, "--model-dir", str(models)]
    assert main(["train-embedding", *common, "--config", str(cfg)]) == 0
    assert main(["pretrain", *common, "--config", str(cfg)]) == 0
    assert main(["train-gan", *common, "--config", str(cfg)]) == 0
    return work, models, cfg


def test_generate_is_deterministic(trained):
    work, models, _ = trained
    outs = []
    for name in ("g1.jsonl", "g2.jsonl"):
        assert main(["generate", "--model-dir", str(models), "--features", str(MINI / "features.jsonl"),
                     "--out", str(work / name), "--seed", "7"]) == 0
        outs.append((work / name).read_bytes())
    assert outs[0] == outs[1] and outs[0]


def test_evaluate_without_ground_truth(trained, capsys):
    work, models, _ = trained
    gen = work / "g.jsonl"
    main(["generate", "--model-dir", str(models), "--features", str(MINI / "features.jsonl"), "--out", str(gen)])
    capsys.readouterr()
    assert main(["evaluate", "--model-dir", str(models), "--features", str(MINI / "features.jsonl"),
                 "--generated", str(gen), "--train-poems", str(MINI / "poems.jsonl"),
                 "--out", str(work / "r.jsonl")]) == 0
    assert capsys.readouterr().out.splitlines()[-1].startswith("MEAN")
    summary = json.loads((work / "r.jsonl").read_text().splitlines()[-1])["aggregate"]
    assert summary["bleu1"] is None and summary["relevance"] is not None


def test_train_gan_without_discriminators_fails(trained, tmp_path):
    _, models, cfg = trained
    off = json.loads(cfg.read_text())
    off.update(use_dm=False, use_dp=False)
    path = tmp_path / "off.json"
    path.write_text(json.dumps(off))
    before = (models / "generator.ckpt").read_bytes()
    assert main(["train-gan", "--model-dir", str(models), "--features", str(MINI / "features.jsonl"),
                 "--poems", str(MINI / "poems.jsonl"), "--pairs", str(MINI / "pairs.jsonl"),
                 "--config", str(path)]) == 1
    assert (models / "generator.ckpt").read_bytes() == before
