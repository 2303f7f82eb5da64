import json
import os

import numpy as np
import pytest

from advnlg import cli
from advnlg import corpus as C
from advnlg import tensor as T
from advnlg.synth import synth_e2e, write_e2e_csv

SMALL = "d_emb = 8\nd_h = 16\ndropout = 0.0\n"


def run(*argv):
    return cli.main([str(a) for a in argv])


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture
def wildwood(fixtures_dir):
    return os.path.join(fixtures_dir, "wildwood.csv")


@pytest.fixture
def prepared(tmp_path, restaurant_csv):
    out = tmp_path / "prep"
    assert run("prepare", "--input", restaurant_csv, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def toy_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy")
    write_e2e_csv(d / "toy.csv", synth_e2e(40, seed=1))
    assert run("prepare", "--input", d / "toy.csv", "--out", d / "prep") == 0
    return d / "prep"


# -- prepare --------------------------------------------------------------------


def test_prepare_wildwood(tmp_path, wildwood, capsys):
    out = tmp_path / "p"
    assert run("prepare", "--input", wildwood, "--out", out) == 0
    assert "train=1" in capsys.readouterr().out
    assert (out / "audit.txt").read_text() == ""
    rec = [json.loads(l) for l in (out / "train.jsonl").read_text().splitlines()]
    assert len(rec) == 1 and rec[0]["substitutions"]["⟨name⟩"] == "Wildwood"
    vocab = C.Vocabulary.load(str(out / "vocab.json"))
    assert vocab.tokens[:4] == list(C.RESERVED)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["counts"]["train"] == 1 and "tool_version" in manifest


def test_prepare_refuses_existing_manifest(tmp_path, wildwood):
    out = tmp_path / "p"
    assert run("prepare", "--input", wildwood, "--out", out) == 0
    assert run("prepare", "--input", wildwood, "--out", out) == 2
    assert run("prepare", "--input", wildwood, "--out", out, "--force") == 0


def test_prepare_empty_corpus_warns(tmp_path, caplog):
    src = write(tmp_path / "e.csv", "mr,ref\n")
    assert run("prepare", "--input", src, "--out", tmp_path / "p") == 0
    assert "empty" in caplog.text
    assert (tmp_path / "p" / "train.jsonl").read_text() == ""


def test_prepare_corrupt_row(tmp_path, capsys):
    src = write(tmp_path / "bad.csv", 'mr,ref\nname[a],fine\n"name[b[c]]",oops\n')
    assert run("prepare", "--input", src, "--out", tmp_path / "p") == 2
    err = capsys.readouterr().err
    assert "entry 2" in err and "bad.csv" in err


def test_prepare_hash_split_is_deterministic(tmp_path):
    src = tmp_path / "s.csv"
    write_e2e_csv(src, synth_e2e(300, seed=4))
    assert run("prepare", "--input", src, "--out", tmp_path / "a") == 0
    assert run("prepare", "--input", src, "--out", tmp_path / "b") == 0
    for name in ("train.jsonl", "dev.jsonl", "vocab.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    n_dev = len((tmp_path / "a" / "dev.jsonl").read_text().splitlines())
    assert 15 <= n_dev <= 45


def test_prepare_official_split_and_explicit_dev(tmp_path):
    rows = synth_e2e(20, seed=2)
    d = tmp_path / "official"
    d.mkdir()
    write_e2e_csv(d / "trainset.csv", rows[:15])
    write_e2e_csv(d / "devset.csv", rows[15:])
    assert run("prepare", "--input", d, "--out", tmp_path / "p1") == 0
    assert len((tmp_path / "p1" / "dev.jsonl").read_text().splitlines()) == 5
    assert run("prepare", "--input", d / "trainset.csv", "--dev", d / "devset.csv",
               "--out", tmp_path / "p2") == 0
    assert (tmp_path / "p1" / "train.jsonl").read_bytes() == (tmp_path / "p2" / "train.jsonl").read_bytes()


def test_prepare_rnnlg_and_policy(tmp_path, fixtures_dir):
    pol = write(tmp_path / "pol.json", json.dumps({"keep": ["area", "kidsallowed"]}))
    assert run("prepare", "--input", f"{fixtures_dir}/rnnlg_sample.json", "--format", "rnnlg-json",
               "--delex-policy", pol, "--out", tmp_path / "p") == 0
    recs = [json.loads(l) for l in (tmp_path / "p" / "train.jsonl").read_text().splitlines()]
    recs += [{"substitutions": r["substitutions"]} for r in
             map(json.loads, (tmp_path / "p" / "dev.jsonl").read_text().splitlines())]
    assert all("⟨area⟩" not in r["substitutions"] for r in recs)


# -- train ------------------------------------------------------------------------


def test_train_overfits_wildwood(tmp_path, wildwood, capsys):
    prep = tmp_path / "p"
    assert run("prepare", "--input", wildwood, "--out", prep) == 0
    cfg = write(tmp_path / "c.txt", "total_epochs = 50\nlr = 0.01\n")
    assert run("train", "--config", cfg, "--data", prep, "--out", tmp_path / "m", "--mode", "no-adv") == 0
    log = [json.loads(l) for l in (tmp_path / "m" / "train_log.jsonl").read_text().splitlines()]
    losses = [r["l_gen"] for r in log if r["l_gen"] is not None]
    assert losses[-1] < 0.1
    for name in ("final.ckpt", "best.ckpt", "config.txt", "manifest.json", "timings.jsonl", "vocab.json"):
        assert (tmp_path / "m" / name).exists()
    out = tmp_path / "pred.tsv"
    assert run("generate", "--checkpoint", tmp_path / "m" / "final.ckpt", "--input", wildwood,
               "--beam", 10, "--out", out) == 0
    mr, hyp, score = out.read_text(encoding="utf-8").rstrip("\n").split("\t")
    ref = C.load_corpus(wildwood)[0][1][0]
    assert C.normalize(hyp) == C.normalize(ref)
    assert float(score) <= 0


def test_train_same_seed_identical_and_env_override(tmp_path, toy_data, capsys, monkeypatch):
    cfg = write(tmp_path / "c.txt", SMALL + "total_epochs = 3\nwarmup_epochs = 1\nbatch_size = 8\n")
    sums = []
    for name in ("a", "b"):
        assert run("train", "--config", cfg, "--data", toy_data, "--out", tmp_path / name) == 0
        sums.append(capsys.readouterr().out.split("log_sha256=")[1].strip())
    assert sums[0] == sums[1]
    assert (tmp_path / "a" / "train_log.jsonl").read_bytes() == (tmp_path / "b" / "train_log.jsonl").read_bytes()
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()
    monkeypatch.setenv("ADVNLG_SEED", "99")
    assert run("train", "--config", cfg, "--data", toy_data, "--out", tmp_path / "c") == 0
    assert capsys.readouterr().out.split("log_sha256=")[1].strip() != sums[0]
    assert "seed = 99" in (tmp_path / "c" / "config.txt").read_text()


def test_train_resume_from_warmup(tmp_path, toy_data):
    cfg_text = SMALL + "total_epochs = 4\nwarmup_epochs = 2\nbatch_size = 8\n"
    cfg = write(tmp_path / "c.txt", cfg_text)
    assert run("train", "--config", cfg, "--data", toy_data, "--out", tmp_path / "full") == 0
    from advnlg.config import TrainConfig
    cli.train(TrainConfig.from_text(cfg_text), str(toy_data), str(tmp_path / "cut"), max_epochs=2)
    assert (tmp_path / "cut" / "warmup.ckpt").exists()
    (tmp_path / "cut" / "final.ckpt").unlink()
    assert run("train", "--config", cfg, "--data", toy_data, "--out", tmp_path / "cut", "--resume") == 0
    for name in ("train_log.jsonl", "final.ckpt", "best.ckpt"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "cut" / name).read_bytes(), name


def test_train_resume_without_checkpoint(tmp_path, toy_data):
    assert run("train", "--data", toy_data, "--out", tmp_path / "x", "--resume") == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_numerical_abort(tmp_path, toy_data, capsys):
    cfg = write(tmp_path / "c.txt", SMALL + "total_epochs = 2\nlr = 1e305\nbatch_size = 8\nmode = no-adv\n")
    assert run("train", "--config", cfg, "--data", toy_data, "--out", tmp_path / "m") == 3
    dump = json.loads((tmp_path / "m" / "nan_dump.json").read_text())
    assert dump["batch"] and "nan_dump.json" in capsys.readouterr().err


def test_train_bad_config(tmp_path, toy_data):
    cfg = write(tmp_path / "c.txt", "batch_size = 0\n")
    assert run("train", "--config", cfg, "--data", toy_data, "--out", tmp_path / "m") == 2


@pytest.mark.parametrize("mode", ["rl", "no-warmup"])
def test_train_other_modes(tmp_path, toy_data, mode):
    cfg = write(tmp_path / "c.txt", SMALL + "total_epochs = 2\nwarmup_epochs = 1\nbatch_size = 8\n")
    assert run("train", "--config", cfg, "--data", toy_data, "--out", tmp_path / "m", "--mode", mode) == 0
    stages = {json.loads(l)["stage"] for l in (tmp_path / "m" / "train_log.jsonl").read_text().splitlines()}
    assert ("reinforce" if mode == "rl" else "adversarial") in stages


# -- generate ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained(tmp_path_factory, toy_data):
    d = tmp_path_factory.mktemp("model")
    cfg = d / "c.txt"
    cfg.write_text(SMALL + "total_epochs = 2\nwarmup_epochs = 1\nbatch_size = 8\n")
    assert run("train", "--config", cfg, "--data", toy_data, "--out", d / "m") == 0
    return d / "m"


def test_generate_line_count_and_beam_one_is_greedy(tmp_path, trained, toy_data):
    src = toy_data / "train.jsonl"
    out = tmp_path / "g.tsv"
    assert run("generate", "--checkpoint", trained / "final.ckpt", "--input", src, "--beam", 1, "--out", out) == 0
    lines = out.read_text(encoding="utf-8").splitlines()
    recs = [json.loads(l) for l in src.read_text(encoding="utf-8").splitlines()]
    assert len(lines) == len(recs)
    model, vocab, meta = cli.load_model(str(trained / "final.ckpt"))
    max_len = int(meta["max_len"][0])
    from advnlg.trainer import hypothesis_text
    for line, r in zip(lines, recs):
        ids = model.gen.greedy_decode(vocab.encode(r["input_tokens"]), max_len)
        assert line.split("\t")[1] == hypothesis_text(ids, vocab.tokens, r["substitutions"])


def test_generate_from_mr_lines(tmp_path, trained):
    src = write(tmp_path / "mrs.txt", "name[Zizzi], food[Italian]\n\nname[Aromi], area[riverside]\n")
    out = tmp_path / "g.tsv"
    assert run("generate", "--checkpoint", trained / "final.ckpt", "--input", src, "--beam", 2, "--out", out) == 0
    lines = out.read_text(encoding="utf-8").splitlines()
    assert [l.split("\t")[0] for l in lines] == ["name[Zizzi], food[Italian]", "name[Aromi], area[riverside]"]


def test_generate_vocab_mismatch(tmp_path, trained):
    vocab = tmp_path / "v.json"
    C.Vocabulary(["x"]).save(str(vocab))
    src = write(tmp_path / "mrs.txt", "name[Zizzi]\n")
    assert run("generate", "--checkpoint", trained / "final.ckpt", "--input", src, "--vocab", vocab,
               "--out", tmp_path / "g.tsv") == 2


# -- eval -------------------------------------------------------------------------


def _predictions_from_refs(path, csv_path, pick=0):
    groups = C.group_by_mr(C.load_corpus(csv_path))
    with open(path, "w", encoding="utf-8") as fh:
        for mr, refs in groups:
            fh.write(f"{C.format_mr(mr)}\t{refs[pick]}\t0.0\n")


def test_eval_identity_and_self_significance(tmp_path, restaurant_csv, capsys):
    pred = tmp_path / "p.tsv"
    _predictions_from_refs(pred, restaurant_csv)
    rec = tmp_path / "r.jsonl"
    assert run("eval", "--predictions", pred, "--references", restaurant_csv, "--against", pred,
               "--bootstrap", 200, "--out", rec) == 0
    out = capsys.readouterr().out
    assert "BLEU-4" in out and "1.0000" in out and "p-value" in out
    recs = [json.loads(l) for l in rec.read_text().splitlines()]
    head = recs[0]
    assert head["bleu"] == 1.0 and recs[-1]["p_value"] == 1.0
    ps = [head[f"p{n}"] for n in range(1, 5)]
    assert abs(head["bleu"] - head["bp"] * np.exp(np.mean(np.log(ps)))) <= 1e-12
    assert head["slot_coverage"] > 0.5
    assert sum(r["kind"] == "instance" for r in recs) == 3


def test_eval_report_consistency_on_imperfect_output(tmp_path, restaurant_csv):
    pred = tmp_path / "p.tsv"
    groups = C.group_by_mr(C.load_corpus(restaurant_csv))
    with open(pred, "w", encoding="utf-8") as fh:
        for mr, refs in groups:
            fh.write(f"{C.format_mr(mr)}\t{' '.join(refs[0].split()[:-3])} nice\t-1\n")
    res = cli.evaluate_files(str(pred), restaurant_csv)
    assert 0 < res["report"].bleu < 1 and res["report"].check()


def test_eval_misaligned(tmp_path, restaurant_csv, capsys):
    pred = write(tmp_path / "p.tsv", "name[Nowhere]\tsome text\t0\n")
    assert run("eval", "--predictions", pred, "--references", restaurant_csv) == 2
    assert "align" in capsys.readouterr().err


# -- inspect-gradients ----------------------------------------------------------------


def test_inspect_gradients(tmp_path, toy_data, capsys):
    cfg = write(tmp_path / "c.txt", SMALL + "batch_size = 6\n")
    a, b, f = tmp_path / "a.json", tmp_path / "b.json", tmp_path / "f.json"
    assert run("inspect-gradients", "--data", toy_data, "--draws", 20, "--config", cfg, "--out", a) == 0
    assert run("inspect-gradients", "--data", toy_data, "--draws", 20, "--config", cfg, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()
    rep = json.loads(a.read_text())
    for grp in ("emb", "gen.enc", "gen.dec", "gen.out"):
        assert rep["rl"][grp]["variance"] > rep["st"][grp]["variance"]
    assert run("inspect-gradients", "--data", toy_data, "--draws", 5, "--config", cfg, "--out", f,
               "--frozen-noise") == 0
    frozen = json.loads(f.read_text())
    assert all(v["variance"] == 0.0 for v in frozen["st"].values())


def test_synth_command(tmp_path):
    out = tmp_path / "s.csv"
    assert run("synth", "--n", 5, "--seed", 3, "--out", out) == 0
    rows = C.load_corpus(str(out))
    assert len(rows) == 5 and len({C.format_mr(m) for m, _ in rows}) == 5


def test_missing_input_file(tmp_path):
    assert run("prepare", "--input", tmp_path / "nope.csv", "--out", tmp_path / "p") == 2
