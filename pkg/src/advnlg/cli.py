"""Command-line entry point: prepare, train, generate, eval, inspect-gradients."""
import argparse
import csv
import hashlib
import json
import logging
import os
import shutil
import sys

import numpy as np

from . import __version__
from . import corpus as C
from . import tensor as T
from .config import MODES, TrainConfig
from .evaluate import corpus_bleu_text, significance, slot_coverage
from .trainer import (DevExample, Example, Model, NumericalAbort, TrainLog, Trainer,
                      estimator_variance, hypothesis_text, meta_of, predict)

log = logging.getLogger("advnlg")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# small file helpers


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, ensure_ascii=False) + "\n")


def read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def claim_out_dir(out, force):
    os.makedirs(out, exist_ok=True)
    manifest = os.path.join(out, "manifest.json")
    if os.path.exists(manifest) and not force:
        raise InputError(f"{manifest} exists; pass --force to overwrite")
    return manifest


def write_manifest(path, **fields):
    fields.setdefault("tool_version", __version__)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(fields, fh, indent=2, sort_keys=True, ensure_ascii=False)


# ---------------------------------------------------------------------------
# prepare


_OFFICIAL = {
    "e2e-csv": [("trainset.csv", "devset.csv"), ("train.csv", "dev.csv")],
    "rnnlg-json": [("train.json", "valid.json"), ("train.json", "dev.json")],
}


def split_of(mr_key, dev_fraction=0.1):
    h = int.from_bytes(hashlib.sha1(mr_key.encode("utf-8")).digest()[:8], "big")
    return "dev" if (h % 1000) < dev_fraction * 1000 else "train"


def _records(entries, policy):
    train, audit = [], []
    for mr, refs in entries:
        for ref in refs:
            p = C.delexicalize(mr, ref, policy)
            audit.extend(p.audit)
            train.append({"mr": C.format_mr(mr), "act": mr.dialogue_act, "slots": [list(s) for s in mr.slots],
                          "input_tokens": p.input_tokens, "target_tokens": p.target_tokens,
                          "substitutions": p.substitutions, "ref": ref})
    return train, audit


def _dev_records(entries, policy):
    out = []
    for mr, refs in C.group_by_mr(entries):
        subs, assigned = C.mr_substitutions(mr, policy)
        out.append({"mr": C.format_mr(mr), "act": mr.dialogue_act, "slots": [list(s) for s in mr.slots],
                    "input_tokens": C.linearize(mr, assigned=assigned), "substitutions": subs,
                    "refs": refs})
    return out


def prepare(input_path, fmt, out, policy=None, dev_path=None, min_count=1, force=False):
    manifest = claim_out_dir(out, force)
    policy = policy or C.DelexPolicy()
    sources = [input_path]
    if os.path.isdir(input_path):
        for tr_name, dv_name in _OFFICIAL[fmt]:
            tr, dv = os.path.join(input_path, tr_name), os.path.join(input_path, dv_name)
            if os.path.exists(tr):
                train_entries = C.load_corpus(tr, fmt)
                dev_entries = C.load_corpus(dv, fmt) if os.path.exists(dv) else []
                sources = [p for p in (tr, dv) if os.path.exists(p)]
                break
        else:
            raise InputError(f"{input_path}: no official split files found")
    else:
        entries = C.load_corpus(input_path, fmt)
        if dev_path is not None:
            train_entries, dev_entries = entries, C.load_corpus(dev_path, fmt)
            sources.append(dev_path)
        else:
            train_entries = [e for e in entries if split_of(C.format_mr(e[0])) == "train"]
            dev_entries = [e for e in entries if split_of(C.format_mr(e[0])) == "dev"]
            if not train_entries:
                train_entries, dev_entries = entries, []
    train, audit = _records(train_entries, policy)
    dev = _dev_records(dev_entries, policy)
    for d in dev:
        for ref in d["refs"]:
            mr = C.MeaningRepresentation(d["act"], tuple(tuple(s) for s in d["slots"]), raw=d["mr"])
            audit.extend(C.delexicalize(mr, ref, policy).audit)
    vocab = C.build_vocab([C.DelexicalizedPair(r["input_tokens"], r["target_tokens"], {}) for r in train],
                          min_count)
    write_jsonl(os.path.join(out, "train.jsonl"), train)
    write_jsonl(os.path.join(out, "dev.jsonl"), dev)
    vocab.save(os.path.join(out, "vocab.json"))
    with open(os.path.join(out, "delex_policy.json"), "w", encoding="utf-8") as fh:
        json.dump(policy.to_json(), fh, indent=1, ensure_ascii=False)
    with open(os.path.join(out, "audit.txt"), "w", encoding="utf-8") as fh:
        fh.writelines(line + "\n" for line in audit)
    write_manifest(manifest, command="prepare", format=fmt,
                   inputs={os.path.abspath(p): sha256_file(p) for p in sources},
                   counts={"train": len(train), "dev": len(dev), "vocab": len(vocab),
                           "audit": len(audit)})
    if not train:
        log.warning("corpus is empty; wrote empty outputs")
    return {"train": len(train), "dev": len(dev), "vocab": len(vocab), "audit": audit}


def load_prepared(data_dir):
    vocab = C.Vocabulary.load(os.path.join(data_dir, "vocab.json"))
    train = [Example(vocab.encode(r["input_tokens"]), vocab.encode(r["target_tokens"]))
             for r in read_jsonl(os.path.join(data_dir, "train.jsonl"))]
    dev_path = os.path.join(data_dir, "dev.jsonl")
    dev = [DevExample(vocab.encode(r["input_tokens"]), r["substitutions"], r["refs"], r["mr"])
           for r in (read_jsonl(dev_path) if os.path.exists(dev_path) else [])]
    return vocab, train, dev


# ---------------------------------------------------------------------------
# train


def train(config, data_dir, out, force=False, resume=False, max_epochs=None):
    vocab, train_set, dev_set = load_prepared(data_dir)
    if not train_set:
        raise InputError(f"{data_dir}: training split is empty")
    manifest = os.path.join(out, "manifest.json")
    warm_ckpt = os.path.join(out, "warmup.ckpt")
    if resume:
        if not os.path.exists(warm_ckpt):
            raise InputError(f"{out}: nothing to resume (no warmup.ckpt)")
    else:
        manifest = claim_out_dir(out, force)
        config.save(os.path.join(out, "config.txt"))
        for name in ("vocab.json", "delex_policy.json"):
            src = os.path.join(data_dir, name)
            if os.path.exists(src):
                shutil.copyfile(src, os.path.join(out, name))
        paths = {k: os.path.join(out, v) for k, v in (
            ("warmup_checkpoint", "warmup.ckpt"), ("best_checkpoint", "best.ckpt"),
            ("final_checkpoint", "final.ckpt"), ("train_log", "train_log.jsonl"),
            ("timings", "timings.jsonl"), ("config", "config.txt"))}
        checks = {n: sha256_file(os.path.join(data_dir, n)) for n in ("train.jsonl", "dev.jsonl", "vocab.json")
                  if os.path.exists(os.path.join(data_dir, n))}
        write_manifest(manifest, command="train", mode=config.mode, seed=config.seed,
                       config=config.to_text().splitlines(), corpus_checksums=checks, artifacts=paths)

    def save_best(tr, epoch):
        T.save_checkpoint(os.path.join(out, "best.ckpt"), tr.best_state)

    def save_warmup(tr, epoch):
        T.save_checkpoint(warm_ckpt, tr.model.state(tr.meta(epoch + 1)))
        tr.log.write(os.path.join(out, "warmup_log.jsonl"))

    tr = Trainer(config, train_set, dev_set, vocab_size=len(vocab), on_improve=save_best)
    tr.set_vocab(vocab.tokens)
    start = 0
    if resume:
        arrays = T.load_checkpoint(warm_ckpt)
        tr.model.load_state(arrays)
        start = tr.restore_meta(meta_of(arrays))
        tr.log = TrainLog.read(os.path.join(out, "warmup_log.jsonl"))
        best = os.path.join(out, "best.ckpt")
        if os.path.exists(best):
            tr.best_state = T.load_checkpoint(best)
    if max_epochs is not None:
        tr.config.total_epochs = min(tr.config.total_epochs, max_epochs)
    try:
        tr.run(start_epoch=start, on_warmup_done=save_warmup)
    except NumericalAbort as exc:
        dump = os.path.join(out, "nan_dump.json")
        batch = [{"input": vocab.decode(e.input_ids), "target": vocab.decode(e.target_ids)}
                 for e in (exc.batch or [])]
        with open(dump, "w", encoding="utf-8") as fh:
            json.dump({"error": str(exc), "step": tr.step, "batch": batch}, fh, indent=1, ensure_ascii=False)
        tr.log.write(os.path.join(out, "train_log.jsonl"))
        exc.dump_path = dump
        raise
    T.save_checkpoint(os.path.join(out, "final.ckpt"), tr.model.state(tr.meta(config.total_epochs)))
    T.save_checkpoint(os.path.join(out, "best.ckpt"), tr.best_state)
    tr.log.write(os.path.join(out, "train_log.jsonl"))
    tr.log.write_timings(os.path.join(out, "timings.jsonl"))
    return tr


# ---------------------------------------------------------------------------
# generate


def read_mr_inputs(path):
    """MRs from a prepared .jsonl split, an e2e .csv, or one MR string per line."""
    if path.endswith(".jsonl"):
        return [C.MeaningRepresentation(r.get("act", "inform"), tuple(tuple(s) for s in r["slots"]), raw=r["mr"])
                for r in read_jsonl(path)]
    if path.endswith(".csv"):
        return [mr for mr, _ in C.load_corpus(path, "e2e-csv")]
    out = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            try:
                if "[" not in line and line.rstrip().endswith(")"):
                    out.append(C.parse_da(line))
                else:
                    out.append(C.parse_mr(line))
            except C.ParseError as exc:
                raise C.LoadError(str(exc), i) from exc
    return out


def load_model(checkpoint, vocab_path=None):
    arrays = T.load_checkpoint(checkpoint)
    vocab_path = vocab_path or os.path.join(os.path.dirname(os.path.abspath(checkpoint)), "vocab.json")
    vocab = C.Vocabulary.load(vocab_path)
    V, d_emb, d_h = (int(x) for x in arrays["__meta__/dims"])
    if V != len(vocab):
        raise InputError(f"checkpoint vocabulary size {V} != {len(vocab)} in {vocab_path}")
    model = Model.from_state(arrays, TrainConfig(d_emb=d_emb, d_h=d_h, dropout=0.0))
    return model, vocab, meta_of(arrays)


def generate(checkpoint, input_path, out_path, beam=10, vocab_path=None, policy=None, max_len=None,
             length_norm=True):
    model, vocab, meta = load_model(checkpoint, vocab_path)
    if policy is None:
        pol_path = os.path.join(os.path.dirname(os.path.abspath(checkpoint)), "delex_policy.json")
        policy = C.DelexPolicy.load(pol_path) if os.path.exists(pol_path) else C.DelexPolicy()
    max_len = max_len or int(meta.get("max_len", [40])[0])
    mrs = read_mr_inputs(input_path)
    inputs, subs = [], []
    for mr in mrs:
        s, assigned = C.mr_substitutions(mr, policy)
        inputs.append(vocab.encode(C.linearize(mr, assigned=assigned)))
        subs.append(s)
    preds = predict(model, inputs, beam, max_len, length_norm)
    with open(out_path, "w", encoding="utf-8") as fh:
        for mr, s, (ids, score) in zip(mrs, subs, preds):
            fh.write(f"{C.format_mr(mr)}\t{hypothesis_text(ids, vocab.tokens, s)}\t{score!r}\n")
    return len(mrs)


# ---------------------------------------------------------------------------
# eval


def read_predictions(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 2:
                raise InputError(f"{path}:{i + 1}: expected 'mr<TAB>hypothesis<TAB>score'")
            out.append((parts[0], parts[1]))
    return out


def read_references(path):
    """Ordered ``[(mr, [refs])]`` grouped by exact MR string."""
    if path.endswith(".jsonl"):
        recs = read_jsonl(path)
        groups = []
        for r in recs:
            mr = C.MeaningRepresentation(r.get("act", "inform"), tuple(tuple(s) for s in r["slots"]), raw=r["mr"])
            groups.append((mr, r["refs"] if "refs" in r else [r["ref"]]))
        return C.group_by_mr(groups)
    fmt = "rnnlg-json" if path.endswith(".json") else "e2e-csv"
    return C.group_by_mr(C.load_corpus(path, fmt))


def align(preds, groups, path):
    first = {}
    for mr, hyp in preds:
        first.setdefault(mr, hyp)
    keys = [C.format_mr(mr) for mr, _ in groups]
    if set(first) != set(keys):
        missing = len(set(keys) - set(first))
        extra = len(set(first) - set(keys))
        raise InputError(f"{path}: predictions do not align with references "
                         f"({missing} MRs missing, {extra} unexpected)")
    return [first[k] for k in keys]


def evaluate_files(pred_path, ref_path, against=None, bootstrap=1000, seed=0, policy=None, out=None):
    groups = read_references(ref_path)
    hyps = align(read_predictions(pred_path), groups, pred_path)
    refs = [refs for _, refs in groups]
    report = corpus_bleu_text(hyps, refs)
    policy = policy or C.DelexPolicy()
    covered = total = 0
    for hyp, (mr, _), inst in zip(hyps, groups, report.per_instance):
        c, m, h = slot_coverage(hyp, mr, policy)
        inst.update(covered=c, missing=m, hallucinated=h)
        covered += c
        total += c + m
    report.slot_coverage = covered / total if total else 1.0
    result = {"report": report, "p_value": None}
    if against is not None:
        hyps_b = align(read_predictions(against), groups, against)
        from .corpus import tokenize
        tok = lambda xs: [tokenize(x) for x in xs]
        result["p_value"] = significance(tok(hyps), tok(hyps_b), [[tokenize(r) for r in rs] for rs in refs],
                                         resamples=bootstrap, seed=seed)
    if out is not None:
        recs = report.records()
        if result["p_value"] is not None:
            recs.append({"kind": "significance", "against": against, "resamples": bootstrap,
                         "p_value": result["p_value"]})
        write_jsonl(out, recs)
    return result


# ---------------------------------------------------------------------------
# inspect-gradients


def inspect_gradients(data_dir, out_path, draws=100, checkpoint=None, config=None, seed=0,
                      frozen_noise=False):
    vocab, train_set, _ = load_prepared(data_dir)
    if not train_set:
        raise InputError(f"{data_dir}: training split is empty")
    config = config or TrainConfig()
    if checkpoint:
        model, _, _ = load_model(checkpoint, os.path.join(data_dir, "vocab.json"))
    else:
        model = Model(len(vocab), config)
    batch = train_set[:max(2, min(config.batch_size, len(train_set)))]
    if len(batch) < 2:
        raise InputError("need at least two training pairs for a critic batch")
    stats = estimator_variance(model, batch, draws=draws, seed=seed, tau=config.tau,
                               frozen_noise=frozen_noise, select=config.forward_select)
    report = {"draws": draws, "seed": seed, "tau": config.tau, "frozen_noise": frozen_noise,
              "batch_size": len(batch), **stats}
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return report


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    ap = argparse.ArgumentParser(prog="advnlg", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="delexicalize a corpus and build the vocabulary")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("e2e-csv", "rnnlg-json"), default="e2e-csv")
    p.add_argument("--out", required=True)
    p.add_argument("--delex-policy")
    p.add_argument("--dev", help="explicit dev file (same format as --input)")
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("train", help="train in one of the four modes")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--resume", action="store_true", help="continue from OUT/warmup.ckpt")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("generate", help="decode MRs with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--beam", type=int, default=10)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab")
    p.add_argument("--delex-policy")
    p.add_argument("--max-len", type=int)

    p = sub.add_parser("eval", help="BLEU-4, slot coverage, optional paired bootstrap")
    p.add_argument("--predictions", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--bootstrap", type=int, default=1000)
    p.add_argument("--against")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delex-policy")
    p.add_argument("--out", help="write line-delimited report records here")

    p = sub.add_parser("inspect-gradients", help="ST-GS vs REINFORCE gradient variance")
    p.add_argument("--data", required=True)
    p.add_argument("--draws", type=int, default=100)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frozen-noise", action="store_true")

    p = sub.add_parser("synth", help="write a synthetic E2E-style CSV")
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return ap


def _policy(path):
    return C.DelexPolicy.load(path) if path else None


def _config(path, mode=None):
    overrides = {}
    if mode:
        overrides["mode"] = mode
    if os.environ.get("ADVNLG_SEED"):
        overrides["seed"] = int(os.environ["ADVNLG_SEED"])
    cfg = TrainConfig.load(path, **overrides) if path else TrainConfig(**overrides).validate()
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "prepare":
            res = prepare(args.input, args.format, args.out, _policy(args.delex_policy),
                          args.dev, args.min_count, args.force)
            print(f"train={res['train']} dev={res['dev']} vocab={res['vocab']} audit={len(res['audit'])}")
        elif args.command == "train":
            tr = train(_config(args.config, args.mode), args.data, args.out, args.force, args.resume)
            print(f"mode={tr.config.mode} steps={tr.step} best_epoch={tr.best_epoch} "
                  f"best_dev_bleu={tr.best_score:.4f} log_sha256={tr.log.checksum()}")
        elif args.command == "generate":
            n = generate(args.checkpoint, args.input, args.out, args.beam, args.vocab,
                         _policy(args.delex_policy), args.max_len)
            print(f"wrote {n} hypotheses to {args.out}")
        elif args.command == "eval":
            res = evaluate_files(args.predictions, args.references, args.against, args.bootstrap,
                                 args.seed, _policy(args.delex_policy), args.out)
            print(res["report"].table())
            if res["p_value"] is not None:
                print(f"paired bootstrap p-value vs {args.against}: {res['p_value']:.4f}")
        elif args.command == "inspect-gradients":
            cfg = _config(args.config)
            rep = inspect_gradients(args.data, args.out, args.draws, args.checkpoint, cfg, args.seed,
                                    args.frozen_noise)
            for grp in rep["st"]:
                print(f"{grp:8s} var[ST]={rep['st'][grp]['variance']:.3e} "
                      f"var[RL]={rep['rl'][grp]['variance']:.3e}")
        elif args.command == "synth":
            from .synth import synth_e2e, write_e2e_csv
            write_e2e_csv(args.out, synth_e2e(args.n, args.seed))
    except NumericalAbort as exc:
        print(f"error: {exc}; diagnostics in {getattr(exc, 'dump_path', '?')}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, C.LoadError, C.ParseError, T.ConfigurationError, T.DimensionError,
            FileNotFoundError, ValueError, KeyError, csv.Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
