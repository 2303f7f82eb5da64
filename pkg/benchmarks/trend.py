"""Directional trend check: advnlg vs no-adv dev BLEU on a 1,000-sample synthetic subset.

Report-only. Usage::

    python benchmarks/trend.py [--n 1000] [--epochs 30] [--seeds 0 1 2] [--out trend.json]
"""
import argparse
import json
import time

import numpy as np

from advnlg import corpus as C
from advnlg.cli import split_of
from advnlg.config import TrainConfig
from advnlg.synth import synth_e2e
from advnlg.trainer import DevExample, Example, Trainer


def build(n, data_seed=0):
    rows = synth_e2e(n, seed=data_seed)
    policy = C.DelexPolicy()
    train_rows = [r for r in rows if split_of(r[0]) == "train"]
    dev_rows = [r for r in rows if split_of(r[0]) == "dev"]
    pairs = [C.delexicalize(C.parse_mr(mr), ref, policy) for mr, ref in train_rows]
    vocab = C.build_vocab(pairs)
    train = [Example(vocab.encode(p.input_tokens), vocab.encode(p.target_tokens)) for p in pairs]
    dev = []
    for mr_text, ref in dev_rows:
        mr = C.parse_mr(mr_text)
        subs, assigned = C.mr_substitutions(mr, policy)
        dev.append(DevExample(vocab.encode(C.linearize(mr, assigned=assigned)), subs, [ref], mr_text))
    return vocab, train, dev


def run_trend(n=1000, epochs=30, seeds=(0, 1, 2), modes=("advnlg", "no-adv"), log=print):
    vocab, train, dev = build(n)
    results = {m: [] for m in modes}
    for seed in seeds:
        for mode in modes:
            t0 = time.perf_counter()
            cfg = TrainConfig(mode=mode, seed=seed, total_epochs=epochs)
            tr = Trainer(cfg, train, dev, vocab_size=len(vocab)).set_vocab(vocab.tokens)
            tr.run()
            devs = [r["dev_bleu"] for r in tr.log.records if r["stage"] == "dev"]
            results[mode].append({"seed": seed, "best": tr.best_score, "final": devs[-1],
                                  "seconds": time.perf_counter() - t0})
            log(f"seed={seed} mode={mode} best_dev_bleu={tr.best_score:.4f} "
                f"final_dev_bleu={devs[-1]:.4f} ({time.perf_counter() - t0:.0f}s)")
    summary = {m: float(np.mean([r["best"] for r in v])) for m, v in results.items()}
    return {"n": n, "train": len(train), "dev": len(dev), "epochs": epochs, "seeds": list(seeds),
            "runs": results, "mean_best_dev_bleu": summary,
            "advnlg_ge_no_adv": summary.get("advnlg", 0) >= summary.get("no-adv", 0)}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out")
    args = ap.parse_args()
    report = run_trend(args.n, args.epochs, tuple(args.seeds))
    print(json.dumps(report["mean_best_dev_bleu"]), "advnlg >= no-adv:", report["advnlg_ge_no_adv"])
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2)


if __name__ == "__main__":
    main()
