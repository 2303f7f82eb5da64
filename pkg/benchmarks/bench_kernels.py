"""Compare the compiled and numpy GRU gate kernels, alone and inside a training step.

Usage::

    python benchmarks/bench_kernels.py [--batch 32] [--hidden 128] [--repeat 200]
"""
import argparse
import json
import timeit

import numpy as np

from advnlg import corpus as C
from advnlg import kernels
from advnlg.config import TrainConfig
from advnlg.synth import synth_e2e
from advnlg.trainer import Example, Trainer


def bench_gates(b, H, repeat):
    rng = np.random.default_rng(0)
    gx, gh = rng.normal(size=(b, 3 * H)), rng.normal(size=(b, 3 * H))
    h, dout = rng.normal(size=(b, H)), rng.normal(size=(b, H))
    _, cache = kernels.gru_gates_forward(gx, gh, h)
    fwd = min(timeit.repeat(lambda: kernels.gru_gates_forward(gx, gh, h), number=repeat, repeat=5)) / repeat
    bwd = min(timeit.repeat(lambda: kernels.gru_gates_backward(dout, gh, h, cache),
                            number=repeat, repeat=5)) / repeat
    return fwd, bwd


def bench_step(batch, H, steps=5):
    rows = synth_e2e(batch * steps, seed=0)
    pairs = [C.delexicalize(C.parse_mr(mr), ref) for mr, ref in rows]
    vocab = C.build_vocab(pairs)
    data = [Example(vocab.encode(p.input_tokens), vocab.encode(p.target_tokens)) for p in pairs]
    cfg = TrainConfig(mode="no-adv", batch_size=batch, total_epochs=1, d_h=H, seed=0).validate()

    def run():
        Trainer(cfg, data, vocab_size=len(vocab)).run()

    return min(timeit.repeat(run, number=1, repeat=3)) / steps


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--hidden", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)
    report = {}
    for name in kernels.available():
        kernels.use(name)
        fwd, bwd = bench_gates(args.batch, args.hidden, args.repeat)
        step = bench_step(args.batch, args.hidden)
        report[name] = {"gates_forward_us": fwd * 1e6, "gates_backward_us": bwd * 1e6,
                        "train_step_ms": step * 1e3}
        print(f"{name:>7}: forward {fwd * 1e6:8.1f} us  backward {bwd * 1e6:8.1f} us  "
              f"train step {step * 1e3:8.1f} ms")
    if "cython" in report:
        py, cy = report["python"], report["cython"]
        print("speedup: " + ", ".join(f"{k} {py[k] / cy[k]:.2f}x" for k in py))
    print(json.dumps(report))


if __name__ == "__main__":
    main()
