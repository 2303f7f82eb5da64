"""Two-stage adversarial training, the REINFORCE baseline, and the ablations."""
import hashlib
import json
import math
import time
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .corpus import BOS_ID, EOS_ID, PAD_ID, relexicalize, tokenize
from .discriminator import Discriminator, wgan_d_loss, wgan_g_loss
from .evaluate import bleu4
from .generator import Generator, pad_batch
from .gumbel import generate_rollout


class NumericalAbort(RuntimeError):
    def __init__(self, message, batch=None):
        super().__init__(message)
        self.batch = batch


@dataclass
class Example:
    input_ids: list
    target_ids: list


@dataclass
class DevExample:
    input_ids: list
    substitutions: dict
    refs: list
    mr: str = ""


# ---------------------------------------------------------------------------
# model container and checkpoint state


class Model:
    def __init__(self, vocab_size, config):
        init = rngmod.stream(config.seed, "init")
        self.config = config
        self.gen = Generator(vocab_size, config.d_emb, config.d_h, rng=init, dropout=config.dropout)
        self.disc = Discriminator(self.gen.E, config.d_h, rng=init, bn_eps=config.bn_eps,
                                  bn_momentum=config.bn_momentum)
        # Start the critic inside its feasible box so the first clip is a no-op.
        self.disc.clip(config.clip_c)

    @property
    def vocab_size(self):
        return self.gen.vocab_size

    def gen_owned(self):
        return [n for n in self.gen.params.names() if n.startswith("gen.")]

    def state(self, meta=None):
        g, d = self.gen.params, self.disc.params
        out = {}
        for n in g.names():
            out[n] = g[n].data.copy()
        for n in self.disc.owned():
            out[n] = d[n].data.copy()
        for n in g.names():
            out[f"__acc__/gen/{n}"] = g.acc[n].copy()
        for n in d.names():
            out[f"__acc__/disc/{n}"] = d.acc[n].copy()
        out["__bn__/disc.mean"] = self.disc.bn_stats.mean.copy()
        out["__bn__/disc.var"] = self.disc.bn_stats.var.copy()
        out["__meta__/dims"] = np.array([self.vocab_size, self.gen.d_emb, self.gen.d_h], dtype=float)
        for k, v in (meta or {}).items():
            out[f"__meta__/{k}"] = np.atleast_1d(np.asarray(v, dtype=float))
        return out

    def load_state(self, arrays):
        dims = tuple(int(x) for x in arrays["__meta__/dims"])
        if dims != (self.vocab_size, self.gen.d_emb, self.gen.d_h):
            raise T.DimensionError(f"checkpoint dims {dims} do not match model "
                                   f"{(self.vocab_size, self.gen.d_emb, self.gen.d_h)}")
        g, d = self.gen.params, self.disc.params
        for n in g.names():
            g[n].data[...] = arrays[n]
            g.acc[n][...] = arrays[f"__acc__/gen/{n}"]
        for n in self.disc.owned():
            d[n].data[...] = arrays[n]
        for n in d.names():
            d.acc[n][...] = arrays[f"__acc__/disc/{n}"]
        self.disc.bn_stats.mean = arrays["__bn__/disc.mean"].copy()
        self.disc.bn_stats.var = arrays["__bn__/disc.var"].copy()

    @classmethod
    def from_state(cls, arrays, config):
        V = int(arrays["__meta__/dims"][0])
        model = cls(V, config)
        model.load_state(arrays)
        return model


def meta_of(arrays):
    return {k[len("__meta__/"):]: v for k, v in arrays.items() if k.startswith("__meta__/")}


def params_digest(store, names):
    h = hashlib.sha256()
    for n in names:
        h.update(n.encode())
        h.update(store[n].data.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# logging


class TrainLog:
    FIELDS = ("epoch", "step", "stage", "update", "l_gen", "d_obj", "g_adv", "dev_bleu")

    def __init__(self):
        self.records = []
        self.timings = []
        self._t0 = time.perf_counter()

    def add(self, **kw):
        self.records.append({k: kw.get(k) for k in self.FIELDS})
        self.timings.append(time.perf_counter() - self._t0)

    def lines(self):
        return [json.dumps(r) for r in self.records]

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.writelines(line + "\n" for line in self.lines())

    def write_timings(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for r, t in zip(self.records, self.timings):
                fh.write(json.dumps({"step": r["step"], "stage": r["stage"], "wall_time": t}) + "\n")

    @classmethod
    def read(cls, path):
        log = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    log.records.append(json.loads(line))
                    log.timings.append(0.0)
        return log

    def checksum(self):
        return hashlib.sha256("\n".join(self.lines()).encode()).hexdigest()

    def stage_records(self, stage):
        return [r for r in self.records if r["stage"] == stage]


# ---------------------------------------------------------------------------
# estimators


def real_of(batch):
    """Reference sequences in rollout layout: BOS dropped, EOS kept."""
    return [e.target_ids[1:] for e in batch]


def sample_sequences(gen, inputs, max_len, rng):
    """Ancestral sampling at temperature 1; returns ``(sequences, summed log-prob [b])``."""
    ids, mask = pad_batch([list(x) for x in inputs])
    state = gen.init_state(ids, mask)
    b = len(inputs)
    prev = np.full(b, BOS_ID, dtype=np.int64)
    alive = np.ones(b, dtype=bool)
    seqs = [[] for _ in range(b)]
    picks, valid = [], []
    for _ in range(max_len):
        logits, state = gen.step_logits(prev, state)
        logp = T.log_softmax(logits)
        cdf = np.cumsum(np.exp(logp.data), axis=1)
        u = rng.random(b) * cdf[:, -1]
        tok = np.minimum((cdf < u[:, None]).sum(axis=1), gen.vocab_size - 1)
        picks.append(T.pick(logp, tok))
        valid.append(alive.astype(np.float64))
        for i in np.flatnonzero(alive):
            seqs[i].append(int(tok[i]))
        alive = alive & (tok != EOS_ID)
        prev = tok
        if not alive.any():
            break
    logp_sum = T.sum(T.stack(picks, axis=1) * np.stack(valid, axis=1), axis=1)
    return seqs, logp_sum


def reinforce_loss(logp_sum, rewards, baseline):
    """Score-function surrogate whose gradient is ``-(r - b) * grad log p``, batch-averaged."""
    adv = np.asarray(rewards, dtype=np.float64) - baseline
    return -T.mean(logp_sum * adv)


# ---------------------------------------------------------------------------
# trainer


def rollout_max_len(examples, factor=1.5):
    longest = max(len(e.target_ids) - 1 for e in examples)
    return int(math.ceil(factor * longest))


class Trainer:
    """Runs one configured training mode over encoded examples.

    All randomness is drawn from streams keyed by ``(seed, purpose, epoch,
    batch)`` so a run resumed from a checkpoint replays identically.
    """

    def __init__(self, config, train, dev=(), vocab_size=None, model=None, log=None,
                 dev_scorer=None, on_improve=None, max_len=None):
        if not train:
            raise ValueError("training corpus is empty")
        self.config = config.validate()
        self.train = list(train)
        self.dev = list(dev)
        self.model = model if model is not None else Model(vocab_size, config)
        self.log = log if log is not None else TrainLog()
        self.dev_scorer = dev_scorer
        self.on_improve = on_improve
        self.max_len = max_len or rollout_max_len(self.train, config.rollout_len_factor)
        self.step = 0
        self.updates = 0
        self.gen_updates = 0
        self.disc_updates = 0
        self.baseline = None
        self.best_score = -math.inf
        self.best_epoch = -1
        self.best_state = None

    @property
    def gen(self):
        return self.model.gen

    @property
    def disc(self):
        return self.model.disc

    def meta(self, epochs_done):
        return {"step": self.step, "updates": self.updates, "gen_updates": self.gen_updates,
                "disc_updates": self.disc_updates, "epochs_done": epochs_done,
                "baseline": np.nan if self.baseline is None else self.baseline,
                "best": [self.best_score, self.best_epoch], "max_len": self.max_len}

    def restore_meta(self, meta):
        self.step = int(meta["step"][0])
        self.updates = int(meta["updates"][0])
        self.gen_updates = int(meta["gen_updates"][0])
        self.disc_updates = int(meta["disc_updates"][0])
        b = float(meta["baseline"][0])
        self.baseline = None if math.isnan(b) else b
        self.best_score, self.best_epoch = float(meta["best"][0]), int(meta["best"][1])
        return int(meta["epochs_done"][0])

    def batches(self, epoch):
        order = rngmod.stream(self.config.seed, "shuffle", epoch).permutation(len(self.train))
        bs = self.config.batch_size
        chunks = [list(order[i:i + bs]) for i in range(0, len(order), bs)]
        if len(chunks) > 1 and len(chunks[-1]) == 1:
            chunks[-2].extend(chunks.pop())
        return [[self.train[i] for i in c] for c in chunks]

    def _stream(self, purpose, epoch, i):
        return rngmod.stream(self.config.seed, purpose, epoch, i)

    def _check(self, value, what, batch):
        if not np.isfinite(value):
            raise NumericalAbort(f"{what} is not finite at step {self.step}", batch)

    def _rms(self, store):
        c = self.config
        T.rmsprop_step(store, lr=c.lr, decay=c.rms_decay, eps=c.rms_eps)

    # -- single updates ---------------------------------------------------

    def generator_update(self, batch, epoch, i, adversarial=None):
        """CE (+ weighted adversarial term) update; ``adversarial`` in {None, "st", "rl"}."""
        c = self.config
        gen, disc = self.gen, self.disc
        inputs = [e.input_ids for e in batch]
        targets = [e.target_ids for e in batch]
        gen.params.zero_grad()
        disc.params.zero_grad()
        g_adv = None
        rewards = None
        with T.Tape() as tape, disc.params.frozen(disc.owned()):
            ce = gen.teacher_forced_loss(inputs, targets, rng=self._stream("dropout", epoch, i))
            loss = ce
            if adversarial == "st" and c.adv_weight > 0:
                roll = generate_rollout(gen, inputs, c.tau, self.max_len,
                                        rng=self._stream("gumbel", epoch, i), select=c.forward_select)
                _, fake = disc.score_real_fake(real_of(batch), roll, update_stats=False)
                adv = wgan_g_loss(fake)
                g_adv = adv.item()
                loss = ce + c.adv_weight * adv
            elif adversarial == "rl" and c.adv_weight > 0:
                seqs, logp_sum = sample_sequences(gen, inputs, self.max_len,
                                                  self._stream("sample", epoch, i))
                with T.no_grad():
                    rewards = disc.score_real_fake(real_of(batch), seqs, update_stats=False)[1].data
                if self.baseline is None:
                    self.baseline = float(rewards.mean())
                adv = reinforce_loss(logp_sum, rewards, self.baseline)
                g_adv = -float(rewards.mean())
                loss = ce + c.adv_weight * adv
            self._check(loss.item(), "generator loss", batch)
            tape.backward(loss)
        self._rms(gen.params)
        disc.params.zero_grad()
        if rewards is not None:
            d = c.rl_baseline_decay
            self.baseline = d * self.baseline + (1 - d) * float(rewards.mean())
        self.gen_updates += 1
        return ce.item(), g_adv

    def discriminator_update(self, batch, epoch, i):
        c = self.config
        gen, disc = self.gen, self.disc
        inputs = [e.input_ids for e in batch]
        real = real_of(batch)
        roll = generate_rollout(gen, inputs, c.tau, self.max_len,
                                rng=self._stream("gumbel-d", epoch, i), select=c.forward_select)
        gen.params.zero_grad()
        disc.params.zero_grad()
        with T.Tape() as tape:
            loss = wgan_d_loss(*disc.score_real_fake(real, roll))
            self._check(loss.item(), "critic loss", batch)
            tape.backward(loss)
        self._rms(disc.params)
        disc.clip(c.clip_c)
        gen.params.zero_grad()
        if c.debug and disc.max_abs_owned() > c.clip_c:
            raise AssertionError("critic weights escaped the clipping box")
        self.disc_updates += 1
        return -loss.item()

    # -- epochs -----------------------------------------------------------

    def warmup_epoch(self, epoch, stage="warmup"):
        for i, batch in enumerate(self.batches(epoch)):
            l_gen, _ = self.generator_update(batch, epoch, i)
            self.log.add(epoch=epoch, step=self.step, stage=stage, update="gen", l_gen=l_gen)
            self.step += 1

    def adversarial_epoch(self, epoch, estimator="st"):
        """Generator/critic updates on a fixed cycle of ``gen_updates_per_disc + 1`` batches."""
        k = self.config.gen_updates_per_disc
        stage = "adversarial" if estimator == "st" else "reinforce"
        for i, batch in enumerate(self.batches(epoch)):
            if self.updates % (k + 1) < k:
                l_gen, g_adv = self.generator_update(batch, epoch, i, adversarial=estimator)
                self.log.add(epoch=epoch, step=self.step, stage=stage, update="gen",
                             l_gen=l_gen, g_adv=g_adv)
            else:
                d_obj = self.discriminator_update(batch, epoch, i)
                self.log.add(epoch=epoch, step=self.step, stage=stage, update="disc", d_obj=d_obj)
            self.updates += 1
            self.step += 1

    def reinforce_epoch(self, epoch):
        self.adversarial_epoch(epoch, estimator="rl")

    # -- evaluation -------------------------------------------------------

    def predict(self, examples, beam=None):
        beam = beam or self.config.dev_beam
        return predict(self.model, [e.input_ids for e in examples], beam, self.max_len,
                       self.config.length_norm)

    def dev_bleu(self, epoch):
        if self.dev_scorer is not None:
            return float(self.dev_scorer(epoch, self))
        if not self.dev:
            return None
        return dev_bleu(self.model, self.dev, self._vocab_tokens, self.config.dev_beam,
                        self.max_len, self.config.length_norm)

    _vocab_tokens = None

    def set_vocab(self, tokens):
        self._vocab_tokens = list(tokens)
        return self

    def end_epoch(self, epoch):
        score = self.dev_bleu(epoch)
        self.log.add(epoch=epoch, step=self.step, stage="dev", dev_bleu=score)
        if score is None:
            score = float(epoch)
        if score > self.best_score:
            self.best_score, self.best_epoch = score, epoch
            self.best_state = self.model.state(self.meta(epoch + 1))
            if self.on_improve is not None:
                self.on_improve(self, epoch)

    def stage_of(self, epoch):
        c = self.config
        if c.mode == "no-adv":
            return "warmup"
        if c.mode in ("advnlg", "rl") and epoch < c.warmup_epochs:
            return "warmup"
        return "reinforce" if c.mode == "rl" else "adversarial"

    def run(self, start_epoch=0, on_warmup_done=None):
        c = self.config
        for epoch in range(start_epoch, c.total_epochs):
            stage = self.stage_of(epoch)
            if stage == "warmup":
                self.warmup_epoch(epoch)
            elif stage == "reinforce":
                self.reinforce_epoch(epoch)
            else:
                self.adversarial_epoch(epoch)
            self.end_epoch(epoch)
            if (on_warmup_done is not None and c.mode in ("advnlg", "rl")
                    and epoch == c.warmup_epochs - 1):
                on_warmup_done(self, epoch)
        if self.best_state is None:
            self.best_state = self.model.state(self.meta(c.total_epochs))
        return self.best_state, self.log


def warmup(config, train, model=None, vocab_size=None):
    """Cross-entropy-only pretraining for ``config.warmup_epochs`` epochs."""
    if config.mode == "no-warmup":
        raise T.ConfigurationError("warmup is not part of the no-warmup ablation")
    tr = Trainer(config, train, vocab_size=vocab_size, model=model)
    for epoch in range(config.warmup_epochs):
        tr.warmup_epoch(epoch)
    return tr.model.state(tr.meta(config.warmup_epochs)), tr


def run(config, train, dev=(), vocab=None, **kw):
    tr = Trainer(config, train, dev, vocab_size=len(vocab), **kw)
    tr.set_vocab(vocab.tokens)
    return tr.run()


# ---------------------------------------------------------------------------
# decoding helpers shared with the CLI


def predict(model, inputs, beam, max_len, length_norm=True):
    """Top hypothesis ids and score for each input."""
    gen = model.gen
    if beam == 1:
        outs = []
        for i in range(0, len(inputs), 64):
            outs.extend(gen.greedy_decode_batch(inputs[i:i + 64], max_len))
        scores = [_seq_score(gen, x, y, length_norm) for x, y in zip(inputs, outs)]
        return list(zip(outs, scores))
    return [gen.beam_decode(x, beam, max_len, length_norm)[0] for x in inputs]


def _seq_score(gen, inp, out, length_norm):
    if not out:
        return 0.0
    ids, mask = pad_batch([list(inp)])
    state = gen.init_state(ids, mask)
    prev, total = BOS_ID, 0.0
    for tok in out:
        logits, state = gen.step_logits(np.array([prev]), state)
        total += float(T.log_softmax(logits).data[0, tok])
        prev = tok
    return total / len(out) if length_norm else total


def hypothesis_text(ids, vocab_tokens, substitutions):
    toks = [vocab_tokens[i] for i in ids if i not in (PAD_ID, BOS_ID, EOS_ID)]
    return relexicalize(toks, substitutions)


def dev_bleu(model, dev, vocab_tokens, beam, max_len, length_norm=True):
    preds = predict(model, [d.input_ids for d in dev], beam, max_len, length_norm)
    hyps = [tokenize(hypothesis_text(ids, vocab_tokens, d.substitutions)) for (ids, _), d in zip(preds, dev)]
    refs = [[tokenize(r) for r in d.refs] for d in dev]
    return bleu4(hyps, refs).bleu


# ---------------------------------------------------------------------------
# estimator variance


GROUPS = ("emb", "gen.enc", "gen.dec", "gen.out")


def _group_grads(store):
    out = {}
    for g in GROUPS:
        parts = [store[n].grad.reshape(-1) if store[n].grad is not None else np.zeros(store[n].size)
                 for n in store.names() if n.startswith(g + ".")]
        out[g] = np.concatenate(parts)
    return out


def estimator_variance(model, batch, draws=100, seed=0, tau=0.1, max_len=None,
                       frozen_noise=False, select="greedy", baseline_draws=20):
    """Per-group mean and variance of the adversarial generator gradient under ST-GS and REINFORCE.

    Parameters and the batch stay fixed; only the estimator's randomness
    varies across draws. The REINFORCE baseline is a constant estimated from
    ``baseline_draws`` separate samples.
    """
    gen, disc = model.gen, model.disc
    inputs = [e.input_ids for e in batch]
    real = real_of(batch)
    max_len = max_len or rollout_max_len(batch)
    owned = disc.owned()
    stats = {}

    def collect(fn):
        grads = {g: [] for g in GROUPS}
        for d in range(draws):
            gen.params.zero_grad()
            disc.params.zero_grad()
            with T.Tape() as tape, disc.params.frozen(owned):
                tape.backward(fn(d))
            for g, v in _group_grads(gen.params).items():
                grads[g].append(v)
        gen.params.zero_grad()
        disc.params.zero_grad()
        return {g: np.stack(v) for g, v in grads.items()}

    def st_loss(d):
        r = rngmod.stream(seed, "inspect-st", 0 if frozen_noise else d)
        roll = generate_rollout(gen, inputs, tau, max_len, rng=r, select=select)
        return wgan_g_loss(disc.score_real_fake(real, roll, update_stats=False)[1])

    with T.no_grad():
        pre = [disc.score_real_fake(real, sample_sequences(gen, inputs, max_len,
                                                           rngmod.stream(seed, "inspect-base", j))[0],
                                    update_stats=False)[1].data.mean()
               for j in range(baseline_draws)]
    baseline = float(np.mean(pre))

    def rl_loss(d):
        seqs, logp_sum = sample_sequences(gen, inputs, max_len, rngmod.stream(seed, "inspect-rl", d))
        with T.no_grad():
            rewards = disc.score_real_fake(real, seqs, update_stats=False)[1].data
        return reinforce_loss(logp_sum, rewards, baseline)

    for name, fn in (("st", st_loss), ("rl", rl_loss)):
        g = collect(fn)
        stats[name] = {grp: {"mean": float(v.mean()), "variance": float((v - v[0]).var(axis=0).mean())}
                       for grp, v in g.items()}
    stats["baseline"] = baseline
    return stats
