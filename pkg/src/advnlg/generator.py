"""GRU encoder-decoder with dot-product attention and a shared embedding."""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .corpus import BOS_ID, EOS_ID, PAD_ID


def pad_batch(seqs, pad=PAD_ID):
    """Right-pad id sequences; returns ``(ids [b, L], mask [b, L])``."""
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), pad, dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask


def _uniform(rng, shape, scale):
    return rng.uniform(-scale, scale, size=shape)


def gru_step(store, prefix, x, h):
    gx = x @ store[prefix + ".Wx"] + store[prefix + ".bx"]
    gh = h @ store[prefix + ".Wh"] + store[prefix + ".bh"]
    return T.gru_gates(gx, gh, h)


def add_gru_params(store, prefix, d_in, d_h, rng):
    s = 1.0 / np.sqrt(d_h)
    store.add(prefix + ".Wx", _uniform(rng, (d_in, 3 * d_h), s))
    store.add(prefix + ".Wh", _uniform(rng, (d_h, 3 * d_h), s))
    store.add(prefix + ".bx", _uniform(rng, (3 * d_h,), s))
    store.add(prefix + ".bh", _uniform(rng, (3 * d_h,), s))


@dataclass
class DecoderState:
    hidden: T.Tensor      # [b, H]
    memory: T.Tensor      # encoder states [b, m, H]
    mask: np.ndarray      # valid memory positions [b, m]

    def select(self, rows):
        rows = np.asarray(rows)
        return DecoderState(T.Tensor(self.hidden.data[rows]), T.Tensor(self.memory.data[rows]),
                            self.mask[rows])


def attend(hidden, states, mask=None):
    """Context vector for one decoder state, batched or not."""
    if hidden.ndim == 1:
        ctx, _ = T.attention(T.reshape(hidden, (1, -1)),
                             T.reshape(states, (1,) + states.shape),
                             None if mask is None else np.asarray(mask)[None])
        return T.reshape(ctx, (hidden.shape[0],))
    ctx, _ = T.attention(hidden, states, mask)
    return ctx


class Generator:
    """Sequence-to-sequence response generator.

    Parameters live in ``self.params``, a :class:`~advnlg.tensor.ParamStore`
    whose ``emb.E`` entry is shared with the discriminator.
    """

    def __init__(self, vocab_size, d_emb=50, d_h=128, rng=None, store=None, dropout=0.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.vocab_size, self.d_emb, self.d_h = vocab_size, d_emb, d_h
        self.dropout = dropout
        self.params = store if store is not None else T.ParamStore()
        p = self.params
        if "emb.E" not in p:
            p.add("emb.E", rng.normal(0.0, 0.1, size=(vocab_size, d_emb)))
        add_gru_params(p, "gen.enc", d_emb, d_h, rng)
        add_gru_params(p, "gen.dec", d_emb + d_h, d_h, rng)
        p.add("gen.out.W", _uniform(rng, (d_h, vocab_size), 1.0 / np.sqrt(d_h)))
        p.add("gen.out.b", np.zeros(vocab_size))
        self.check()

    def check(self):
        p, V, de, H = self.params, self.vocab_size, self.d_emb, self.d_h
        expect = {
            "emb.E": (V, de),
            "gen.enc.Wx": (de, 3 * H), "gen.enc.Wh": (H, 3 * H),
            "gen.enc.bx": (3 * H,), "gen.enc.bh": (3 * H,),
            "gen.dec.Wx": (de + H, 3 * H), "gen.dec.Wh": (H, 3 * H),
            "gen.dec.bx": (3 * H,), "gen.dec.bh": (3 * H,),
            "gen.out.W": (H, V), "gen.out.b": (V,),
        }
        for name, shape in expect.items():
            if p[name].shape != shape:
                raise T.DimensionError(f"{name}: expected {shape}, got {p[name].shape}")

    @property
    def E(self):
        return self.params["emb.E"]

    # -- encoder ----------------------------------------------------------

    def encode_batch(self, ids, mask, rng=None, train=False):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape[1] == 0:
            raise T.UsageError("cannot encode an empty sequence")
        b, m = ids.shape
        x = T.embed(self.E, ids)
        if train and self.dropout > 0:
            x = T.dropout(x, self.dropout, rng)
        h = T.Tensor(np.zeros((b, self.d_h)))
        states = []
        for t in range(m):
            xt = T.take(x, (slice(None), t))
            h_new = gru_step(self.params, "gen.enc", xt, h)
            h = T.where(mask[:, t:t + 1], h_new, h)
            states.append(h)
        return T.stack(states, axis=1), h

    def encode(self, input_ids):
        """Encode one sequence; returns ``(states [m, H], final [H])`` as plain-shaped tensors."""
        if len(input_ids) == 0:
            raise T.UsageError("cannot encode an empty sequence")
        ids, mask = pad_batch([list(input_ids)])
        states, final = self.encode_batch(ids, mask)
        return T.reshape(states, states.shape[1:]), T.reshape(final, (self.d_h,))

    def init_state(self, ids, mask, rng=None, train=False):
        states, final = self.encode_batch(ids, mask, rng, train)
        return DecoderState(final, states, np.asarray(mask, dtype=bool))

    # -- decoder ----------------------------------------------------------

    def step_logits(self, prev, state, rng=None, train=False):
        """One decoder step. ``prev`` is ids ``[b]`` or a relaxed one-hot tensor ``[b, V]``."""
        if isinstance(prev, T.Tensor):
            emb = T.embed(self.E, prev)
        else:
            emb = T.embed(self.E, np.asarray(prev, dtype=np.int64))
        if train and self.dropout > 0:
            emb = T.dropout(emb, self.dropout, rng)
        ctx, _ = T.attention(state.hidden, state.memory, state.mask)
        x = T.concat([emb, ctx], axis=-1)
        h = gru_step(self.params, "gen.dec", x, state.hidden)
        logits = h @ self.params["gen.out.W"] + self.params["gen.out.b"]
        return logits, DecoderState(h, state.memory, state.mask)

    def decode_step(self, prev, state):
        logits, new = self.step_logits(prev, state)
        return T.softmax(logits), new

    # -- training loss ----------------------------------------------------

    def teacher_forced_loss(self, inputs, targets, rng=None, train=True):
        """Mean over sequences of the summed per-token negative log-likelihood.

        ``inputs``/``targets`` are lists of id sequences; each target starts
        with BOS and ends with EOS. Padded positions contribute nothing.
        """
        if any(len(t) < 2 for t in targets):
            raise T.UsageError("target must hold at least BOS and EOS")
        in_ids, in_mask = pad_batch(inputs)
        tgt, tgt_mask = pad_batch(targets)
        state = self.init_state(in_ids, in_mask, rng, train)
        picks = []
        for t in range(tgt.shape[1] - 1):
            logits, state = self.step_logits(tgt[:, t], state, rng, train)
            picks.append(T.pick(T.log_softmax(logits), tgt[:, t + 1]))
        nll = T.stack(picks, axis=1) * tgt_mask[:, 1:].astype(np.float64)
        return -T.sum(nll) * (1.0 / len(targets))

    # -- inference --------------------------------------------------------

    def greedy_decode_batch(self, inputs, max_len):
        """Greedy decoding; each output excludes BOS and keeps a terminal EOS."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        ids, mask = pad_batch(inputs)
        state = self.init_state(ids, mask)
        b = len(inputs)
        prev = np.full(b, BOS_ID, dtype=np.int64)
        out = [[] for _ in range(b)]
        done = np.zeros(b, dtype=bool)
        for _ in range(max_len):
            logits, state = self.step_logits(prev, state)
            logp = T.log_softmax(logits).data
            prev = np.argmax(logp, axis=1)
            for i in np.flatnonzero(~done):
                out[i].append(int(prev[i]))
            done |= prev == EOS_ID
            if done.all():
                break
        return out

    def greedy_decode(self, input_ids, max_len):
        return self.greedy_decode_batch([list(input_ids)], max_len)[0]

    def beam_decode(self, input_ids, width, max_len, length_norm=True):
        """Beam search; returns ``[(ids, score), ...]`` best first, at most ``width`` long.

        Hypotheses that emit EOS are retired; those still open at ``max_len``
        are kept as truncated. Scores are summed log-probabilities, divided by
        the hypothesis length when ``length_norm`` is set.
        """
        if width < 1:
            raise ValueError("beam width must be >= 1")
        ids, mask = pad_batch([list(input_ids)])
        state = self.init_state(ids, mask)
        V = self.vocab_size
        live = [([], 0.0)]
        finished = []

        def norm(seq, s):
            return s / len(seq) if length_norm and seq else s

        for _ in range(max_len):
            prev = np.array([seq[-1] if seq else BOS_ID for seq, _ in live], dtype=np.int64)
            logits, new_state = self.step_logits(prev, state)
            logp = T.log_softmax(logits).data
            base = np.array([s for _, s in live])
            cand = (base[:, None] + logp).reshape(-1)
            order = np.argsort(-cand, kind="stable")[:width]
            next_live, rows = [], []
            for c in order:
                bi, tok = divmod(int(c), V)
                seq = live[bi][0] + [tok]
                if tok == EOS_ID:
                    finished.append((seq, float(cand[c])))
                else:
                    next_live.append((seq, float(cand[c])))
                    rows.append(bi)
            if not next_live:
                live = []
                break
            live = next_live
            state = new_state.select(rows)
        finished.extend(live)
        ranked = sorted(((seq, norm(seq, s)) for seq, s in finished), key=lambda x: -x[1])
        return ranked[:width]
