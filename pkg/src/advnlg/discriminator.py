"""Wasserstein critic over utterances: shared embedding, BiGRU, batch norm, linear head."""
import numpy as np

from . import tensor as T
from .generator import add_gru_params, gru_step, pad_batch


class Discriminator:
    """Scores utterances; higher means more human-like.

    ``emb.E`` is registered in this store so the critic loss updates it, but
    it is excluded from weight clipping (it belongs to the generator too).
    """

    SHARED = ("emb.",)

    def __init__(self, E, d_h=128, rng=None, bn_eps=1e-5, bn_momentum=0.1):
        rng = rng if rng is not None else np.random.default_rng(1)
        self.d_h = d_h
        self.bn_eps, self.bn_momentum = bn_eps, bn_momentum
        self.params = T.ParamStore()
        p = self.params
        p.share("emb.E", E)
        d_emb = E.shape[1]
        add_gru_params(p, "disc.fwd", d_emb, d_h, rng)
        add_gru_params(p, "disc.bwd", d_emb, d_h, rng)
        p.add("disc.bn.gamma", np.full(2 * d_h, 0.1))
        p.add("disc.bn.beta", np.zeros(2 * d_h))
        p.add("disc.W3", rng.uniform(-0.1, 0.1, size=(2 * d_h, 1)))
        p.add("disc.b3", np.zeros(1))
        self.bn_stats = T.BatchNormStats(2 * d_h)

    @property
    def E(self):
        return self.params["emb.E"]

    def owned(self):
        return [n for n in self.params.names() if not n.startswith(self.SHARED)]

    def embed_ids(self, seqs):
        ids, mask = pad_batch([list(s) for s in seqs])
        return [T.embed(self.E, ids[:, t]) for t in range(ids.shape[1])], mask

    def embed_onehots(self, values, mask):
        """Embed per-step ``[b, V]`` (straight-through) token rows."""
        return [T.embed(self.E, v) for v in values], np.asarray(mask, dtype=bool)

    def encode(self, steps, mask):
        b = mask.shape[0]
        L = len(steps)
        zero = T.Tensor(np.zeros((b, self.d_h)))
        hf = zero
        for t in range(L):
            hf = T.where(mask[:, t:t + 1], gru_step(self.params, "disc.fwd", steps[t], hf), hf)
        hb = zero
        for t in reversed(range(L)):
            hb = T.where(mask[:, t:t + 1], gru_step(self.params, "disc.bwd", steps[t], hb), hb)
        return T.concat([hf, hb], axis=-1)

    def score(self, steps, mask, train=True, update_stats=True):
        """Critic scores ``[b]`` for embedded step list ``steps`` with validity ``mask``."""
        mask = np.asarray(mask, dtype=bool)
        if train and mask.shape[0] < 2:
            raise T.ConfigurationError("critic scoring in train mode needs a batch of at least 2")
        h = self.encode(steps, mask)
        r = T.batch_norm(h, self.params["disc.bn.gamma"], self.params["disc.bn.beta"],
                         self.bn_stats, train=train, eps=self.bn_eps,
                         momentum=self.bn_momentum, update_stats=update_stats)
        d = r @ self.params["disc.W3"] + self.params["disc.b3"]
        return T.reshape(d, (mask.shape[0],))

    def score_ids(self, seqs, train=True, update_stats=True):
        steps, mask = self.embed_ids(seqs)
        return self.score(steps, mask, train, update_stats)

    def score_rollout(self, rollout, train=True, update_stats=True):
        steps, mask = self.embed_onehots(rollout.values(), rollout.mask)
        return self.score(steps, mask, train, update_stats)

    def score_real_fake(self, real, fake, train=True, update_stats=True):
        """Score real id sequences and generated ones in a single normalized batch.

        ``fake`` is a :class:`~advnlg.gumbel.Rollout` (straight-through rows) or a
        list of id sequences. Batch statistics are taken over the union: a batch
        normalized on its own always has mean score ``W3 . beta + b3``, which
        would make both Wasserstein objectives constant.
        """
        r_steps, r_mask = self.embed_ids(real)
        if hasattr(fake, "values"):
            f_steps, f_mask = self.embed_onehots(fake.values(), fake.mask)
        else:
            f_steps, f_mask = self.embed_ids(fake)
        L = max(len(r_steps), len(f_steps))
        steps = [T.concat([self._step_or_pad(r_steps, t, r_mask.shape[0]),
                           self._step_or_pad(f_steps, t, f_mask.shape[0])], axis=0)
                 for t in range(L)]
        mask = np.zeros((r_mask.shape[0] + f_mask.shape[0], L), dtype=bool)
        mask[:r_mask.shape[0], :r_mask.shape[1]] = r_mask
        mask[r_mask.shape[0]:, :f_mask.shape[1]] = f_mask
        scores = self.score(steps, mask, train, update_stats)
        b = r_mask.shape[0]
        return T.take(scores, slice(0, b)), T.take(scores, slice(b, None))

    def _step_or_pad(self, steps, t, b):
        return steps[t] if t < len(steps) else T.Tensor(np.zeros((b, self.E.shape[1])))

    def clip(self, c):
        T.clip_weights(self.params, c, exclude=self.SHARED)

    def max_abs_owned(self):
        return max(float(np.abs(self.params[n].data).max()) for n in self.owned())


def wgan_d_loss(scores_real, scores_fake):
    """Negated critic objective ``mean(real) - mean(fake)`` (to be minimized)."""
    if scores_real.size == 0 or scores_fake.size == 0:
        raise ValueError("critic loss needs nonempty score vectors")
    return T.mean(scores_fake) - T.mean(scores_real)


def wgan_g_loss(scores_fake):
    if scores_fake.size == 0:
        raise ValueError("generator loss needs a nonempty score vector")
    return -T.mean(scores_fake)
