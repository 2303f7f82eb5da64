import numpy as np
import pytest

from advnlg import tensor as T
from advnlg.corpus import delexicalize, load_corpus
from advnlg.discriminator import Discriminator, wgan_d_loss, wgan_g_loss
from advnlg.generator import Generator
from advnlg.gumbel import generate_rollout, relax, sample_gumbel, straight_through_logp
from advnlg.rng import stream
from helpers import analytic_grads, numeric_grads, rel_error

V = 10


def make(seed=0, d_h=4, d_emb=3):
    g = Generator(V, d_emb=d_emb, d_h=5, rng=np.random.default_rng(seed))
    d = Discriminator(g.E, d_h=d_h, rng=np.random.default_rng(seed + 100))
    return g, d


BATCH = [[1, 4, 5, 2], [1, 6, 2], [1, 7, 7, 8, 9, 2]]


def test_shares_embedding_and_owned_excludes_it():
    g, d = make()
    assert d.params["emb.E"] is g.params["emb.E"]
    assert "emb.E" not in d.owned()
    assert all(n.startswith("disc.") for n in d.owned())


def test_constant_head():
    _, d = make()
    d.params["disc.W3"].data[...] = 0.0
    d.params["disc.b3"].data[...] = 5.0
    assert np.all(d.score_ids(BATCH).data == 5.0)
    assert np.all(d.score_ids(BATCH, train=False).data == 5.0)


def test_duplicates_get_identical_scores():
    _, d = make(1)
    s = d.score_ids([BATCH[0], BATCH[1], BATCH[0]]).data
    assert abs(s[0] - s[2]) <= 1e-15  # BLAS row blocking may differ in the last ulp


def test_train_mode_needs_two_rows():
    _, d = make()
    with pytest.raises(T.ConfigurationError):
        d.score_ids([BATCH[0]])
    assert d.score_ids([BATCH[0]], train=False).shape == (1,)


def test_infer_mode_is_deterministic_and_batch_independent():
    _, d = make(2)
    d.score_ids(BATCH)  # populate running stats
    alone = d.score_ids([BATCH[1]], train=False).data[0]
    together = d.score_ids(BATCH, train=False).data[1]
    assert abs(alone - together) <= 1e-12
    assert d.score_ids(BATCH, train=False).data.tobytes() == d.score_ids(BATCH, train=False).data.tobytes()


def test_padding_selects_real_final_states():
    _, d = make(3)
    alone = d.encode(*d.embed_ids([BATCH[1]])).data[0]
    padded = d.encode(*d.embed_ids(BATCH)).data[1]
    assert np.allclose(alone, padded, atol=1e-14)


def test_update_stats_flag():
    _, d = make()
    before = d.bn_stats.mean.copy()
    d.score_ids(BATCH, update_stats=False)
    assert np.array_equal(d.bn_stats.mean, before)
    d.score_ids(BATCH)
    assert not np.array_equal(d.bn_stats.mean, before)


@pytest.mark.parametrize("seed", range(3))
def test_score_gradient_through_straight_through_path(seed):
    """FD oracle across the module boundary with frozen Gumbel noise.

    The ST value is the hard one-hot; its gradient equals that of
    ``D(hard + relaxed(l) - relaxed(l0))`` at ``l = l0``, which is smooth in
    ``l`` and can be differenced.
    """
    _, d = make(seed)
    rng = np.random.default_rng(seed)
    b, L = 3, 3
    logits = [T.Tensor(rng.normal(size=(b, V)), requires_grad=True) for _ in range(L)]
    noise = [sample_gumbel((b, V), rng) for _ in range(L)]
    tau = 0.5
    mask = np.ones((b, L), dtype=bool)
    hards = [straight_through_logp(T.log_softmax(l), tau, noise=g).forward for l, g in zip(logits, noise)]
    base = [relax(T.log_softmax(l), tau, g).data for l, g in zip(logits, noise)]

    real = [[1, 4, 2], [1, 5, 6, 7, 2], [1, 9, 2]]

    class Rows:
        def __init__(self, vals):
            self.vals, self.mask = vals, mask

        def values(self):
            return self.vals

    def fake_mean(vals):
        return T.mean(d.score_real_fake(real, Rows(vals), update_stats=False)[1])

    def st():
        return fake_mean([straight_through_logp(T.log_softmax(l), tau, noise=g).value
                          for l, g in zip(logits, noise)])

    def surrogate():
        return fake_mean([relax(T.log_softmax(l), tau, g) + (h - r0)
                          for l, g, h, r0 in zip(logits, noise, hards, base)])

    hard_ids = [list(np.argmax(np.stack([h[i] for h in hards]), axis=1)) for i in range(b)]
    by_ids = T.mean(d.score_real_fake(real, hard_ids, update_stats=False)[1]).item()
    assert abs(st().item() - by_ids) <= 1e-12
    ga = analytic_grads(st, logits)
    gn = numeric_grads(surrogate, logits)
    assert rel_error(np.concatenate([a.ravel() for a in ga]), np.concatenate([n.ravel() for n in gn])) <= 1e-3


# -- losses -----------------------------------------------------------------------


def test_wgan_loss_arithmetic():
    assert wgan_d_loss(T.Tensor([1.0, 1.0]), T.Tensor([0.0, 0.0])).item() == -1.0
    assert wgan_d_loss(T.Tensor([0.3, 0.5]), T.Tensor([0.3, 0.5])).item() == 0.0
    assert wgan_g_loss(T.Tensor([2.0, 4.0])).item() == -3.0
    with pytest.raises(ValueError):
        wgan_g_loss(T.Tensor(np.zeros(0)))


def test_separately_normalized_batches_have_constant_mean():
    _, d = make(4)
    d.params["disc.bn.beta"].data[...] = 0.03
    expect = float(d.params["disc.W3"].data[:, 0] @ d.params["disc.bn.beta"].data + d.params["disc.b3"].data[0])
    for seqs in (BATCH, [[1, 9, 9, 2], [1, 3, 2]]):
        assert abs(T.mean(d.score_ids(seqs, update_stats=False)).item() - expect) <= 1e-12
    real, fake = d.score_real_fake(BATCH, [[1, 9, 9, 2], [1, 3, 2]], update_stats=False)
    assert abs(T.mean(real).item() - T.mean(fake).item()) > 1e-6


def test_joint_scores_match_concatenated_batch():
    _, d = make(4)
    real, fake = d.score_real_fake(BATCH[:2], [BATCH[2]], update_stats=False)
    whole = d.score_ids(BATCH, update_stats=False).data
    assert np.allclose(np.concatenate([real.data, fake.data]), whole, atol=1e-14)


def test_critic_step_increases_objective():
    g, d = make(4)
    fake = generate_rollout(g, BATCH, 0.1, 6, rng=stream(0, "f")).sequences()
    real = [[1, 9, 9, 2], [1, 3, 8, 2], [1, 5, 2]]

    def objective():
        with T.no_grad():
            r, f = d.score_real_fake(real, fake, update_stats=False)
            return (T.mean(r) - T.mean(f)).item()

    before = objective()
    with d.params.frozen(["emb.E"]), T.Tape() as tape:
        loss = wgan_d_loss(*d.score_real_fake(real, fake, update_stats=False))
        tape.backward(loss)
    T.rmsprop_step(d.params, lr=1e-3)
    assert objective() > before


def test_constant_critic_gives_zero_generator_gradient():
    g, d = make(5)
    d.params["disc.W3"].data[...] = 0.0
    r = generate_rollout(g, BATCH, 0.1, 6, rng=stream(0, "z"))
    params = [g.params[n] for n in g.params.names()]
    grads = analytic_grads(lambda: wgan_g_loss(d.score_real_fake(BATCH, r, update_stats=False)[1]), params)
    assert all(np.all(x == 0) for x in grads)


def test_embedding_gradient_is_live():
    g, d = make(6)
    with T.Tape() as tape:
        r = generate_rollout(g, BATCH, 0.1, 6, rng=stream(0, "e"))
        loss = wgan_g_loss(d.score_real_fake(BATCH, r, update_stats=False)[1])
        tape.backward(loss)
    assert np.abs(g.E.grad).max() > 0
    assert np.abs(g.params["gen.out.W"].grad).max() > 0


def test_generator_descends_against_frozen_critic():
    """Trainable logits pushed through the ST path lower the critic-based loss."""
    _, d = make(7)
    d.score_ids(BATCH)
    b, L = 4, 4
    rng = np.random.default_rng(7)
    logits = T.ParamStore()
    for t in range(L):
        logits.add(f"l{t}", rng.normal(size=(b, V)))
    noise = [sample_gumbel((b, V), rng) for _ in range(L)]
    mask = np.ones((b, L), dtype=bool)

    def loss_fn(hard=True):
        vals = []
        for t in range(L):
            s = straight_through_logp(T.log_softmax(logits[f"l{t}"]), 0.1, noise=noise[t], select="gumbel")
            vals.append(s.value if hard else s.relaxed)
        return wgan_g_loss(d.score(*d.embed_onehots(vals, mask), train=False))

    start = loss_fn().item()
    for _ in range(20):
        with T.Tape() as tape:
            tape.backward(loss_fn())
        T.rmsprop_step(logits, lr=0.5)
    assert loss_fn().item() < start


def test_clip_bounds_owned_only():
    g, d = make(8)
    g.E.data[0, 0] = 3.0
    d.params["disc.W3"].data[0, 0] = -2.0
    d.clip(0.1)
    assert d.max_abs_owned() <= 0.1
    assert g.E.data[0, 0] == 3.0


def test_lipschitz_sanity_on_fixtures(restaurant_csv):
    from advnlg.corpus import build_vocab

    pairs = [delexicalize(mr, refs[0]) for mr, refs in load_corpus(restaurant_csv)]
    vocab = build_vocab(pairs)
    g = Generator(len(vocab), d_emb=8, d_h=8, rng=np.random.default_rng(0))
    d = Discriminator(g.E, d_h=8, rng=np.random.default_rng(1))
    d.clip(0.1)
    seqs = [vocab.encode(p.target_tokens) for p in pairs]
    d.score_ids(seqs)
    s = d.score_ids(seqs, train=False).data
    spread = float(s.max() - s.min())
    assert np.isfinite(spread)
    # Regression bound: clipped critic output spread on the fixtures is small.
    assert spread < 1.0
