import numpy as np
import pytest

from movla import acttok
from movla.acttok import (
    ActDecodeError,
    ActTokConfig,
    ActionTokenizer,
    bpe_apply,
    bpe_expand,
    bpe_train,
    dct_forward,
    dct_inverse,
    dequantize_coeffs,
    quantize_coeffs,
    reconstruction_bound,
    train_action_tokenizer,
)


def brute_force_dct2(x):
    """Definitional orthonormal DCT-II: c_k = s_k * sum_n x_n cos(pi (2n+1) k / 2N)."""
    n = len(x)
    out = np.zeros(n)
    for k in range(n):
        s = np.sqrt(1.0 / n) if k == 0 else np.sqrt(2.0 / n)
        out[k] = s * sum(x[m] * np.cos(np.pi * (2 * m + 1) * k / (2 * n)) for m in range(n))
    return out


class TestDct:
    def test_constant_vector_dc_only(self):
        c = dct_forward(np.full(8, 3.25))
        assert c[0] == pytest.approx(3.25 * np.sqrt(8), abs=1e-12)
        assert np.max(np.abs(c[1:])) < 1e-9

    def test_round_trip_orthonormality(self):
        rng = np.random.default_rng(0)
        for n in (1, 2, 4, 8, 10, 25):
            x = rng.normal(size=n)
            assert np.max(np.abs(dct_inverse(dct_forward(x)) - x)) < 1e-9

    def test_impulse_against_brute_force(self):
        x = np.zeros(4)
        x[0] = 1.0
        assert dct_forward(x) == pytest.approx(brute_force_dct2(x), abs=1e-12)

    def test_random_against_brute_force(self):
        rng = np.random.default_rng(1)
        for n in (3, 5, 8):
            x = rng.normal(size=n)
            assert dct_forward(x) == pytest.approx(brute_force_dct2(x), abs=1e-10)


class TestQuantization:
    def test_zeros(self):
        cfg = ActTokConfig()
        assert np.all(quantize_coeffs(np.zeros(5), cfg) == 0)

    def test_half_rounds_away_from_zero(self):
        cfg = ActTokConfig(quant_scale=0.1)
        assert quantize_coeffs(np.array([0.05]), cfg)[0] == 1
        assert quantize_coeffs(np.array([-0.05]), cfg)[0] == -1

    def test_pre_clamp_bound(self):
        cfg = ActTokConfig(quant_scale=0.02)
        rng = np.random.default_rng(2)
        c = rng.uniform(-4, 4, size=1000)  # in-range for bound 250 * 0.02 = 5
        err = np.abs(dequantize_coeffs(quantize_coeffs(c, cfg), cfg) - c)
        assert np.max(err) <= cfg.quant_scale / 2 + 1e-12

    def test_clamping_applies(self):
        cfg = ActTokConfig(quant_scale=0.02, base_bound=10, bpe_vocab_size=32)
        assert quantize_coeffs(np.array([100.0]), cfg)[0] == 10


class TestBpe:
    def test_repeated_symbol_merges_per_rule(self):
        # greedy-merge oracle by hand: (1,1) occurs 3 times -> merge; afterwards the
        # corpus is [[m,m]] and (m,m) occurs once, below the >=2 threshold -> stop.
        merges = bpe_train([[1, 1, 1, 1]], n_base=4, vocab_size=8)
        assert merges == [(1, 1)]

    def test_two_level_merge_when_frequency_allows(self):
        merges = bpe_train([[1, 1, 1, 1], [1, 1, 1, 1]], n_base=4, vocab_size=6)
        assert merges == [(1, 1), (4, 4)]

    def test_all_distinct_no_merges(self):
        assert bpe_train([[0, 1, 2, 3]], n_base=4, vocab_size=10) == []

    def test_retrain_deterministic(self):
        rng = np.random.default_rng(3)
        corpus = [list(rng.integers(0, 6, size=12)) for _ in range(30)]
        a = bpe_train([list(s) for s in corpus], 6, 20)
        b = bpe_train([list(s) for s in corpus], 6, 20)
        assert a == b

    def test_tie_break_smallest_pair(self):
        merges = bpe_train([[5, 4, 5, 4], [2, 3, 2, 3]], n_base=6, vocab_size=7)
        assert merges == [(2, 3)]

    def test_vocab_cap_respected(self):
        corpus = [[0, 0, 0, 0, 1, 1, 1, 1] * 4 for _ in range(4)]
        merges = bpe_train(corpus, 2, 5)
        assert len(merges) == 3

    def test_unmerge_inverts_merge_exactly(self):
        rng = np.random.default_rng(4)
        corpus = [list(rng.integers(0, 5, size=16)) for _ in range(40)]
        merges = bpe_train([list(s) for s in corpus], 5, 30)
        for _ in range(100):
            s = list(rng.integers(0, 5, size=int(rng.integers(1, 20))))
            assert bpe_expand(bpe_apply(s, merges, 5), merges, 5) == s

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            bpe_train([], 4, 8)


def random_chunks(cfg, n, seed):
    rng = np.random.default_rng(seed)
    scales = np.asarray(cfg.dim_scales)
    return [rng.uniform(-1, 1, size=(cfg.l_a, cfg.action_dim)) * scales for _ in range(n)]


@pytest.fixture(scope="module")
def trained():
    cfg = ActTokConfig(l_a=4)
    chunks = random_chunks(cfg, 200, seed=5)
    chunks.append(np.zeros((cfg.l_a, cfg.action_dim)))
    return train_action_tokenizer(chunks, cfg)


class TestActionTokenizer:

    def test_round_trip_within_analytic_bound(self, trained):
        bound = reconstruction_bound(trained.cfg)
        for chunk in random_chunks(trained.cfg, 1000, seed=6):
            out = trained.decode(trained.encode(chunk))
            assert np.all(np.abs(out - chunk) <= bound + 1e-9)

    def test_identical_chunks_identical_tokens(self, trained):
        c = random_chunks(trained.cfg, 1, seed=7)[0]
        assert trained.encode(c) == trained.encode(c.copy())

    def test_zero_chunk_compresses_maximally(self, trained):
        corpus = random_chunks(trained.cfg, 100, seed=8)
        zero_len = len(trained.encode(np.zeros((trained.cfg.l_a, trained.cfg.action_dim))))
        other = [len(trained.encode(c)) for c in corpus]
        assert zero_len <= min(other)

    def test_truncated_stream_raises(self, trained):
        ids = trained.encode(random_chunks(trained.cfg, 1, seed=9)[0])
        with pytest.raises(ActDecodeError):
            trained.decode(ids[:-1])

    def test_garbage_token_raises(self, trained):
        with pytest.raises(ActDecodeError):
            trained.decode([trained.vocab_size + 5])

    def test_shape_mismatch_rejected(self, trained):
        with pytest.raises(ValueError):
            trained.encode(np.zeros((trained.cfg.l_a + 1, trained.cfg.action_dim)))

    def test_save_load_round_trip(self, trained, tmp_path):
        trained.save(tmp_path / "tok.mvc")
        loaded = ActionTokenizer.load(tmp_path / "tok.mvc")
        assert loaded.cfg == trained.cfg
        assert loaded.merges == trained.merges
        c = random_chunks(trained.cfg, 1, seed=10)[0]
        assert loaded.encode(c) == trained.encode(c)

    def test_bound_invariant_holds_at_sweep_lengths(self):
        for l_a in (1, 5, 10, 25):
            cfg = ActTokConfig(l_a=l_a)
            chunks = random_chunks(cfg, 50, seed=11)
            tok = train_action_tokenizer(chunks, cfg)
            bound = reconstruction_bound(cfg)
            for chunk in random_chunks(cfg, 50, seed=12):
                out = tok.decode(tok.encode(chunk))
                assert np.all(np.abs(out - chunk) <= bound + 1e-9)

    def test_vocab_invariant_enforced(self):
        with pytest.raises(ValueError):
            ActTokConfig(base_bound=300, bpe_vocab_size=512)
