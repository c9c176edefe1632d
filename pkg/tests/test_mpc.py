import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as scipy_stats

from privtrain import mpc, transport
from privtrain.mpc import Share


def pair(seed=0, capture=False):
    return transport.inproc_pair(dealer_seed=seed, capture=capture)


def run(client_fn, server_fn, seed=0, capture=False):
    c, s = pair(seed, capture)
    out = transport.run_pair(client_fn, server_fn, c, s)
    return out, c


class TestSharing:
    def test_spec_example_reconstruct(self):
        s0 = Share(np.array([200], dtype=np.uint64), 0, 8)
        s1 = Share(np.array([63], dtype=np.uint64), 1, 8)
        assert mpc.reconstruct(s0, s1)[0] == 7

    def test_zero_shares_sum_to_zero(self, rng):
        s0, s1 = mpc.share(np.zeros(16, dtype=np.uint64), rng, 16)
        assert np.all(mpc.reconstruct(s0, s1) == 0)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(8, 64), st.integers(0, 2**20))
    def test_roundtrip_property(self, x, bits, seed):
        x = x % (1 << bits)
        rng = np.random.default_rng(seed)
        s0, s1 = mpc.share(np.array([x], dtype=np.uint64), rng, bits)
        assert int(mpc.reconstruct(s0, s1)[0]) == x

    def test_share_uniformity_chi2(self):
        rng = np.random.default_rng(99)
        x = np.full(10**5, 42, dtype=np.uint64)
        s0, _ = mpc.share(x, rng, 8)
        counts = np.bincount(s0.value.astype(np.int64), minlength=256)
        _, p = scipy_stats.chisquare(counts)
        assert p > 0.001

    def test_bitwidth_mismatch(self):
        a = Share(np.array([1], dtype=np.uint64), 0, 8)
        b = Share(np.array([1], dtype=np.uint64), 1, 16)
        with pytest.raises(mpc.BitwidthMismatchError):
            mpc.reconstruct(a, b)


class TestCot:
    def test_zero_choice_ignores_correlation(self):
        """i = 0 delivers r itself: the output is x-independent."""
        outs = []
        for corr in (5, 999):
            def client(end):
                return mpc.OtEndpoint(end, "receiver").cot_recv(
                    np.zeros(8, dtype=np.uint64), 16
                )

            def server(end, corr=corr):
                mpc.OtEndpoint(end, "sender").cot_send(
                    np.full(8, corr, dtype=np.uint64), 16
                )

            (out, _), _ = run(client, server, seed=7)
            outs.append(out)
        assert np.array_equal(outs[0], outs[1])

    def test_correlation_contract(self):
        def client(end):
            i = np.array([1], dtype=np.uint64)
            return mpc.OtEndpoint(end, "receiver").cot_recv(i, 8)

        def server(end):
            return mpc.OtEndpoint(end, "sender").cot_send(np.array([5], dtype=np.uint64), 8)

        (got, r), _ = run(client, server)
        assert (int(got[0]) - int(r[0])) % 256 == 5

    def test_exhaustive_contract_10k(self):
        n = 10_000
        rng = np.random.default_rng(3)
        i = rng.integers(0, 2, size=n).astype(np.uint64)
        x = rng.integers(0, 1 << 32, size=n, dtype=np.uint64)

        def client(end):
            return mpc.OtEndpoint(end, "receiver").cot_recv(i, 32)

        def server(end):
            return mpc.OtEndpoint(end, "sender").cot_send(x, 32)

        (got, r), _ = run(client, server, seed=11)
        mask = np.uint64((1 << 32) - 1)
        assert np.array_equal((got - r) & mask, (i * x) & mask)


class TestKot:
    def test_select_second_of_two(self):
        def client(end):
            return mpc.OtEndpoint(end, "receiver").kot_recv(np.array([1], dtype=np.uint64), 2, 16)

        def server(end):
            msgs = np.array([[111], [222]], dtype=np.uint64)
            mpc.OtEndpoint(end, "sender").kot_send(msgs, 16)

        (got, _), _ = run(client, server)
        assert got[0] == 222

    def test_equal_messages_choice_independent(self):
        outs = []
        for idx in (0, 7, 15):
            def client(end, idx=idx):
                return mpc.OtEndpoint(end, "receiver").kot_recv(
                    np.full(4, idx, dtype=np.uint64), 16, 12
                )

            def server(end):
                mpc.OtEndpoint(end, "sender").kot_send(
                    np.full((16, 4), 777, dtype=np.uint64), 12
                )

            (got, _), _ = run(client, server, seed=5)
            outs.append(got)
        assert all(np.array_equal(outs[0], o) for o in outs)

    def test_random_batch_matches_sender_array(self, rng):
        k, count = 16, 64
        msgs = rng.integers(0, 1 << 20, size=(k, count), dtype=np.uint64)
        idx = rng.integers(0, k, size=count).astype(np.uint64)

        def client(end):
            return mpc.OtEndpoint(end, "receiver").kot_recv(idx, k, 24)

        def server(end):
            mpc.OtEndpoint(end, "sender").kot_send(msgs, 24)

        (got, _), _ = run(client, server, seed=21)
        assert np.array_equal(got, msgs[idx.astype(np.int64), np.arange(count)])

    def test_index_out_of_range(self):
        c, _ = pair()
        with pytest.raises(mpc.MpcError):
            mpc.OtEndpoint(c, "receiver").kot_recv(np.array([16], dtype=np.uint64), 16, 8)

    def test_role_misuse(self):
        c, _ = pair()
        with pytest.raises(mpc.MpcError):
            mpc.OtEndpoint(c, "receiver").cot_send(np.zeros(1, dtype=np.uint64), 8)
        with pytest.raises(mpc.MpcError):
            mpc.OtEndpoint(c, "sender").kot_recv(np.zeros(1, dtype=np.uint64), 4, 8)


def run_nonlinear(op, vals, bits, seed=5):
    def c(end):
        return mpc.client_nonlinear(end, op, vals, bits, np.random.default_rng(seed))

    def s(end):
        mpc.server_nonlinear(end, op, bits, np.random.default_rng(seed + 1000))

    (out, _), cend = run(c, s, seed=seed * 31, capture=True)
    return out, cend


class TestNonlinear:
    def test_drelu_signs(self):
        vals = mpc.from_signed(np.array([5, -3]), 8)
        out, _ = run_nonlinear("drelu", vals, 8)
        assert out.tolist() == [1, 0]

    def test_drelu_exhaustive_8bit(self):
        vals = np.arange(256, dtype=np.uint64)
        out, _ = run_nonlinear("drelu", vals, 8)
        expect = (mpc.to_signed(vals, 8) >= 0).astype(np.uint64)
        assert np.array_equal(out, expect)

    def test_relu_exhaustive_8bit(self):
        vals = np.arange(256, dtype=np.uint64)
        out, _ = run_nonlinear("relu", vals, 8)
        expect = mpc.from_signed(np.maximum(mpc.to_signed(vals, 8), 0), 8)
        assert np.array_equal(out, expect)

    def test_relu_random_32bit(self):
        vals = np.random.default_rng(3).integers(0, 1 << 32, size=10_000, dtype=np.uint64)
        out, _ = run_nonlinear("relu", vals, 32)
        expect = mpc.from_signed(np.maximum(mpc.to_signed(vals, 32), 0), 32)
        assert np.array_equal(out, expect)

    def test_maxpool_examples(self):
        w = mpc.from_signed(np.array([[1], [9], [3], [7]]), 16)
        out, _ = run_nonlinear("maxpool", w, 16)
        assert int(out[0]) == 9
        wn = mpc.from_signed(np.array([[-5], [-9], [-3], [-7]]), 16)
        out, _ = run_nonlinear("maxpool", wn, 16)
        assert int(mpc.to_signed(out, 16)[0]) == -3

    def test_maxpool_random(self):
        sw = np.random.default_rng(4).integers(-(1 << 28), 1 << 28, size=(4, 2500))
        out, _ = run_nonlinear("maxpool", mpc.from_signed(sw, 32), 32)
        assert np.array_equal(out, mpc.from_signed(sw.max(axis=0), 32))


class TestStructuralSecurity:
    def test_nonselected_messages_not_delivered(self):
        """The receiver-side call returns exactly the selected message."""
        k, count = 16, 32
        msgs = np.arange(k * count, dtype=np.uint64).reshape(k, count)
        idx = np.random.default_rng(0).integers(0, k, size=count).astype(np.uint64)

        def client(end):
            return mpc.OtEndpoint(end, "receiver").kot_recv(idx, k, 16)

        def server(end):
            mpc.OtEndpoint(end, "sender").kot_send(msgs, 16)

        (got, _), _ = run(client, server, seed=2)
        assert got.shape == (count,)
        sel = msgs[idx.astype(np.int64), np.arange(count)] & np.uint64(0xFFFF)
        assert np.array_equal(got, sel)

    def test_transcript_hides_index_and_messages(self):
        """Raw message words and raw choice bits never hit the wire."""
        k, count = 16, 8
        rng = np.random.default_rng(8)
        msgs = rng.integers(1 << 40, 1 << 60, size=(k, count), dtype=np.uint64)
        idx = rng.integers(0, k, size=count).astype(np.uint64)

        def client(end):
            return mpc.OtEndpoint(end, "receiver").kot_recv(idx, k, 62)

        def server(end):
            mpc.OtEndpoint(end, "sender").kot_send(msgs, 62)

        (_, _), cend = run(client, server, seed=13, capture=True)
        blob = cend.stats.transcript_bytes()
        for m in msgs.ravel():
            assert int(m).to_bytes(8, "little") not in blob
        assert bytes(idx.astype(np.uint8).tobytes()) not in blob

    def test_comm_per_relu_element_documented(self):
        def measure(count, seed=11):
            vals = mpc.from_signed(
                np.random.default_rng(seed).integers(-(1 << 20), 1 << 20, size=count), 32
            )
            _, cend = run_nonlinear("relu", vals, 32, seed)
            return cend.stats.total()

        per = (measure(2048) - measure(1024)) / 1024
        assert per == mpc.relu_comm_bytes(32)
