import json

import numpy as np
import pytest

from privtrain import he, session, train, transport
from privtrain.train import (
    FixTensor,
    FixedPointOverflowError,
    LayerSpec,
    ModelSpec,
    PlainEngine,
    Trainer,
    TrainingDivergedError,
)


def run_secure(spec, qx, labels, protocol, he_params, epochs=1, scheme="correlated", seed=5):
    box = {}

    def client(end):
        sess = session.SecureSession(end, he_params, he.BACKEND_CLEAR, protocol, seed=seed)
        sess.setup(keygen_seed=2)
        engine = train.SecureEngine(sess, he_params.plain_ring, spec.bits, scheme)
        trainer = Trainer(spec, engine)
        rows = train.train_loop(trainer, qx, labels, epochs=epochs, offline_chunk=8)
        rep = sess.finish()
        box["trainer"] = trainer
        box["engine"] = engine
        return rows, rep

    def server(end):
        session.serve_session(end, he_params, he.BACKEND_CLEAR)

    ce, se = transport.inproc_pair(timeout=300)
    (rows, rep), _ = transport.run_pair(client, server, ce, se)
    return rows, rep, box["trainer"], box["engine"]


class TestFixedPoint:
    def test_fixtensor_roundtrip(self):
        t = FixTensor.from_float(np.array([0.5, -1.25, 3.0]), 12, 32)
        assert np.allclose(t.to_float(), [0.5, -1.25, 3.0])
        assert t.data.tolist() == [2048, -5120, 12288]

    def test_fixtensor_overflow(self):
        with pytest.raises(FixedPointOverflowError):
            FixTensor(np.array([1 << 31]), 12, 32)

    def test_truncation_is_floor(self):
        assert train.truncate(np.array([-5]), 1).tolist() == [-3]
        assert train.truncate(np.array([5]), 1).tolist() == [2]


class TestModelSpec:
    def test_json_roundtrip(self):
        spec = train.toy_model(seed=7, side=12, classes=4)
        again = ModelSpec.from_json(spec.to_json())
        assert again == spec

    def test_shape_chain_validated(self):
        layers = [LayerSpec("flatten"), LayerSpec("fc", in_dim=99, out_dim=2)]
        spec = ModelSpec(layers, (1, 4, 4))
        with pytest.raises(train.TrainError):
            Trainer(spec, PlainEngine())


class TestDatasets:
    def test_idx_roundtrip(self, tmp_path):
        images, labels = train.synth_dataset(10, seed=3, side=12)
        ipath, lpath = tmp_path / "imgs", tmp_path / "labs"
        train.write_idx_images(str(ipath), images)
        train.write_idx_labels(str(lpath), labels)
        assert np.array_equal(train.read_idx_images(str(ipath)), images)
        assert np.array_equal(train.read_idx_labels(str(lpath)), labels)

    def test_synth_deterministic(self):
        a = train.synth_dataset(5, seed=9)
        b = train.synth_dataset(5, seed=9)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_quantize_range(self):
        images, _ = train.synth_dataset(3, seed=0, side=8)
        q = train.quantize_images(images, 12)
        assert q.shape == (3, 1, 8, 8)
        assert q.max() <= 4096 and q.min() >= 0


class TestForward:
    def test_zero_weights_zero_preactivations(self):
        spec = train.toy_model(seed=0, side=8, classes=4)
        tr = Trainer(spec, PlainEngine())
        for p in tr.params:
            for k in p:
                p[k] = np.zeros_like(p[k])
        x = np.full((1, 8, 8), 1000, dtype=np.int64)
        logits, _ = tr.forward(x)
        assert np.all(logits == 0)

    def test_identity_conv_passthrough(self):
        layers = [LayerSpec("conv", in_ch=1, out_ch=1, kernel=1, pad=0)]
        spec = ModelSpec(layers, (1, 4, 4), scale=12)
        tr = Trainer(spec, PlainEngine())
        tr.params[0]["w"] = np.full((1, 1, 1, 1), 1 << 12, dtype=np.int64)  # 1.0
        x = np.arange(16, dtype=np.int64).reshape(1, 4, 4) * 7
        out, _ = tr.forward(x)
        assert np.array_equal(out, x)

    def test_maxpool_argmax_routing(self):
        layers = [LayerSpec("maxpool")]
        spec = ModelSpec(layers, (1, 2, 2))
        tr = Trainer(spec, PlainEngine())
        x = np.array([[[1, 9], [3, 7]]], dtype=np.int64)
        out, tape = tr.forward(x)
        assert out.ravel().tolist() == [9]
        g = tr.backward(tape, np.array([[[5]]], dtype=np.int64))
        # gradient lands on the argmax cell only; nothing to update though
        assert g == {}


class TestBackward:
    def test_zero_output_gradient(self):
        spec = train.toy_model(seed=1, side=8, classes=4)
        tr = Trainer(spec, PlainEngine())
        x = train.quantize_images(train.synth_dataset(1, seed=0, side=8)[0], 12)[0]
        logits, tape = tr.forward(x)
        grads = tr.backward(tape, np.zeros_like(logits))
        for gs in grads.values():
            for g in gs.values():
                assert np.all(g == 0)

    def test_1x1_conv_weight_gradient_is_weighted_sum(self):
        layers = [LayerSpec("conv", in_ch=1, out_ch=1, kernel=1, pad=0)]
        spec = ModelSpec(layers, (1, 3, 3), scale=12)
        tr = Trainer(spec, PlainEngine())
        x = np.arange(9, dtype=np.int64).reshape(1, 3, 3) * 100
        _, tape = tr.forward(x)
        gy = np.arange(9, dtype=np.int64).reshape(1, 3, 3) * 3
        grads = tr.backward(tape, None) if False else None
        # drive backward manually with the conv as the last layer
        grads = {}
        sh = tr._shapes[0]["conv"]
        gw = train.truncate(tr.engine.conv_pairwise(x, gy, train.ConvShape(3, 3, 3, 0)), 12)
        expect = train.truncate(np.array([[(x * gy).sum()]]), 12)
        assert gw.ravel()[0] == expect.ravel()[0]

    @pytest.mark.parametrize(
        "layers,side,param_layer,indices",
        [
            (
                # 3x3 input, 3x3 kernel, no pad: each kernel-gradient entry is
                # a single product, so quantization noise stays sub-ULP
                [LayerSpec("conv", in_ch=1, out_ch=4, kernel=3, pad=0), LayerSpec("flatten")],
                3,
                0,
                [(0, 0, 1, 1), (2, 0, 0, 2), (3, 0, 2, 0)],
            ),
            (
                [LayerSpec("flatten"), LayerSpec("fc", in_dim=64, out_dim=16)],
                8,
                1,
                [(1, 7), (10, 30), (15, 0)],
            ),
        ],
    )
    def test_finite_difference_oracle(self, layers, side, param_layer, indices):
        """Per-entry gradients agree with central finite differences of the
        loss surface at the fixed-point weights to within 2 ULP (s = 12).

        The differences are taken on the dequantized surface: below one ULP
        the quantized loss is a staircase and difference quotients measure
        rounding, not slope.
        """
        spec = ModelSpec(layers, (1, side, side), seed=11, scale=12)
        tr = Trainer(spec, PlainEngine())
        rng = np.random.default_rng(5)
        x = rng.integers(0, 1 << 12, size=(1, side, side)).astype(np.int64)
        label = 2
        one = float(1 << 12)

        def smooth_loss(delta_at=None, delta=0.0) -> float:
            xf = x[0] / one
            conv_spec = spec.layers[0]
            if conv_spec.kind == "conv":
                w = tr.params[0]["w"].astype(np.float64) / one
                if delta_at is not None:
                    w = w.copy()
                    w[delta_at] += delta
                win = np.lib.stride_tricks.sliding_window_view(xf, (3, 3))
                z = np.einsum("uvab,oab->ouv", win, w[:, 0]).reshape(-1)
                z = z + np.repeat(tr.params[0]["b"] / one, z.size // conv_spec.out_ch)
            else:
                w = tr.params[1]["w"].astype(np.float64) / one
                if delta_at is not None:
                    w = w.copy()
                    w[delta_at] += delta
                z = w @ xf.reshape(-1) + tr.params[1]["b"] / one
            z = z - z.max()
            ez = np.exp(z)
            probs = ez / ez.sum()
            return -float(np.log(probs[label]))

        logits, tape = tr.forward(x)
        _, g = tr.loss_and_grad(logits, label)
        grads = tr.backward(tape, g)

        eps = 1.0 / one
        for idx in indices:
            up = smooth_loss(idx, eps)
            down = smooth_loss(idx, -eps)
            fd_fix = (up - down) / (2 * eps) * one
            got = grads[param_layer]["w"][idx]
            assert abs(got - fd_fix) <= 2.0, (idx, got, fd_fix)


class TestSgd:
    def test_lr_zero_keeps_model(self):
        spec = train.toy_model(seed=2, side=8, classes=4)
        tr = Trainer(spec, PlainEngine(), lr=0.0)
        before = [{k: v.copy() for k, v in p.items()} for p in tr.params]
        images, labels = train.synth_dataset(2, seed=1, side=8, classes=4)
        train.train_loop(tr, train.quantize_images(images, 12), labels, epochs=1)
        for b, a in zip(before, tr.params):
            for k in b:
                assert np.array_equal(b[k], a[k])

    def test_hand_computed_two_parameter_update(self):
        """fc(1 -> 2) with zero bias: every arithmetic step checked by hand."""
        layers = [LayerSpec("fc", in_dim=1, out_dim=2)]
        spec = ModelSpec(layers, (1, 1, 1), scale=12)
        # bypass shape chain: input (1,) vector after manual flatten
        spec = ModelSpec([LayerSpec("flatten"), LayerSpec("fc", in_dim=1, out_dim=2)], (1, 1, 1), scale=12)
        tr = Trainer(spec, PlainEngine(), lr=2.0**-6)
        w = np.array([[8192], [-4096]], dtype=np.int64)  # 2.0, -1.0
        tr.params[1]["w"] = w.copy()
        x = np.array([[[2048]]], dtype=np.int64)  # 0.5
        label = 0
        loss, pred = tr.train_step(x[0][None] if False else x, label)
        # forward: trunc(w*x) = [4096, -2048] (1.0, -0.5); softmax over z=[1,-0.5]
        z = np.array([1.0, -0.5])
        ez = np.exp(z - z.max()); probs = ez / ez.sum()
        g = np.rint((probs - np.array([1.0, 0.0])) * 4096).astype(np.int64)
        gw = (np.outer(g, np.array([2048])) >> 12)
        step = (gw * 64) >> 12  # lr_fix = 2^-6 * 2^12 = 64
        expect = w - step
        assert np.array_equal(tr.params[1]["w"], expect)
        assert loss == pytest.approx(-np.log(probs[0]))

    def test_divergence_aborts_with_report(self):
        spec = train.toy_model(seed=3, side=8, classes=4)
        tr = Trainer(spec, PlainEngine(), lr=2.0**18)  # absurd rate
        images, labels = train.synth_dataset(6, seed=2, side=8, classes=4)
        with pytest.raises(TrainingDivergedError) as e:
            train.train_loop(tr, train.quantize_images(images, 12), labels, epochs=1)
        assert "sample" in e.value.report


@pytest.fixture(scope="module")
def setup():
    spec = train.toy_model(seed=3, side=12, channels=1, conv1=2, conv2=3, classes=4)
    images, labels = train.synth_dataset(8, seed=9, classes=4, side=12)
    qx = train.quantize_images(images, spec.scale)
    ref = Trainer(spec, PlainEngine(spec.bits))
    rows = train.train_loop(ref, qx, labels, epochs=1)
    params = he.default_he_params(4096)
    return spec, qx, labels, ref, rows, params


class TestSecureEquivalence:
    def test_precompute_bit_identical(self, setup):
        spec, qx, labels, ref, rows_ref, params = setup
        rows, rep, tr, eng = run_secure(spec, qx, labels, session.PROTOCOL_PRECOMPUTE, params)
        assert rows[0]["losses"] == rows_ref[0]["losses"]
        for a, b in zip(ref.params, tr.params):
            for k in a:
                assert np.array_equal(a[k], b[k])
        assert "online:CCMul" not in rep["server_meter"]["counts"]
        assert eng.scheme_counts["baseline"] == 0

    def test_direct_protocol_bit_identical(self, setup):
        spec, qx, labels, ref, rows_ref, params = setup
        rows, rep, tr, _ = run_secure(spec, qx, labels, session.PROTOCOL_B, params)
        for a, b in zip(ref.params, tr.params):
            for k in a:
                assert np.array_equal(a[k], b[k])
        assert rep["server_meter"]["counts"].get("online:CCMul", 0) > 0

    def test_forward_activations_match(self, setup):
        spec, qx, labels, ref, rows_ref, params = setup
        fresh_ref = Trainer(spec, PlainEngine(spec.bits))
        logits_ref, _ = fresh_ref.forward(qx[0])

        def client(end):
            sess = session.SecureSession(end, params, he.BACKEND_CLEAR, "b", seed=5)
            sess.setup(keygen_seed=2)
            engine = train.SecureEngine(sess, params.plain_ring, spec.bits)
            trainer = Trainer(spec, engine)
            logits, _ = trainer.forward(qx[0])
            sess.finish()
            return logits

        ce, se = transport.inproc_pair(timeout=120)
        logits, _ = transport.run_pair(
            client, lambda end: session.serve_session(end, params, he.BACKEND_CLEAR), ce, se
        )
        assert np.array_equal(logits, logits_ref)


class TestBnLayer:
    def test_bn_model_trains_equally(self):
        spec = train.toy_model(seed=4, side=8, channels=1, conv1=2, conv2=2,
                               classes=4, with_bn=True)
        images, labels = train.synth_dataset(4, seed=5, classes=4, side=8)
        qx = train.quantize_images(images, spec.scale)
        ref = Trainer(spec, PlainEngine(spec.bits))
        rows_ref = train.train_loop(ref, qx, labels, epochs=1)
        params = he.default_he_params(4096)
        rows, rep, tr, _ = run_secure(spec, qx, labels, session.PROTOCOL_PRECOMPUTE, params)
        assert rows[0]["losses"] == rows_ref[0]["losses"]
        for a, b in zip(ref.params, tr.params):
            for k in a:
                assert np.array_equal(a[k], b[k])
