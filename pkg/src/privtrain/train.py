"""Fixed-point CNN training with a swappable compute engine.

The trainer owns every scale/truncation decision, weight update, and the
client-side plaintext steps (bias, softmax, gradient routing); an engine
supplies the six primitives that the protocols cover (two convolution
entry points, matvec, outer product, channel scaling, ReLU, window max).
`PlainEngine` computes them locally on integers; `SecureEngine` drives
the two-party session.  With equal seeds the two paths are bit-identical:
the protocols compute exact ring arithmetic and everything else is shared
code.

Numbers are plain int64 arrays carrying `scale` fractional bits within an
`bits`-bit two's-complement budget; overflow raises instead of wrapping.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import time

import numpy as np

from . import linprot, packing
from .packing import ConvShape
from .ring import RingParams
from .session import SecureSession


class TrainError(Exception):
    pass


class FixedPointOverflowError(TrainError):
    pass


class TrainingDivergedError(TrainError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report or {}


# --------------------------------------------------------------------------
# fixed-point tensors
# --------------------------------------------------------------------------


@dataclasses.dataclass
class FixTensor:
    """Integer tensor at `scale` fractional bits inside a `bits` budget."""

    data: np.ndarray
    scale: int
    bits: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int64)
        check_range(self.data, self.bits)

    @staticmethod
    def from_float(values: np.ndarray, scale: int, bits: int) -> "FixTensor":
        return FixTensor(np.rint(np.asarray(values, dtype=np.float64) * (1 << scale)).astype(np.int64), scale, bits)

    def to_float(self) -> np.ndarray:
        return self.data.astype(np.float64) / (1 << self.scale)


def check_range(arr: np.ndarray, bits: int) -> np.ndarray:
    lim = 1 << (bits - 1)
    if arr.size and (arr.max(initial=0) >= lim or arr.min(initial=0) < -lim):
        raise FixedPointOverflowError(
            f"value magnitude {max(abs(int(arr.max(initial=0))), abs(int(arr.min(initial=0))))} "
            f"breaches the {bits}-bit budget"
        )
    return arr


def truncate(arr: np.ndarray, scale: int) -> np.ndarray:
    """Arithmetic right shift (floor) back to `scale` fewer fractional bits."""
    return np.right_shift(np.asarray(arr, dtype=np.int64), scale)


# --------------------------------------------------------------------------
# model specification
# --------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | relu | maxpool | flatten | fc | bn
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    pad: int = 0
    in_dim: int = 0
    out_dim: int = 0
    channels: int = 0


@dataclasses.dataclass
class ModelSpec:
    layers: list[LayerSpec]
    input_shape: tuple[int, int, int]  # (channels, height, width)
    seed: int = 0
    bits: int = 32
    scale: int = 12

    def to_json(self) -> str:
        return json.dumps(
            {
                "layers": [dataclasses.asdict(l) for l in self.layers],
                "input_shape": list(self.input_shape),
                "seed": self.seed,
                "bits": self.bits,
                "scale": self.scale,
            },
            indent=2,
        )

    @staticmethod
    def from_json(text: str) -> "ModelSpec":
        raw = json.loads(text)
        return ModelSpec(
            layers=[LayerSpec(**l) for l in raw["layers"]],
            input_shape=tuple(raw["input_shape"]),
            seed=raw.get("seed", 0),
            bits=raw.get("bits", 32),
            scale=raw.get("scale", 12),
        )


def toy_model(seed: int = 0, side: int = 28, channels: int = 1,
              conv1: int = 2, conv2: int = 4, classes: int = 10,
              with_bn: bool = False, bits: int = 32, scale: int = 12) -> ModelSpec:
    """Two-conv network: conv-relu-pool twice, then one linear readout."""
    layers = [LayerSpec("conv", in_ch=channels, out_ch=conv1, kernel=3, pad=1)]
    if with_bn:
        layers.append(LayerSpec("bn", channels=conv1))
    layers += [LayerSpec("relu"), LayerSpec("maxpool")]
    layers += [LayerSpec("conv", in_ch=conv1, out_ch=conv2, kernel=3, pad=1),
               LayerSpec("relu"), LayerSpec("maxpool"), LayerSpec("flatten")]
    feat = conv2 * (side // 4) * (side // 4)
    layers.append(LayerSpec("fc", in_dim=feat, out_dim=classes))
    return ModelSpec(layers, (channels, side, side), seed=seed, bits=bits, scale=scale)


def init_params(spec: ModelSpec) -> list[dict]:
    """Uniform fan-in init, quantized to the model scale."""
    rng = np.random.default_rng(spec.seed)
    params = []
    one = 1 << spec.scale
    for layer in spec.layers:
        if layer.kind == "conv":
            fan = layer.in_ch * layer.kernel * layer.kernel
            a = 1.0 / np.sqrt(fan)
            w = rng.uniform(-a, a, size=(layer.out_ch, layer.in_ch, layer.kernel, layer.kernel))
            params.append({
                "w": np.rint(w * one).astype(np.int64),
                "b": np.zeros(layer.out_ch, dtype=np.int64),
            })
        elif layer.kind == "fc":
            a = 1.0 / np.sqrt(layer.in_dim)
            w = rng.uniform(-a, a, size=(layer.out_dim, layer.in_dim))
            params.append({
                "w": np.rint(w * one).astype(np.int64),
                "b": np.zeros(layer.out_dim, dtype=np.int64),
            })
        elif layer.kind == "bn":
            params.append({
                "gamma": np.full(layer.channels, one, dtype=np.int64),
                "beta": np.zeros(layer.channels, dtype=np.int64),
            })
        else:
            params.append({})
    return params


# --------------------------------------------------------------------------
# engines
# --------------------------------------------------------------------------


class PlainEngine:
    """Local integer reference for the protocol-backed primitives."""

    name = "plain"

    def __init__(self, bits: int = 32):
        self.bits = bits

    def conv_forward(self, x: np.ndarray, w: np.ndarray, shape: ConvShape,
                     job_id: str = "conv") -> np.ndarray:
        """(cin, H, W) x (cout, cin, h, h) -> (cout, OH, OW) at doubled scale."""
        return _conv_int(x, w, shape.pad)

    def conv_pairwise(self, x: np.ndarray, gy: np.ndarray, shape: ConvShape,
                      job_id: str = "convgw") -> np.ndarray:
        """out[co, ci] = conv(x[ci], gy[co]) -> (cout, cin, h', h')."""
        cin = x.shape[0]
        outs = []
        for ci in range(cin):
            outs.append(_conv_int(x[ci : ci + 1], gy[:, None], shape.pad))
        return np.stack(outs, axis=1)

    def fc(self, w: np.ndarray, x: np.ndarray, job_id: str = "fc") -> np.ndarray:
        return check_range(w.astype(np.int64) @ x.astype(np.int64), 2 * self.bits)

    def outer(self, g: np.ndarray, x: np.ndarray, job_id: str = "outer") -> np.ndarray:
        return check_range(np.outer(g.astype(np.int64), x.astype(np.int64)), 2 * self.bits)

    def affine(self, x: np.ndarray, gamma: int, job_id: str = "bn") -> np.ndarray:
        return check_range(x.astype(np.int64) * int(gamma), 2 * self.bits)

    def relu(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(x, 0)

    def maxpool4(self, windows: np.ndarray) -> np.ndarray:
        return windows.max(axis=0)


def _conv_int(x: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    cin, H, W = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((cin, H + 2 * pad, W + 2 * pad), dtype=np.int64)
    xp[:, pad : pad + H, pad : pad + W] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return np.einsum("cuvab,ocab->ouv", win, w.astype(np.int64))


class SecureEngine:
    """Primitives served by the two-party protocol session."""

    name = "secure"

    def __init__(self, session: SecureSession, plain_ring: RingParams,
                 bits: int = 32, scheme: str = packing.SCHEME_CORRELATED):
        self.session = session
        self.ring = plain_ring
        self.bits = bits
        self.scheme = scheme
        self.scheme_counts = {packing.SCHEME_CORRELATED: 0, packing.SCHEME_BASELINE: 0}
        self._job_seq = 0
        if plain_ring.modulus <= (1 << (bits + 1)):
            raise TrainError("plain modulus too small for the fixed-point budget")

    def _jid(self, stem: str) -> str:
        return stem

    def _run(self, job: linprot.LinearJob) -> np.ndarray:
        out = self.session.linear(job)
        signed = packing.to_signed_matrix(np.asarray(out), self.ring.modulus)
        return check_range(signed.astype(np.int64), 2 * self.bits)

    def conv_forward(self, x, w, shape: ConvShape, job_id: str = "conv") -> np.ndarray:
        self.scheme_counts[self.scheme] += 1
        job = linprot.conv_job(self._jid(job_id), x, w, shape, self.ring, self.scheme)
        return self._run(job)

    def conv_pairwise(self, x, gy, shape: ConvShape, job_id: str = "convgw") -> np.ndarray:
        self.scheme_counts[packing.SCHEME_CORRELATED] += 1
        job = linprot.conv_grad_w_job(self._jid(job_id), x, gy, shape, self.ring)
        return self._run(job)

    def fc(self, w, x, job_id: str = "fc") -> np.ndarray:
        job = linprot.fc_job(self._jid(job_id), x, w, self.ring)
        return self._run(job)

    def outer(self, g, x, job_id: str = "outer") -> np.ndarray:
        job = linprot.outer_job(self._jid(job_id), g, x, self.ring)
        return self._run(job)

    def affine(self, x, gamma: int, job_id: str = "bn") -> np.ndarray:
        job = linprot.affine_job(self._jid(job_id), x, int(gamma), self.ring)
        return self._run(job)

    def relu(self, x: np.ndarray) -> np.ndarray:
        from . import mpc

        flat = mpc.from_signed(x.ravel(), self.bits)
        out = self.session.nonlinear("relu", flat, self.bits)
        return mpc.to_signed(out, self.bits).reshape(x.shape)

    def maxpool4(self, windows: np.ndarray) -> np.ndarray:
        from . import mpc

        vals = mpc.from_signed(windows, self.bits)
        out = self.session.nonlinear("maxpool", vals, self.bits)
        return mpc.to_signed(out, self.bits)


# --------------------------------------------------------------------------
# trainer
# --------------------------------------------------------------------------


class Trainer:
    def __init__(self, spec: ModelSpec, engine, lr: float = 2.0**-6):
        self.spec = spec
        self.engine = engine
        self.bits = spec.bits
        self.scale = spec.scale
        self.lr_fix = int(round(lr * (1 << spec.scale)))
        self.params = init_params(spec)
        self._shapes = self._infer_shapes()

    def _infer_shapes(self):
        shapes = []
        c, h, w = self.spec.input_shape
        for layer in self.spec.layers:
            if layer.kind == "conv":
                sh = ConvShape(h, w, layer.kernel, layer.pad)
                shapes.append({"conv": sh, "in": (c, h, w)})
                c, h, w = layer.out_ch, sh.out_height, sh.out_width
            elif layer.kind == "maxpool":
                shapes.append({"in": (c, h, w)})
                h, w = h // 2, w // 2
            elif layer.kind == "flatten":
                shapes.append({"in": (c, h, w)})
                c, h, w = c * h * w, 1, 1
            elif layer.kind == "fc":
                if layer.in_dim != c:
                    raise TrainError(f"fc expects {c} inputs, spec says {layer.in_dim}")
                shapes.append({"in": (c,)})
                c = layer.out_dim
            else:
                shapes.append({"in": (c, h, w)})
        return shapes

    # -- engine-routed helpers with job naming --------------------------------

    def _conv_fwd(self, i, x, w, sh):
        return self.engine.conv_forward(x, w, sh, job_id=f"layer{i}.fwd")

    def _conv_gw(self, i, x, gy, sh):
        return self.engine.conv_pairwise(x, gy, sh, job_id=f"layer{i}.gw")

    def _conv_gx(self, i, gy, wrot, sh):
        return self.engine.conv_forward(gy, wrot, sh, job_id=f"layer{i}.gx")

    def _fc(self, i, w, x, tag):
        return self.engine.fc(w, x, job_id=f"layer{i}.{tag}")

    def _outer(self, i, g, x):
        return self.engine.outer(g, x, job_id=f"layer{i}.gw")

    def _affine(self, i, x, gamma, tag):
        return self.engine.affine(x, gamma, job_id=f"layer{i}.{tag}")

    # -- forward ---------------------------------------------------------------

    def forward(self, x: np.ndarray, timeline: list | None = None):
        """x: (channels, H, W) int64 at the model scale. Returns (logits, tape).

        `timeline`, when given, collects per-layer wall seconds and channel
        bytes (secure engine only), for the layer-breakdown report.
        """
        act = check_range(np.asarray(x, dtype=np.int64), self.bits)
        tape = []
        for i, layer in enumerate(self.spec.layers):
            t_start = time.perf_counter()
            b_start = (
                self.engine.session.end.stats.total()
                if isinstance(self.engine, SecureEngine)
                else 0
            )
            rec = {"layer": layer, "x": act}
            if layer.kind == "conv":
                sh = self._shapes[i]["conv"]
                y2 = self._conv_fwd(i, act, self.params[i]["w"], sh)
                act = check_range(
                    truncate(y2, self.scale) + self.params[i]["b"][:, None, None], self.bits
                )
            elif layer.kind == "bn":
                act, rec_bn = self._bn_forward(i, act)
                rec.update(rec_bn)
            elif layer.kind == "relu":
                act = check_range(self.engine.relu(act), self.bits)
                rec["mask"] = (rec["x"] >= 0).astype(np.int64)
            elif layer.kind == "maxpool":
                c, h, w = act.shape
                wins = (
                    act.reshape(c, h // 2, 2, w // 2, 2)
                    .transpose(2, 4, 0, 1, 3)
                    .reshape(4, -1)
                )
                pooled = self.engine.maxpool4(wins)
                act = pooled.reshape(c, h // 2, w // 2)
                rec["argmax"] = np.argmax(wins, axis=0)
            elif layer.kind == "flatten":
                act = act.reshape(-1)
            elif layer.kind == "fc":
                y2 = self._fc(i, self.params[i]["w"], act, "fwd")
                act = check_range(truncate(y2, self.scale) + self.params[i]["b"], self.bits)
            else:
                raise TrainError(f"unknown layer kind {layer.kind!r}")
            tape.append(rec)
            if timeline is not None:
                b_end = (
                    self.engine.session.end.stats.total()
                    if isinstance(self.engine, SecureEngine)
                    else 0
                )
                timeline.append(
                    {
                        "index": i,
                        "kind": layer.kind,
                        "seconds": time.perf_counter() - t_start,
                        "bytes": b_end - b_start,
                    }
                )
        return act, tape

    def _bn_forward(self, i, x):
        """Client-side statistics; the protocol only sees the gamma multiply."""
        one = 1 << self.scale
        flat = x.reshape(x.shape[0], -1).astype(np.float64) / one
        mu = flat.mean(axis=1)
        sigma = np.sqrt(flat.var(axis=1) + 1e-5)
        mu_fix = np.rint(mu * one).astype(np.int64)
        inv_fix = np.rint((1.0 / sigma) * one).astype(np.int64)
        centered = x - mu_fix[:, None, None]
        xh = truncate(centered * inv_fix[:, None, None], self.scale)
        check_range(xh, self.bits)
        out = np.empty_like(xh)
        for c in range(x.shape[0]):
            y2 = self._affine(i, xh[c], int(self.params[i]["gamma"][c]), f"fwd.c{c}")
            out[c] = truncate(y2, self.scale)
        out = check_range(out + self.params[i]["beta"][:, None, None], self.bits)
        return out, {"xh": xh, "inv_fix": inv_fix}

    # -- loss --------------------------------------------------------------------

    def loss_and_grad(self, logits: np.ndarray, label: int):
        z = logits.astype(np.float64) / (1 << self.scale)
        z = z - z.max()
        ez = np.exp(z)
        probs = ez / ez.sum()
        loss = -float(np.log(max(probs[label], 1e-300)))
        if not np.isfinite(loss):
            raise TrainingDivergedError("loss is not finite")
        g = probs.copy()
        g[label] -= 1.0
        return loss, np.rint(g * (1 << self.scale)).astype(np.int64)

    # -- backward ----------------------------------------------------------------

    def backward(self, tape, glogits: np.ndarray):
        g = check_range(np.asarray(glogits, dtype=np.int64), self.bits)
        grads: dict[int, dict] = {}
        for i in range(len(self.spec.layers) - 1, -1, -1):
            layer = self.spec.layers[i]
            rec = tape[i]
            if layer.kind == "fc":
                x = rec["x"]
                gw = truncate(self._outer(i, g, x), self.scale)
                gb = g.copy()
                g = check_range(truncate(self._fc(i, self.params[i]["w"].T, g, "gx"), self.scale), self.bits)
                grads[i] = {"w": check_range(gw, self.bits), "b": gb}
            elif layer.kind == "flatten":
                g = g.reshape(rec["x"].shape)
            elif layer.kind == "maxpool":
                c, h, w = rec["x"].shape
                flatg = np.zeros((4, c * (h // 2) * (w // 2)), dtype=np.int64)
                cols = np.arange(flatg.shape[1])
                flatg[rec["argmax"], cols] = g.reshape(-1)
                g = (
                    flatg.reshape(2, 2, c, h // 2, w // 2)
                    .transpose(2, 3, 0, 4, 1)
                    .reshape(c, h, w)
                )
            elif layer.kind == "relu":
                g = g * rec["mask"]
            elif layer.kind == "bn":
                g, gbn = self._bn_backward(i, rec, g)
                grads[i] = gbn
            elif layer.kind == "conv":
                sh = self._shapes[i]["conv"]
                x = rec["x"]
                w = self.params[i]["w"]
                gy = g
                gb = gy.sum(axis=(1, 2))
                gw_shape = ConvShape(sh.height, sh.width, sh.out_height, sh.pad)
                gw = truncate(self._conv_gw(i, x, gy, gw_shape), self.scale)
                if i > 0:
                    wrot = np.flip(w, axis=(2, 3)).transpose(1, 0, 2, 3).copy()
                    gx_shape = ConvShape(
                        sh.out_height, sh.out_width, sh.kernel, sh.kernel - 1 - sh.pad
                    )
                    g = check_range(
                        truncate(self._conv_gx(i, gy, wrot, gx_shape), self.scale), self.bits
                    )
                grads[i] = {"w": check_range(gw, self.bits), "b": check_range(gb, self.bits)}
        return grads

    def _bn_backward(self, i, rec, g):
        gamma = self.params[i]["gamma"]
        xh = rec["xh"]
        inv_fix = rec["inv_fix"]
        gbeta = g.sum(axis=(1, 2))
        ggamma = truncate((g * xh).sum(axis=(1, 2)), self.scale)
        gxh = np.empty_like(g)
        for c in range(g.shape[0]):
            gxh[c] = truncate(self._affine(i, g[c], int(gamma[c]), f"bwd.c{c}"), self.scale)
        gx = truncate(gxh * inv_fix[:, None, None], self.scale)
        return check_range(gx, self.bits), {
            "gamma": check_range(ggamma, self.bits),
            "beta": check_range(gbeta, self.bits),
        }

    # -- update ------------------------------------------------------------------

    def sgd_step(self, grads: dict):
        for i, gs in grads.items():
            for key, gval in gs.items():
                step = truncate(gval.astype(np.int64) * self.lr_fix, self.scale)
                self.params[i][key] = check_range(self.params[i][key] - step, self.bits)

    # -- loops --------------------------------------------------------------------

    def train_step(self, x: np.ndarray, label: int):
        logits, tape = self.forward(x)
        loss, g = self.loss_and_grad(logits, label)
        grads = self.backward(tape, g)
        self.sgd_step(grads)
        pred = int(np.argmax(logits))
        return loss, pred

    def train_epoch(self, images: np.ndarray, labels: np.ndarray):
        losses = []
        correct = 0
        t0 = time.perf_counter()
        for idx in range(len(images)):
            try:
                loss, pred = self.train_step(images[idx], int(labels[idx]))
            except FixedPointOverflowError as e:
                raise TrainingDivergedError(
                    f"aborted at sample {idx}: {e}",
                    report={"sample": idx, "losses": losses},
                ) from e
            losses.append(loss)
            correct += pred == labels[idx]
        return {
            "losses": losses,
            "loss": float(np.mean(losses)),
            "accuracy": correct / len(images),
            "seconds": time.perf_counter() - t0,
        }


def train_loop(trainer: Trainer, images, labels, epochs: int = 1,
               offline_chunk: int = 25):
    """Epoch loop; under the precompute protocol the pool is topped up in
    input-independent chunks ahead of the online steps."""
    rows = []
    secure = isinstance(trainer.engine, SecureEngine)
    pre = secure and trainer.engine.session.protocol == "precompute"
    shapes = collect_job_shapes(trainer) if pre else []
    chunk = offline_chunk if pre else max(1, len(images))
    for epoch in range(epochs):
        losses: list[float] = []
        correct = 0
        t0 = time.perf_counter()
        for start in range(0, len(images), chunk):
            stop = min(start + chunk, len(images))
            if pre:
                trainer.engine.session.ensure_offline(shapes, stop - start)
            for idx in range(start, stop):
                try:
                    loss, pred = trainer.train_step(images[idx], int(labels[idx]))
                except FixedPointOverflowError as e:
                    raise TrainingDivergedError(
                        f"aborted at sample {idx}: {e}",
                        report={"sample": idx, "losses": losses},
                    ) from e
                losses.append(loss)
                correct += pred == labels[idx]
        row = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "accuracy": correct / len(images),
            "online_seconds": trainer.engine.session.online_seconds if secure else time.perf_counter() - t0,
            "offline_seconds": trainer.engine.session.offline_seconds if secure else 0.0,
            "bytes_online": 0,
            "bytes_offline": 0,
            "losses": losses,
        }
        if secure:
            rep = trainer.engine.session.end.stats.report()
            row["bytes_online"] = (
                rep["bytes_by_phase"]["online"] + rep["bytes_by_phase"]["nonlinear"]
            )
            row["bytes_offline"] = rep["bytes_by_phase"]["offline"]
        rows.append(row)
    return rows


def collect_job_shapes(trainer: Trainer) -> list[linprot.JobShape]:
    """Dry-run one step on a zero sample to learn the job structures a step
    consumes; they depend only on the model geometry."""
    probe = Trainer(trainer.spec, _ShapeProbeEngine(trainer.bits))
    probe.params = [dict(p) for p in trainer.params]
    x = np.zeros(trainer.spec.input_shape, dtype=np.int64)
    logits, tape = probe.forward(x)
    _, g = probe.loss_and_grad(logits, 0)
    probe.backward(tape, g)
    ring_params = trainer.engine.ring
    return [builder(ring_params).shape for _, builder in probe.engine.jobs]


class _ShapeProbeEngine(PlainEngine):
    """Plain engine that also records the job structure of every linear op."""

    def __init__(self, bits):
        super().__init__(bits)
        self.jobs: list[tuple[str, object]] = []

    def conv_forward(self, x, w, shape, job_id="conv"):
        x0, w0 = np.array(x), np.array(w)
        if w0.ndim == 3:
            w0 = w0[None]
        self.jobs.append(
            (job_id, lambda rp, x0=x0, w0=w0, shape=shape, jid=job_id: linprot.conv_job(jid, x0, w0, shape, rp))
        )
        return super().conv_forward(x, w, shape)

    def conv_pairwise(self, x, gy, shape, job_id="convgw"):
        x0, g0 = np.array(x), np.array(gy)
        self.jobs.append(
            (job_id, lambda rp, x0=x0, g0=g0, shape=shape, jid=job_id: linprot.conv_grad_w_job(jid, x0, g0, shape, rp))
        )
        return super().conv_pairwise(x, gy, shape)

    def fc(self, w, x, job_id="fc"):
        w0, x0 = np.array(w), np.array(x)
        self.jobs.append((job_id, lambda rp, w0=w0, x0=x0, jid=job_id: linprot.fc_job(jid, x0, w0, rp)))
        return super().fc(w, x)

    def outer(self, g, x, job_id="outer"):
        g0, x0 = np.array(g), np.array(x)
        self.jobs.append((job_id, lambda rp, g0=g0, x0=x0, jid=job_id: linprot.outer_job(jid, g0, x0, rp)))
        return super().outer(g, x)

    def affine(self, x, gamma, job_id="bn"):
        x0 = np.array(x)
        self.jobs.append((job_id, lambda rp, x0=x0, gamma=gamma, jid=job_id: linprot.affine_job(jid, x0, gamma, rp)))
        return super().affine(x, gamma)


# --------------------------------------------------------------------------
# datasets: IDX files and a synthetic generator
# --------------------------------------------------------------------------


def write_idx_images(path: str, images: np.ndarray):
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 2051, n, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path: str, labels: np.ndarray):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(labels.tobytes())


def read_idx_images(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        magic, n, rows, cols = struct.unpack(">IIII", f.read(16))
        if magic != 2051:
            raise TrainError(f"{path} is not an IDX image file")
        return np.frombuffer(f.read(), dtype=np.uint8).reshape(n, rows, cols)


def read_idx_labels(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        magic, n = struct.unpack(">II", f.read(8))
        if magic != 2049:
            raise TrainError(f"{path} is not an IDX label file")
        return np.frombuffer(f.read(), dtype=np.uint8)


def synth_dataset(n_samples: int, seed: int = 0, classes: int = 10, side: int = 28):
    """Class-templated noisy images in the MNIST layout (uint8, labels)."""
    rng = np.random.default_rng(seed)
    templates = []
    for c in range(classes):
        t_rng = np.random.default_rng(10_000 + c)
        t = (t_rng.random((side, side)) < 0.25).astype(np.float64)
        templates.append(t)
    labels = rng.integers(0, classes, size=n_samples).astype(np.uint8)
    images = np.empty((n_samples, side, side), dtype=np.uint8)
    for i, lab in enumerate(labels):
        img = templates[lab] * 170 + rng.normal(0, 25, size=(side, side))
        images[i] = np.clip(img, 0, 255).astype(np.uint8)
    return images, labels


def quantize_images(images: np.ndarray, scale: int) -> np.ndarray:
    """uint8 pixels -> fixed-point [0, 1] at the model scale, channel-first."""
    arr = np.asarray(images, dtype=np.float64) / 255.0
    q = np.rint(arr * (1 << scale)).astype(np.int64)
    if q.ndim == 3:
        q = q[:, None]
    return q


def write_metrics_csv(path: str, rows: list[dict]):
    import csv

    cols = ["epoch", "loss", "accuracy", "online_seconds", "offline_seconds",
            "bytes_online", "bytes_offline"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow(row)
