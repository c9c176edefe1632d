"""Experiment harness.

Five commands, selected by --command:

* ``counts``    -- packing multiplication-count tables (toy case, input
                   sweep, kernel sweep) from the single source of truth,
                   `packing.count_report`.
* ``bench-he``  -- per-operation HE microbenchmarks (rlwe backend only).
* ``ablate``    -- the two linear protocols on the same toy model and seed:
                   online/offline wall time and bytes.
* ``breakdown`` -- per-layer forward latency and traffic for both protocols.
* ``train``     -- end-to-end fixed-point training (secure or plain engine),
                   metrics CSV per epoch.

Each command writes `<out>.csv` and, unless --no-plot is given, renders
`<out>.png` alongside.  The default run spawns both parties in-process;
socket mode (--host/--port plus --role) runs them as separate processes
with matching --seed and ring flags on both sides.
"""

from __future__ import annotations

import argparse
import csv
import json
import statistics
import sys
import time

import numpy as np

from . import figures, he, packing, ring, session, train, transport


def small_he_params(n: int, plain_bits: int = 17) -> he.HeParams:
    """Compact parameter set for quick protocol experiments."""
    plain = he.default_plain_params(n, prime_bits=plain_bits, primes=2)
    return he.HeParams(he.default_cipher_params(n, plain.modulus), plain)


def _write_csv(path: str, rows: list[dict]):
    if not rows:
        return
    cols = list(rows[0].keys())
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


# --------------------------------------------------------------------------
# counts
# --------------------------------------------------------------------------

TOY_BUDGET = 9  # degrees capped at 8
INPUT_SWEEP = (8, 16, 32, 64)
KERNEL_SWEEP = (3, 5, 7, 11, 15, 19, 23)


def _count_row(section: str, shape: packing.ConvShape, n: int) -> dict:
    rep = packing.count_report(shape, n, packing.SCHEME_CORRELATED)
    ratio = rep.mults_baseline / rep.mults_correlated if rep.mults_correlated else float("nan")
    return {
        "section": section,
        "height": shape.height,
        "width": shape.width,
        "kernel": shape.kernel,
        "pad": shape.pad,
        "n": n,
        "baseline_mults": rep.mults_baseline,
        "correlated_mults": rep.mults_correlated,
        "ratio": round(ratio, 3),
        "n1": rep.n1,
        "n2": rep.n2,
        "diff_formula": rep.n1_n2_diff_formula,
        "max_degree_correlated": rep.max_degree,
        "paper_objective": rep.paper_objective,
    }


def run_counts(n: int = 4096, ksweep_n: int = 8192) -> list[dict]:
    rows = [_count_row("toy", packing.ConvShape(2, 2, 2, 1), TOY_BUDGET)]
    for side in INPUT_SWEEP:
        shape = packing.ConvShape(side, side, 5, 4)
        rows.append(_count_row("input_sweep", shape, n))
    for k in KERNEL_SWEEP:
        try:
            shape = packing.ConvShape(64, 64, k, k - 1)
            rows.append(_count_row("kernel_sweep", shape, ksweep_n))
        except packing.InfeasibleWindowError:
            print(f"skipping infeasible kernel {k}", file=sys.stderr)
    return rows


# --------------------------------------------------------------------------
# bench-he
# --------------------------------------------------------------------------


def run_bench_he(n: int = 4096, trials: int = 100, seed: int = 0,
                 backend: str = he.BACKEND_RLWE) -> list[dict]:
    if backend != he.BACKEND_RLWE:
        raise SystemExit(
            "bench-he refuses the transparent backend: its timings say "
            "nothing about ciphertext costs (use --backend rlwe)"
        )
    params = he.default_he_params(n)
    evaluator = he.He(params, he.BACKEND_RLWE)
    keys = evaluator.keygen(seed)
    rng = np.random.default_rng(seed)
    payloads = [ring.RingElem.random(params.plain_ring, rng) for _ in range(4)]
    cts = [evaluator.encrypt(m, keys, rng) for m in payloads]
    raw3 = evaluator.cc_mul_raw(cts[0], cts[1])

    samples: dict[str, list[float]] = {op: [] for op in
                                       ("Enc", "Dec", "CPMul", "CCMul", "CCAdd", "PPMul", "Relin")}
    for t in range(trials):
        m = payloads[t % 4]
        c1, c2 = cts[t % 4], cts[(t + 1) % 4]
        t0 = time.perf_counter(); evaluator.encrypt(m, keys, rng)
        samples["Enc"].append(time.perf_counter() - t0)
        t0 = time.perf_counter(); evaluator.decrypt(c1, keys)
        samples["Dec"].append(time.perf_counter() - t0)
        t0 = time.perf_counter(); evaluator.cc_add(c1, c2)
        samples["CCAdd"].append(time.perf_counter() - t0)
        t0 = time.perf_counter(); evaluator.pp_mul(m, payloads[(t + 1) % 4])
        samples["PPMul"].append(time.perf_counter() - t0)
        t0 = time.perf_counter(); evaluator.cp_mul(c1, m)
        samples["CPMul"].append(time.perf_counter() - t0)
        t0 = time.perf_counter(); evaluator.relinearize(raw3, keys)
        samples["Relin"].append(time.perf_counter() - t0)
        t0 = time.perf_counter(); evaluator.cc_mul(c1, c2, keys)
        samples["CCMul"].append(time.perf_counter() - t0)

    rows = []
    for op, vals in samples.items():
        rows.append(
            {
                "op": op,
                "trials": trials,
                "median_ms": round(statistics.median(vals) * 1e3, 4),
                "mean_ms": round(statistics.fmean(vals) * 1e3, 4),
            }
        )
    ratio = statistics.median(samples["CCMul"]) / statistics.median(samples["CPMul"])
    rows.append({"op": "ccmul_over_cpmul", "trials": trials,
                 "median_ms": round(ratio, 3), "mean_ms": round(ratio, 3)})
    return rows


# --------------------------------------------------------------------------
# two-party plumbing
# --------------------------------------------------------------------------


def _network_model(args) -> transport.NetworkModel | None:
    if args.bandwidth_mbps or args.ping_ms:
        return transport.NetworkModel(args.bandwidth_mbps, args.ping_ms)
    return None


def _secure_run(client_fn, params: he.HeParams, backend: str, args):
    """Run `client_fn(end)` against a server, in-process or over sockets."""
    network = _network_model(args)
    if args.host and args.port:
        end = transport.socket_client_end(
            args.host, args.port, network=network, dealer_seed=args.seed
        )
        try:
            return client_fn(end)
        finally:
            end.close()
    ce, se = transport.inproc_pair(network=network, dealer_seed=args.seed, timeout=600.0)
    out, _ = transport.run_pair(
        client_fn, lambda end: session.serve_session(end, params, backend, seed=args.seed + 1000), ce, se
    )
    return out


def _serve_forever(params: he.HeParams, backend: str, args):
    end = transport.socket_server_end(
        args.host or "127.0.0.1", args.port, network=_network_model(args), dealer_seed=args.seed
    )
    try:
        session.serve_session(end, params, backend, seed=args.seed + 1000)
    finally:
        end.close()


# --------------------------------------------------------------------------
# ablate
# --------------------------------------------------------------------------


def _tiny_setup(args, side=8, classes=4, samples=4):
    spec = train.toy_model(seed=args.seed, side=side, channels=1, conv1=2, conv2=2,
                           classes=classes, bits=args.bitwidth, scale=args.scale)
    images, labels = train.synth_dataset(samples, seed=args.seed + 1, classes=classes, side=side)
    return spec, train.quantize_images(images, spec.scale), labels


def run_ablate(args) -> list[dict]:
    params = small_he_params(args.n)
    spec, qx, labels = _tiny_setup(args, samples=args.samples or 4)
    rows = []
    for protocol in (session.PROTOCOL_PRECOMPUTE, session.PROTOCOL_B):
        def client(end, protocol=protocol):
            sess = session.SecureSession(end, params, args.backend, protocol, seed=args.seed)
            sess.setup(keygen_seed=args.seed + 2)
            engine = train.SecureEngine(sess, params.plain_ring, spec.bits, args.scheme)
            trainer = train.Trainer(spec, engine)
            out_rows = train.train_loop(trainer, qx, labels, epochs=1,
                                        offline_chunk=len(qx))
            rep = sess.finish()
            return out_rows[0], rep
        row, rep = _secure_run(client, params, args.backend, args)
        rows.append(
            {
                "protocol": protocol,
                "online_seconds": round(row["online_seconds"], 4),
                "offline_seconds": round(row["offline_seconds"], 4),
                "bytes_online": row["bytes_online"],
                "bytes_offline": row["bytes_offline"],
                "loss": round(row["loss"], 5),
                "online_ccmul": rep["server_meter"]["counts"].get("online:CCMul", 0),
                "offline_ccmul": rep["server_meter"]["counts"].get("offline:CCMul", 0),
            }
        )
    return rows


# --------------------------------------------------------------------------
# breakdown
# --------------------------------------------------------------------------


def run_breakdown(args) -> list[dict]:
    params = small_he_params(args.n)
    side, classes = 8, 4
    layers = [
        train.LayerSpec("conv", in_ch=1, out_ch=2, kernel=3, pad=1),
        train.LayerSpec("bn", channels=2),
        train.LayerSpec("relu"),
        train.LayerSpec("maxpool"),
        train.LayerSpec("flatten"),
        train.LayerSpec("fc", in_dim=2 * (side // 2) * (side // 2), out_dim=classes),
    ]
    spec = train.ModelSpec(layers, (1, side, side), seed=args.seed,
                           bits=args.bitwidth, scale=args.scale)
    images, labels = train.synth_dataset(1, seed=args.seed + 1, classes=classes, side=side)
    qx = train.quantize_images(images, spec.scale)
    rows = []
    for protocol in (session.PROTOCOL_B, session.PROTOCOL_PRECOMPUTE):
        def client(end, protocol=protocol):
            sess = session.SecureSession(end, params, args.backend, protocol, seed=args.seed)
            sess.setup(keygen_seed=args.seed + 2)
            engine = train.SecureEngine(sess, params.plain_ring, spec.bits, args.scheme)
            trainer = train.Trainer(spec, engine)
            if protocol == session.PROTOCOL_PRECOMPUTE:
                sess.ensure_offline(train.collect_job_shapes(trainer), 1)
            timeline: list[dict] = []
            trainer.forward(qx[0], timeline=timeline)
            sess.finish()
            return timeline
        timeline = _secure_run(client, params, args.backend, args)
        for entry in timeline:
            rows.append(
                {
                    "protocol": protocol,
                    "layer": entry["index"],
                    "kind": entry["kind"],
                    "seconds": round(entry["seconds"], 5),
                    "bytes": entry["bytes"],
                }
            )
    return rows


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def run_train(args) -> tuple[list[dict], list[float]]:
    spec = train.toy_model(seed=args.seed, side=args.side, channels=1,
                           conv1=2, conv2=4, classes=args.classes,
                           bits=args.bitwidth, scale=args.scale)
    if args.data_dir:
        images = train.read_idx_images(f"{args.data_dir}/train-images-idx3-ubyte")
        labels = train.read_idx_labels(f"{args.data_dir}/train-labels-idx1-ubyte")
        images, labels = images[: args.samples], labels[: args.samples]
        if images.shape[1] != args.side:
            raise SystemExit(f"dataset side {images.shape[1]} != --side {args.side}")
        labels = np.minimum(labels, args.classes - 1)
    else:
        images, labels = train.synth_dataset(args.samples, seed=args.seed + 1,
                                             classes=args.classes, side=args.side)
    qx = train.quantize_images(images, spec.scale)

    if args.engine == "plain":
        trainer = train.Trainer(spec, train.PlainEngine(spec.bits))
        rows = train.train_loop(trainer, qx, labels, epochs=args.epochs)
        return rows, rows[-1]["losses"]

    params = he.default_he_params(args.n) if args.n >= 2048 else small_he_params(args.n)

    def client(end):
        sess = session.SecureSession(end, params, args.backend, args.protocol, seed=args.seed)
        sess.setup(keygen_seed=args.seed + 2)
        engine = train.SecureEngine(sess, params.plain_ring, spec.bits, args.scheme)
        trainer = train.Trainer(spec, engine)
        rows = train.train_loop(trainer, qx, labels, epochs=args.epochs,
                                offline_chunk=args.offline_chunk)
        rep = sess.finish()
        rows[-1]["simulated_seconds"] = rep["comm"]["simulated_seconds"]
        return rows

    rows = _secure_run(client, params, args.backend, args)
    return rows, rows[-1]["losses"]


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="privtrain", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--command", required=True,
                   choices=["counts", "bench-he", "ablate", "breakdown", "train"])
    p.add_argument("--scheme", default=packing.SCHEME_CORRELATED,
                   choices=[packing.SCHEME_BASELINE, packing.SCHEME_CORRELATED])
    p.add_argument("--protocol", default=session.PROTOCOL_PRECOMPUTE,
                   choices=[session.PROTOCOL_B, session.PROTOCOL_PRECOMPUTE])
    p.add_argument("--backend", default=None,
                   choices=[he.BACKEND_CLEAR, he.BACKEND_RLWE],
                   help="default: rlwe for bench-he, clear otherwise")
    p.add_argument("--n", type=int, default=4096, help="ring degree / degree budget")
    p.add_argument("--bitwidth", type=int, default=32)
    p.add_argument("--scale", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output stem (default: the command name)")
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--role", default="client", choices=["client", "server"])
    p.add_argument("--bandwidth-mbps", type=float, default=None)
    p.add_argument("--ping-ms", type=float, default=0.0)
    p.add_argument("--no-plot", action="store_true")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--side", type=int, default=28)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--engine", default="secure", choices=["secure", "plain"])
    p.add_argument("--data-dir", default=None, help="directory with IDX files")
    p.add_argument("--offline-chunk", type=int, default=10)
    p.add_argument("--ksweep-n", type=int, default=8192)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.backend is None:
        args.backend = he.BACKEND_RLWE if args.command == "bench-he" else he.BACKEND_CLEAR
    stem = args.out or args.command.replace("-", "_")

    if args.role == "server":
        if not args.port:
            raise SystemExit("server role needs --port")
        params = (he.default_he_params(args.n) if args.command == "train" and args.n >= 2048
                  else small_he_params(args.n))
        _serve_forever(params, args.backend, args)
        return 0

    if args.command == "counts":
        rows = run_counts(args.n, args.ksweep_n)
        _write_csv(f"{stem}.csv", rows)
        if not args.no_plot:
            figures.counts_figure(rows, f"{stem}.png")
    elif args.command == "bench-he":
        rows = run_bench_he(args.n, args.trials, args.seed, args.backend)
        _write_csv(f"{stem}.csv", rows)
        if not args.no_plot:
            figures.bench_figure([r for r in rows if r["op"] != "ccmul_over_cpmul"], f"{stem}.png")
    elif args.command == "ablate":
        rows = run_ablate(args)
        _write_csv(f"{stem}.csv", rows)
        if not args.no_plot:
            figures.ablate_figure(rows, f"{stem}.png")
    elif args.command == "breakdown":
        rows = run_breakdown(args)
        _write_csv(f"{stem}.csv", rows)
        if not args.no_plot:
            figures.breakdown_figure(rows, f"{stem}.png")
    elif args.command == "train":
        rows, losses = run_train(args)
        train.write_metrics_csv(f"{stem}.csv", rows)
        if not args.no_plot:
            figures.train_figure(losses, f"{stem}.png")
        print(json.dumps({k: v for k, v in rows[-1].items() if k != "losses"}, indent=2))
    print(f"wrote {stem}.csv")
    return 0


if __name__ == "__main__":
    sys.exit(main())
