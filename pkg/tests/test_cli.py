import os
import subprocess
import sys
import threading

import numpy as np
import pytest

from privtrain import cli, he, packing, train


class TestCounts:
    def test_toy_row(self):
        rows = cli.run_counts()
        toy = rows[0]
        assert toy["section"] == "toy"
        assert toy["baseline_mults"] == 4 and toy["correlated_mults"] == 1

    def test_rows_match_count_report(self):
        rows = cli.run_counts()
        for row in rows:
            shape = packing.ConvShape(row["height"], row["width"], row["kernel"], row["pad"])
            rep = packing.count_report(shape, row["n"], packing.SCHEME_CORRELATED)
            assert row["baseline_mults"] == rep.mults_baseline
            assert row["correlated_mults"] == rep.mults_correlated

    def test_input_sweep_trend(self):
        rows = [r for r in cli.run_counts() if r["section"] == "input_sweep"]
        ratios = [r["ratio"] for r in rows]
        assert ratios == sorted(ratios)
        assert ratios[-1] >= 3

    def test_kernel_sweep_trend(self):
        rows = [r for r in cli.run_counts() if r["section"] == "kernel_sweep"]
        by_kernel = {r["kernel"]: r["ratio"] for r in rows}
        assert by_kernel[max(by_kernel)] > by_kernel[3]


class TestBenchHe:
    def test_refuses_clear_backend(self):
        with pytest.raises(SystemExit):
            cli.run_bench_he(backend=he.BACKEND_CLEAR)

    def test_small_run_reports_ratio(self):
        rows = cli.run_bench_he(n=256, trials=3, seed=1)
        byop = {r["op"]: r for r in rows}
        assert byop["ccmul_over_cpmul"]["median_ms"] > 2
        assert byop["CCMul"]["median_ms"] > byop["CPMul"]["median_ms"]


def _args(**kw):
    defaults = dict(
        scheme="correlated", protocol="precompute", backend="clear", n=512,
        bitwidth=32, scale=12, seed=0, host=None, port=None, role="client",
        bandwidth_mbps=None, ping_ms=0.0, samples=2, epochs=1, side=8,
        classes=4, engine="secure", data_dir=None, offline_chunk=4,
        trials=3, no_plot=True, out=None, ksweep_n=8192,
    )
    defaults.update(kw)
    return type("Args", (), defaults)()


class TestAblateBreakdown:
    def test_ablate_directions_clear_bytes(self):
        rows = cli.run_ablate(_args())
        byp = {r["protocol"]: r for r in rows}
        assert byp["precompute"]["online_ccmul"] == 0
        assert byp["b"]["online_ccmul"] > 0
        assert byp["precompute"]["bytes_online"] > byp["b"]["bytes_online"]
        assert byp["precompute"]["loss"] == byp["b"]["loss"]

    def test_breakdown_rows_cover_layers(self):
        rows = cli.run_breakdown(_args())
        kinds = {r["kind"] for r in rows}
        assert {"conv", "bn", "relu", "maxpool", "fc"} <= kinds
        protos = {r["protocol"] for r in rows}
        assert protos == {"b", "precompute"}


class TestMainEntry:
    def test_counts_writes_csv_and_png(self, tmp_path):
        out = tmp_path / "counts"
        rc = cli.main(["--command", "counts", "--out", str(out)])
        assert rc == 0
        assert (tmp_path / "counts.csv").exists()
        assert (tmp_path / "counts.png").exists()

    def test_train_plain_engine(self, tmp_path):
        out = tmp_path / "m"
        rc = cli.main([
            "--command", "train", "--engine", "plain", "--samples", "4",
            "--side", "8", "--classes", "4", "--out", str(out), "--no-plot",
        ])
        assert rc == 0
        text = (tmp_path / "m.csv").read_text()
        assert text.splitlines()[0].split(",") == [
            "epoch", "loss", "accuracy", "online_seconds", "offline_seconds",
            "bytes_online", "bytes_offline",
        ]

    def test_train_secure_with_figure(self, tmp_path):
        out = tmp_path / "sec"
        rc = cli.main([
            "--command", "train", "--samples", "2", "--side", "8",
            "--classes", "4", "--n", "512", "--out", str(out),
        ])
        assert rc == 0
        assert (tmp_path / "sec.csv").exists()
        assert (tmp_path / "sec.png").exists()

    def test_socket_roles(self, tmp_path):
        port = 39411
        server = threading.Thread(
            target=cli.main,
            args=([
                "--command", "train", "--role", "server", "--port", str(port),
                "--n", "512", "--seed", "3",
            ],),
        )
        server.start()
        out = tmp_path / "sock"
        rc = cli.main([
            "--command", "train", "--role", "client", "--host", "127.0.0.1",
            "--port", str(port), "--n", "512", "--seed", "3", "--samples", "2",
            "--side", "8", "--classes", "4", "--out", str(out), "--no-plot",
        ])
        server.join(timeout=30)
        assert rc == 0 and (tmp_path / "sock.csv").exists()

    def test_network_model_flag(self, tmp_path):
        out = tmp_path / "net"
        rc = cli.main([
            "--command", "train", "--samples", "1", "--side", "8",
            "--classes", "4", "--n", "512", "--bandwidth-mbps", "400",
            "--ping-ms", "0.5", "--out", str(out), "--no-plot",
        ])
        assert rc == 0


class TestConsoleScript:
    def test_module_invocation(self, tmp_path):
        r = subprocess.run(
            [sys.executable, "-m", "privtrain.cli", "--command", "counts",
             "--out", str(tmp_path / "c"), "--no-plot"],
            capture_output=True, text=True, timeout=120,
        )
        assert r.returncode == 0, r.stderr
        assert (tmp_path / "c.csv").exists()
