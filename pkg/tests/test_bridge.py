import os
import struct
import sys

import numpy as np
import pytest

from dereverb.bridge import MAGIC, BridgedScoreModel
from dereverb.errors import BridgeError
from dereverb.priors import GaussianPrior
from dereverb.sampler import DiffusionSchedule, run_informed

from ref_bridge_server import GaussianServer, serve_tcp


@pytest.fixture(scope="module")
def tcp_server():
    listener, thread = serve_tcp(GaussianServer(mean=0.25, variance=0.9))
    port = listener.getsockname()[1]
    yield f"tcp:127.0.0.1:{port}"
    listener.close()


class TestClientTcp:
    def test_meta(self, tcp_server):
        with BridgedScoreModel(tcp_server) as model:
            assert model.data_rms == 0.05
            assert model.sample_rate == 16000
            assert model.max_len == 1_000_000

    def test_score_matches_analytic_on_zeros(self, tcp_server):
        with BridgedScoreModel(tcp_server) as model:
            sigma = 0.7
            out = model.score(np.zeros(64), sigma)
            expected = 0.25 / (0.9 + sigma**2)
            assert np.allclose(out, expected, atol=1e-6)

    def test_round_trip_bitwise_at_float32(self, tcp_server):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(512)
        sigma = 0.3
        local = GaussianPrior(mean=0.25, variance=0.9)
        expected = local.score(np.float32(x).astype(np.float64), sigma)
        with BridgedScoreModel(tcp_server) as model:
            out = model.score(x, sigma)
        assert np.array_equal(
            np.float32(out), np.float32(expected)
        )

    def test_vjp_supported(self, tcp_server):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(32)
        u = rng.standard_normal(32)
        with BridgedScoreModel(tcp_server) as model:
            assert model.vjp_score is not None
            out = model.vjp_score(x, 0.5, u)
        assert np.allclose(out, -u / (0.9 + 0.25), atol=1e-6)

    def test_malformed_frame_keeps_connection_alive(self, tcp_server):
        with BridgedScoreModel(tcp_server) as model:
            bad = struct.pack("<4sIdQ", b"NOPE", 1, 0.0, 0)
            model._transport.send(bad)
            header = model._transport.recv_exact(24)
            magic, op, _, length = struct.unpack("<4sIdQ", header)
            body = model._transport.recv_exact(length)
            assert magic == MAGIC and op == 0
            assert b"magic" in body
            # the same connection still answers real requests
            meta = model._request_meta()
            assert meta["sample_rate"] == 16000

    def test_server_down_is_an_error_not_a_hang(self):
        with pytest.raises(BridgeError):
            BridgedScoreModel("tcp:127.0.0.1:1", timeout=2.0)

    def test_bad_endpoint_format(self):
        with pytest.raises(BridgeError):
            BridgedScoreModel("not-an-endpoint")


class TestVjpFallback:
    def test_unsupported_vjp_disables_attribute(self):
        listener, _ = serve_tcp(GaussianServer(supports_vjp=False))
        port = listener.getsockname()[1]
        try:
            with BridgedScoreModel(f"127.0.0.1:{port}") as model:
                assert model.vjp_score is None
        finally:
            listener.close()


class TestStdio:
    def test_score_over_pipes(self):
        script = os.path.join(os.path.dirname(__file__), "ref_bridge_server.py")
        endpoint = (
            f"stdio:{sys.executable} {script} --stdio --mean 0.1 --variance 1.5"
        )
        env_path = os.pathsep.join(sys.path)
        old = os.environ.get("PYTHONPATH")
        os.environ["PYTHONPATH"] = env_path
        try:
            with BridgedScoreModel(endpoint) as model:
                out = model.score(np.zeros(16), 0.5)
                assert np.allclose(out, 0.1 / (1.5 + 0.25), atol=1e-6)
        finally:
            if old is None:
                os.environ.pop("PYTHONPATH", None)
            else:
                os.environ["PYTHONPATH"] = old


class TestSamplerOverBridge:
    def test_informed_run_matches_in_process(self, small_cfg):
        rng = np.random.default_rng(2)
        length = 600
        y = 0.05 * rng.standard_normal(length + 2)
        h = np.array([1.0, 0.0, 0.4])
        sched = DiffusionSchedule(n_steps=8)
        listener, _ = serve_tcp(
            GaussianServer(mean=0.0, variance=0.0025, data_rms=None)
        )
        port = listener.getsockname()[1]
        try:
            local = GaussianPrior(mean=0.0, variance=0.0025, data_rms=None)
            a = run_informed(y, h, local, sched, seed=3, cfg=small_cfg, use_wpe=False)
            with BridgedScoreModel(f"tcp:127.0.0.1:{port}") as remote:
                b = run_informed(y, h, remote, sched, seed=3, cfg=small_cfg, use_wpe=False)
        finally:
            listener.close()
        assert np.max(np.abs(a.speech - b.speech)) <= 1e-5
