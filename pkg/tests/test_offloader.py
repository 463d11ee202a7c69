import csv
import io
import socket
import struct
import threading

import numpy as np
import pytest

from slicekit import wire
from slicekit.errors import BindError, ServerError, Timeout
from slicekit.graph import build_model, make_synthetic_model, random_input, slice_graph
from slicekit.netem import LinkShaper, NetworkProfile, UNLIMITED
from slicekit.offloader import (DeviceClient, EdgeServer, build_registry, device_plan,
                                format_summary, raw_log_csv, run_experiment, summary_csv)
from slicekit.preprocessor import insert_tl
from slicekit.tensor import Dense, GlobalAvgPool, Tensor
from slicekit.wire import FrameType


@pytest.fixture(scope="module")
def tiny():
    return make_synthetic_model("tiny-cnn-8", 0)


@pytest.fixture(scope="module")
def server(tiny):
    with EdgeServer(build_registry(tiny)) as s:
        yield s


def raw_conn(server):
    s = socket.create_connection(server.address, timeout=5)
    s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return s


def test_registry_covers_every_offloading_split(tiny):
    reg = build_registry(tiny)
    plain = {f"tiny-cnn-8@{i}" for i in range(-1, tiny.n - 1)}
    tl = {f"tiny-cnn-8@{i}+tl" for i in range(0, 6)}
    assert set(reg) == plain | tl


class TestProtocol:
    def test_ping_pong(self, server):
        with raw_conn(server) as s:
            s.sendall(wire.encode(FrameType.PING, request_id=77))
            f = wire.recv_frame(s)
            assert f.frame_type == FrameType.PONG and f.request_id == 77

    def test_in_order_responses(self, server):
        with raw_conn(server) as s:
            s.sendall(b"".join(wire.encode(FrameType.PING, request_id=i) for i in (5, 6, 7)))
            assert [wire.recv_frame(s).request_id for _ in range(3)] == [5, 6, 7]

    def test_unknown_model(self, server, tiny):
        t = random_input(tiny, 0)
        with raw_conn(server) as s:
            s.sendall(wire.encode(FrameType.INFER_REQUEST, t, request_id=3, model_id="nope@1"))
            f = wire.recv_frame(s)
            assert f.frame_type == FrameType.ERROR and f.request_id == 3
            assert wire.parse_error(f) == ("UnknownModel", "nope@1")

    def test_split_and_shape_mismatch(self, server, tiny):
        t = random_input(tiny, 0)
        with raw_conn(server) as s:
            s.sendall(wire.encode(FrameType.INFER_REQUEST, t, request_id=1,
                                  model_id="tiny-cnn-8@-1", split_index=4))
            assert wire.parse_error(wire.recv_frame(s))[0] == "SplitMismatch"
            s.sendall(wire.encode(FrameType.INFER_REQUEST, t, request_id=2,
                                  model_id="tiny-cnn-8@2", split_index=2))
            assert wire.parse_error(wire.recv_frame(s))[0] == "ShapeMismatch"

    def test_tail_output_matches_in_process(self, server, tiny):
        head, tail = slice_graph(tiny, 2)
        mid = head.forward(random_input(tiny, 9))
        with raw_conn(server) as s:
            s.sendall(wire.encode(FrameType.INFER_REQUEST, mid, request_id=4,
                                  model_id="tiny-cnn-8@2", split_index=2))
            f = wire.recv_frame(s)
        assert f.frame_type == FrameType.INFER_RESPONSE
        assert f.tensor == tail.forward(mid)
        meta = wire.parse_meta(f.model_id)
        assert float(meta["edge_us"]) > 0

    def test_recoverable_error_keeps_connection(self, server):
        bad = bytearray(wire.encode(FrameType.INFER_REQUEST, Tensor(np.zeros((1, 2, 2), np.float32)),
                                    request_id=11))
        dims_at = wire.header_size("") - 20
        bad[dims_at:dims_at + 4] = struct.pack("<I", 3)
        with raw_conn(server) as s:
            s.sendall(bytes(bad))
            f = wire.recv_frame(s)
            assert f.frame_type == FrameType.ERROR and f.request_id == 11
            assert wire.parse_error(f)[0] == "PayloadLengthMismatch"
            s.sendall(wire.encode(FrameType.PING, request_id=12))
            assert wire.recv_frame(s).frame_type == FrameType.PONG

    def test_bad_magic_closes(self, server):
        with raw_conn(server) as s:
            s.sendall(b"JUNK" + bytes(60))
            f = wire.recv_frame(s)
            assert wire.parse_error(f)[0] == "BadMagic"
            assert s.recv(16) == b""

    def test_fuzzing_clients_never_kill_server(self, server):
        rng = np.random.default_rng(3)
        for k in range(200):
            data = rng.integers(0, 256, int(rng.integers(1, 300)), dtype=np.uint8).tobytes()
            if k % 2:
                data = b"SLKF\x01\x00" + data
            with raw_conn(server) as s:
                try:
                    # the server may already have hung up on bad framing
                    s.sendall(data)
                    s.shutdown(socket.SHUT_WR)
                    while s.recv(4096):
                        pass
                except OSError:
                    pass
        with raw_conn(server) as s:
            s.sendall(wire.encode(FrameType.PING, request_id=1))
            assert wire.recv_frame(s).frame_type == FrameType.PONG


class TestClient:
    def test_plain_split_bit_identical(self, server, tiny):
        for split in range(-1, tiny.n - 1):
            with DeviceClient(device_plan(tiny, split), server.address) as c:
                for seed in range(5):
                    x = random_input(tiny, seed)
                    out, _ = c.infer(x)
                    assert out == tiny.forward(x)

    def test_tl_split_bit_identical_100_inputs(self, server, tiny):
        tl_graph = insert_tl(tiny, 2).graph
        with DeviceClient(device_plan(tiny, 2, tl=True), server.address) as c:
            for seed in range(100):
                x = random_input(tiny, seed)
                out, rep = c.infer(x)
                assert out == tl_graph.forward(x)
                assert rep.tl_us > 0

    def test_local_only_skips_network(self, tiny):
        c = DeviceClient(device_plan(tiny, tiny.n - 1))
        out, rep = c.infer(random_input(tiny, 1))
        assert out == tiny.forward(random_input(tiny, 1))
        assert rep.network_us == 0 and rep.edge_us == 0 and rep.device_us > 0

    def test_partition_sums_to_total(self, server, tiny):
        with DeviceClient(device_plan(tiny, 3, tl=True), server.address,
                          LinkShaper(NetworkProfile(2, 50))) as c:
            for seed in range(10):
                _, rep = c.infer(random_input(tiny, seed))
                assert rep.partition_sum == pytest.approx(rep.total_us, rel=0.05)

    def test_server_error_surfaces(self, server, tiny):
        plan = device_plan(tiny, 2)
        bogus = type(plan)(plan.head, "tiny-cnn-8@99", 2, False, False)
        with DeviceClient(bogus, server.address) as c:
            with pytest.raises(ServerError) as e:
                c.infer(random_input(tiny, 0))
        assert e.value.reason == "UnknownModel"

    def test_ping(self, server, tiny):
        with DeviceClient(device_plan(tiny, 2), server.address) as c:
            assert c.ping() > 0

    def test_timeout(self, tiny):
        silent = socket.socket()
        silent.bind(("127.0.0.1", 0))
        silent.listen()
        try:
            with DeviceClient(device_plan(tiny, 2), silent.getsockname(), timeout=0.3) as c:
                with pytest.raises(Timeout):
                    c.infer(random_input(tiny, 0))
        finally:
            silent.close()


def test_network_share_matches_link_prediction():
    # full offload of a 64x64x64 input puts ~1 MB on the link
    g = build_model("wide-in", (64, 64, 64), [GlobalAvgPool(), Dense(2)])
    net = NetworkProfile(30, 30)
    with EdgeServer(build_registry(g, with_tl=False)) as srv:
        with DeviceClient(device_plan(g, -1), srv.address, LinkShaper(net)) as c:
            _, rep = c.infer(random_input(g, 0))
    assert rep.payload_bytes == wire.frame_size((64, 64, 64), "wide-in@-1")
    predicted = net.latency_us + net.transfer_us(rep.payload_bytes)
    assert rep.network_us == pytest.approx(predicted, rel=0.10)


def test_bind_error(server):
    with pytest.raises(BindError):
        EdgeServer({}, server.address)


def test_concurrent_clients(server, tiny):
    errors = []

    def worker(seed):
        try:
            with DeviceClient(device_plan(tiny, 2, tl=True), server.address) as c:
                for k in range(10):
                    x = random_input(tiny, seed * 100 + k)
                    out, _ = c.infer(x)
                    assert out == insert_tl(tiny, 2).graph.forward(x)
        except Exception as e:  # surfaced below
            errors.append(e)

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(30)
    assert not errors


class TestExperiment:
    def test_needs_30_requests(self, tiny):
        with pytest.raises(ValueError):
            run_experiment(tiny, 2, False, UNLIMITED, n_requests=10)

    def test_unlimited_network_near_zero(self, tiny):
        res = run_experiment(tiny, 2, True, UNLIMITED, n_requests=30)
        assert len(res.reports) == 30
        assert res.component_medians()["network_us"] < 2_000
        assert res.p95_us >= res.median_us

    def test_outputs_are_model_outputs(self, tiny):
        res = run_experiment(tiny, 4, False, UNLIMITED, n_requests=30, seed=5)
        for k, out in enumerate(res.outputs):
            assert out == tiny.forward(random_input(tiny, 5 + k))

    def test_logs_and_summary(self, tiny):
        res = [run_experiment(tiny, 2, tl, NetworkProfile(1, 100), n_requests=30) for tl in (False, True)]
        rows = list(csv.DictReader(io.StringIO(raw_log_csv(res))))
        assert len(rows) == 60 and {r["variant"] for r in rows} == {"tl", "no-tl"}
        text = format_summary(res)
        assert "median µs" in text and "result return" in text
        parsed = list(csv.DictReader(io.StringIO(summary_csv(res))))
        assert [p["variant"] for p in parsed] == ["no-tl", "tl"]
