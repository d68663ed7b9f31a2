"""End-to-end party orchestration: loopback runs, handshake failures,
reconnect recovery, resume, and the wire audit trail."""

import socket
import threading

import pytest

import vfseg.orchestrator as orchestrator
from vfseg.config import PartyConfig
from vfseg.data import MemoryImageStore, MemoryLabelStore, SamplePair
from vfseg.errors import (
    ConfigurationError,
    ProtocolError,
    TransportError,
    ValidationError,
)
from vfseg.metrics import metrics_log_read
from vfseg.orchestrator import bench_comm, run_both, run_bottom, run_top
from vfseg.protocol import (
    FLAG_ELEMENTS_F32,
    FLAG_ENCRYPTED,
    MsgType,
    batch_payload_size,
)
from vfseg.training import MonolithicTrainer, state_digest
from vfseg.transport import tcp_connect


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def _stores(pairs):
    return MemoryImageStore(pairs, 64), MemoryLabelStore(pairs, 64)


BASE = dict(preset="tiny", batch_size=8, optimizer="sgd", lr=0.01, seed=3)


def test_run_both_trains_and_audits(small_pairs, tmp_path):
    images, labels = _stores(small_pairs)
    cfg = PartyConfig(role="both", epochs=2, out_dir=str(tmp_path), **BASE).validate()
    result = run_both(cfg, images, labels)

    assert result["bottom"]["epochs_done"] == result["top"]["epochs_done"] == 2
    assert result["bottom"]["steps_done"] == 4   # 16 aligned / batch 8 = 2 per epoch
    assert result["bottom"]["aligned"] == 16
    assert result["bottom"]["epoch_reports"] == result["top"]["epoch_reports"]
    assert cfg.bottom_checkpoint.exists() and cfg.top_checkpoint.exists()
    records, bad = metrics_log_read(cfg.metrics_path)
    assert len(records) == 4 and not bad

    audit = result["audit"]
    by_type = {}
    for rec in audit:
        by_type.setdefault(rec.msg_type, []).append(rec)
    assert len(by_type[MsgType.HELLO]) == 2
    assert all(not r.flags & FLAG_ENCRYPTED for r in by_type[MsgType.HELLO])
    encrypted = [r for r in audit if r.msg_type != MsgType.HELLO]
    assert all(r.flags & FLAG_ENCRYPTED for r in encrypted)
    assert len(by_type[MsgType.BATCH_ACTIVATIONS]) == 4
    assert len(by_type[MsgType.BATCH_GRADIENTS]) == 4
    assert len(by_type[MsgType.METRICS_REPORT]) == 2
    assert len(by_type[MsgType.SHUTDOWN]) == 1
    want = batch_payload_size(8, 500)
    assert all(r.payload_len == want for r in by_type[MsgType.BATCH_ACTIVATIONS])
    assert all(r.direction == "bottom->top" for r in by_type[MsgType.BATCH_ACTIVATIONS])
    assert all(r.direction == "top->bottom" for r in by_type[MsgType.BATCH_GRADIENTS])


def test_split_matches_monolithic(small_pairs, tmp_path):
    images, labels = _stores(small_pairs)
    cfg = PartyConfig(role="both", epochs=2, out_dir=str(tmp_path), **BASE).validate()
    result = run_both(cfg, images, labels, record_digests=True)

    mono = MonolithicTrainer(orchestrator._model_config(cfg), cfg.seed,
                             images, labels, cfg.optimizer, cfg.lr, cfg.momentum)
    mono.bottom.record_digests = mono.top.record_digests = True
    mono.train([p.id for p in small_pairs], cfg.batch_size, cfg.epochs)

    assert result["bottom"]["worker"].digests == mono.bottom.digests
    assert result["top"]["worker"].digests == mono.top.digests


def test_hello_mismatch_aborts_both_parties(small_pairs, tmp_path):
    images, labels = _stores(small_pairs)
    from vfseg.transport import LoopbackPair
    cfg_b = PartyConfig(role="both", epochs=1, batch_size=8, preset="tiny",
                        out_dir=str(tmp_path / "b")).validate()
    cfg_t = PartyConfig(role="both", epochs=1, batch_size=4, preset="tiny",
                        out_dir=str(tmp_path / "t")).validate()
    pair = LoopbackPair(timeout=10.0)
    psk = bytes(32)
    failures = {}

    def drive(name, fn, cfg, store, endpoint):
        try:
            fn(cfg, store, psk, transport=endpoint)
        except Exception as exc:
            failures[name] = exc
            pair.close()

    threads = [
        threading.Thread(target=drive,
                         args=("bottom", run_bottom, cfg_b, images, pair.bottom)),
        threading.Thread(target=drive,
                         args=("top", run_top, cfg_t, labels, pair.top)),
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=30.0)
    assert isinstance(failures["top"], ProtocolError)
    assert "batch_size" in str(failures["top"])
    assert isinstance(failures["bottom"], ProtocolError)
    assert "refused" in str(failures["bottom"])


def test_disjoint_parties_refuse_to_train(small_pairs, tmp_path):
    images = MemoryImageStore(small_pairs, 64)
    shifted = [SamplePair(p.id + 1000, p.image, p.mask) for p in small_pairs]
    labels = MemoryLabelStore(shifted, 64)
    cfg = PartyConfig(role="both", epochs=1, out_dir=str(tmp_path), **BASE).validate()
    with pytest.raises(ValidationError, match="refusing to train"):
        run_both(cfg, images, labels)


class _FlakyTransport:
    """Delegates to a real transport but fails a chosen send, closing the
    connection under the peer as a crash would."""

    def __init__(self, inner, sends_left: int):
        self._inner = inner
        self._sends_left = sends_left

    def send_frame(self, data):
        if self._sends_left == 0:
            self._inner.close()
            raise TransportError("injected mid-epoch fault")
        self._sends_left -= 1
        self._inner.send_frame(data)

    def recv_frame(self):
        return self._inner.recv_frame()

    def close(self):
        self._inner.close()


def test_tcp_reconnect_recovers_mid_epoch(small_pairs, tmp_path, monkeypatch):
    psk = bytes(range(32))
    images, labels = _stores(small_pairs)

    loop_cfg = PartyConfig(role="both", epochs=2,
                           out_dir=str(tmp_path / "loop"), **BASE).validate()
    clean = run_both(loop_cfg, images, labels, psk=psk)
    want_bottom = state_digest(clean["bottom"]["worker"].param_tensors())
    want_top = state_digest(clean["top"]["worker"].param_tensors())

    port = _free_port()
    cfg_b = PartyConfig(role="bottom", transport="tcp", port=port, epochs=2,
                        timeout=30.0, out_dir=str(tmp_path / "b"), **BASE).validate()
    cfg_t = PartyConfig(role="top", transport="tcp", port=port, epochs=2,
                        timeout=30.0, out_dir=str(tmp_path / "t"), **BASE).validate()

    calls = {"n": 0}

    def flaky_connect(host, port_, timeout=120.0, **kw):
        t = tcp_connect(host, port_, timeout, **kw)
        calls["n"] += 1
        if calls["n"] == 1:
            # HELLO and ALIGN_REQUEST and the first step's activations go
            # through; the second step's send dies mid-epoch.
            return _FlakyTransport(t, 3)
        return t

    monkeypatch.setattr(orchestrator, "tcp_connect", flaky_connect)

    results = {}
    errs = []

    def top_thread():
        try:
            results["top"] = run_top(cfg_t, labels, psk)
        except BaseException as exc:
            errs.append(exc)

    th = threading.Thread(target=top_thread)
    th.start()
    results["bottom"] = run_bottom(cfg_b, images, psk)
    th.join(timeout=120.0)

    assert not errs
    assert calls["n"] == 2, "the run must actually have reconnected"
    got_bottom = state_digest(results["bottom"]["worker"].param_tensors())
    got_top = state_digest(results["top"]["worker"].param_tensors())
    assert got_bottom == want_bottom
    assert got_top == want_top


def test_tcp_reconnect_recovers_gradient_send_fault(small_pairs, tmp_path, monkeypatch):
    """The mirror fault: the top party's gradient send dies after its
    optimizer already stepped. The retry must replay, not re-step."""
    psk = bytes(range(32))
    images, labels = _stores(small_pairs)

    loop_cfg = PartyConfig(role="both", epochs=2,
                           out_dir=str(tmp_path / "loop"), **BASE).validate()
    clean = run_both(loop_cfg, images, labels, psk=psk)
    want_bottom = state_digest(clean["bottom"]["worker"].param_tensors())
    want_top = state_digest(clean["top"]["worker"].param_tensors())

    port = _free_port()
    cfg_b = PartyConfig(role="bottom", transport="tcp", port=port, epochs=2,
                        timeout=30.0, out_dir=str(tmp_path / "b"), **BASE).validate()
    cfg_t = PartyConfig(role="top", transport="tcp", port=port, epochs=2,
                        timeout=30.0, out_dir=str(tmp_path / "t"), **BASE).validate()

    from vfseg.transport import TcpListener

    accepts = {"n": 0}

    class FlakyListener(TcpListener):
        def accept(self, timeout=120.0):
            t = super().accept(timeout)
            accepts["n"] += 1
            if accepts["n"] == 1:
                # HELLO, ALIGN_RESPONSE, and step 1 gradients go through;
                # step 2's gradient send dies after worker.process ran.
                return _FlakyTransport(t, 3)
            return t

    monkeypatch.setattr(orchestrator, "TcpListener", FlakyListener)

    results = {}
    errs = []

    def top_thread():
        try:
            results["top"] = run_top(cfg_t, labels, psk)
        except BaseException as exc:
            errs.append(exc)

    th = threading.Thread(target=top_thread)
    th.start()
    results["bottom"] = run_bottom(cfg_b, images, psk)
    th.join(timeout=120.0)

    assert not errs
    assert accepts["n"] == 2, "the run must actually have reconnected"
    assert state_digest(results["bottom"]["worker"].param_tensors()) == want_bottom
    assert state_digest(results["top"]["worker"].param_tensors()) == want_top
    # the replayed step must not double-log its metrics
    records, bad = metrics_log_read(cfg_t.metrics_path)
    assert [r.step for r in records] == [1, 2, 3, 4] and not bad


def test_abort_state_saved_when_peer_never_appears(small_pairs, tmp_path, monkeypatch):
    images = MemoryImageStore(small_pairs, 64)
    cfg = PartyConfig(role="bottom", transport="tcp", port=9, epochs=1,
                      out_dir=str(tmp_path), **BASE).validate()

    def no_connect(host, port, timeout=120.0, **kw):
        raise TransportError("nobody home")

    monkeypatch.setattr(orchestrator, "tcp_connect", no_connect)
    with pytest.raises(TransportError):
        run_bottom(cfg, images, bytes(32))
    assert (tmp_path / "bottom.ckpt.aborted").exists()
    assert not (tmp_path / "bottom.ckpt").exists()


def test_resume_matches_straight_run(small_pairs, tmp_path):
    images, labels = _stores(small_pairs)
    straight_cfg = PartyConfig(role="both", epochs=2,
                               out_dir=str(tmp_path / "s"), **BASE).validate()
    straight = run_both(straight_cfg, images, labels)

    part_cfg = PartyConfig(role="both", epochs=1,
                           out_dir=str(tmp_path / "p"), **BASE).validate()
    run_both(part_cfg, images, labels)
    resume_cfg = PartyConfig(role="both", epochs=2, resume=True,
                             out_dir=str(tmp_path / "p"), **BASE).validate()
    resumed = run_both(resume_cfg, images, labels)

    for party in ("bottom", "top"):
        want = state_digest(straight[party]["worker"].param_tensors())
        got = state_digest(resumed[party]["worker"].param_tensors())
        assert got == want


def test_resume_without_checkpoint_is_an_error(small_pairs, tmp_path):
    images, labels = _stores(small_pairs)
    cfg = PartyConfig(role="both", epochs=1, resume=True,
                      out_dir=str(tmp_path / "empty"), **BASE).validate()
    with pytest.raises(ConfigurationError, match="no checkpoint"):
        run_both(cfg, images, labels)


def test_f32_wire_mode(small_pairs, tmp_path):
    images, labels = _stores(small_pairs)
    cfg = PartyConfig(role="both", epochs=1, wire_float="f32",
                      out_dir=str(tmp_path), **BASE).validate()
    result = run_both(cfg, images, labels)
    acts = [r for r in result["audit"] if r.msg_type == MsgType.BATCH_ACTIVATIONS]
    assert all(r.flags & FLAG_ELEMENTS_F32 for r in acts)
    assert acts[0].payload_len == batch_payload_size(8, 500, f32=True)
    assert result["bottom"]["epochs_done"] == 1


def test_bench_comm_reports_wire_cost():
    rows = bench_comm([100, 500], batch_size=2, steps=1, seed=0)
    assert [r["features"] for r in rows] == [100, 500]
    for row, count in zip(rows, (100, 500)):
        want = batch_payload_size(2, count)
        assert row["payload_bytes_up"] == want
        assert row["payload_bytes_down"] == want
        # two frames per step, each payload plus 16 header and 16 tag bytes
        assert row["bytes_per_step"] == 2 * (want + 32)
        assert row["bytes_per_epoch"] == row["bytes_per_step"] * row["steps"]
    with pytest.raises(ConfigurationError):
        bench_comm([100], batch_size=1, steps=1)
