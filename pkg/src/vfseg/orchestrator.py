"""Party state machines: handshake, alignment, the lockstep training
loop, checkpointing, and the loopback "both" role.

Flow per connection (bottom initiates):

    HELLO (plaintext, both ways)  -> channel key derived
    ALIGN_REQUEST / ALIGN_RESPONSE (encrypted)
    per step:  BATCH_ACTIVATIONS up, BATCH_GRADIENTS down
    per epoch: METRICS_REPORT down, checkpoints written locally
    SHUTDOWN up after the final epoch

A transport-level failure is retried exactly once by reconnecting and
re-handshaking. Any fault that loses a BATCH payload is healed exactly:
the bottom keeps the computed activations instead of re-running the
forward pass (which would move batch-norm running statistics twice),
and the top recognizes a re-sent activation payload for its last
completed step and replays the cached gradient bytes instead of
stepping the optimizer again; an epoch report that overtakes lost
gradients is stashed by the bottom until the step completes. A lost
METRICS_REPORT or SHUTDOWN frame is not healed; those runs abort with
state saved to <checkpoint>.aborted (the last epoch checkpoint stays
intact for a clean resume).
"""

from __future__ import annotations

import json
import secrets
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import PartyConfig
from .errors import (
    ConfigurationError,
    ProtocolError,
    TransportError,
    ValidationError,
    VfsegError,
)
from .metrics import BatchMetrics, metrics_log_append
from .presets import ModelConfig, config_for, scale_segments
from .protocol import (
    FLAG_ELEMENTS_F32,
    BatchPayload,
    Frame,
    MsgType,
    SecureChannel,
    bottom_channel,
    check_hello_agreement,
    derive_channel_key,
    encode_batch_payload,
    encode_error,
    encode_frame,
    encode_hello,
    encode_id_list,
    entity_align,
    parse_batch_payload,
    parse_error,
    parse_hello,
    parse_id_list,
    top_channel,
)
from .training import BottomWorker, TopWorker, batch_schedule
from .transport import FrameTransport, LoopbackPair, TcpListener, tcp_connect


@dataclass
class _Progress:
    """Where a party stands, carried across a reconnect.

    pending_feats (bottom) and replay/epoch_agg (top) hold the in-flight
    step state that makes the single reconnect retry bitwise-exact.
    """

    epoch: int = 0
    step_in_epoch: int = 0
    global_step: int = 0
    aligned: list[int] | None = None
    epoch_reports: list[dict] = field(default_factory=list)
    pending_feats: tuple | None = None
    replay: tuple | None = None
    epoch_agg: dict | None = None


def _send(transport: FrameTransport, chan: SecureChannel,
          msg_type: MsgType, plaintext: bytes, extra_flags: int = 0) -> None:
    transport.send_frame(chan.seal_frame(msg_type, plaintext, extra_flags))


def _recv(transport: FrameTransport, chan: SecureChannel,
          expected: set[MsgType], context: str) -> tuple[Frame, bytes]:
    frame = transport.recv_frame()
    if not frame.encrypted:
        if frame.msg_type == MsgType.ERROR:
            code, message = parse_error(frame.payload)
            raise ProtocolError(f"peer error during {context}: [{code}] {message}")
        raise ProtocolError(
            f"expected an encrypted frame during {context}, "
            f"got plaintext {frame.msg_type.name}")
    payload = chan.open_frame(frame)
    if frame.msg_type == MsgType.ERROR:
        code, message = parse_error(payload)
        raise ProtocolError(f"peer error during {context}: [{code}] {message}")
    if frame.msg_type not in expected:
        names = "/".join(m.name for m in sorted(expected))
        raise ProtocolError(f"expected {names} during {context}, got {frame.msg_type.name}")
    return frame, payload


def _send_error_best_effort(transport: FrameTransport, chan: SecureChannel | None,
                            code: str, message: str) -> None:
    try:
        body = encode_error(code, message)
        if chan is None:
            transport.send_frame(encode_frame(MsgType.ERROR, body))
        else:
            transport.send_frame(chan.seal_frame(MsgType.ERROR, body))
    except Exception:
        pass


def _hello_fields(cfg: PartyConfig, role: str, salt: bytes) -> dict:
    return {"role": role, "preset": cfg.preset, "batch_size": cfg.batch_size,
            "seed": cfg.seed, "wire_float": cfg.wire_float, "salt": salt}


def _handshake_bottom(transport: FrameTransport, cfg: PartyConfig,
                      psk: bytes) -> SecureChannel:
    salt = secrets.token_bytes(16)
    mine = _hello_fields(cfg, "bottom", salt)
    transport.send_frame(encode_frame(
        MsgType.HELLO,
        encode_hello("bottom", cfg.preset, cfg.batch_size, cfg.seed,
                     cfg.wire_float, salt)))
    frame = transport.recv_frame()
    if frame.msg_type == MsgType.ERROR and not frame.encrypted:
        code, message = parse_error(frame.payload)
        raise ProtocolError(f"peer refused handshake: [{code}] {message}")
    if frame.msg_type != MsgType.HELLO or frame.encrypted:
        raise ProtocolError(f"expected plaintext HELLO, got {frame.msg_type.name}")
    theirs = parse_hello(frame.payload)
    check_hello_agreement(mine, theirs)
    if theirs["role"] != "top":
        raise ProtocolError(f"peer role is {theirs['role']!r}, expected top")
    key = derive_channel_key(psk, salt_bottom=salt, salt_top=theirs["salt"])
    return bottom_channel(key)


def _handshake_top(transport: FrameTransport, cfg: PartyConfig,
                   psk: bytes) -> SecureChannel:
    frame = transport.recv_frame()
    if frame.msg_type != MsgType.HELLO or frame.encrypted:
        raise ProtocolError(f"expected plaintext HELLO, got {frame.msg_type.name}")
    theirs = parse_hello(frame.payload)
    salt = secrets.token_bytes(16)
    mine = _hello_fields(cfg, "top", salt)
    try:
        check_hello_agreement(mine, theirs)
    except ProtocolError as exc:
        _send_error_best_effort(transport, None, "hello-mismatch", str(exc))
        raise
    if theirs["role"] != "bottom":
        _send_error_best_effort(transport, None, "hello-mismatch",
                                f"peer role is {theirs['role']!r}")
        raise ProtocolError(f"peer role is {theirs['role']!r}, expected bottom")
    transport.send_frame(encode_frame(
        MsgType.HELLO,
        encode_hello("top", cfg.preset, cfg.batch_size, cfg.seed,
                     cfg.wire_float, salt)))
    key = derive_channel_key(psk, salt_bottom=theirs["salt"], salt_top=salt)
    return top_channel(key)


def _check_alignment(aligned: list[int], progress: _Progress) -> None:
    if not aligned:
        raise ValidationError(
            "the parties share no sample ids; refusing to train")
    if progress.aligned is None:
        progress.aligned = aligned
    elif progress.aligned != aligned:
        raise ProtocolError("alignment changed across a reconnect")


def _wire_flags(cfg: PartyConfig) -> int:
    return FLAG_ELEMENTS_F32 if cfg.wire_float == "f32" else 0


def _f32(cfg: PartyConfig) -> bool:
    return cfg.wire_float == "f32"


def _bottom_session(transport: FrameTransport, cfg: PartyConfig, psk: bytes,
                    worker: BottomWorker, progress: _Progress) -> None:
    chan = _handshake_bottom(transport, cfg, psk)
    try:
        _send(transport, chan, MsgType.ALIGN_REQUEST, encode_id_list(worker.images.ids()))
        _, payload = _recv(transport, chan, {MsgType.ALIGN_RESPONSE}, "alignment")
        aligned = parse_id_list(payload)
        mine = set(worker.images.ids())
        if any(i not in mine for i in aligned):
            raise ProtocolError("alignment includes ids this party does not hold")
        _check_alignment(aligned, progress)

        for epoch in range(progress.epoch, cfg.epochs):
            schedule = batch_schedule(cfg.seed, epoch, progress.aligned, cfg.batch_size)
            start = progress.step_in_epoch if epoch == progress.epoch else 0
            stashed_report = None
            for idx in range(start, len(schedule)):
                ids = schedule[idx]
                step = progress.global_step + 1
                key = (epoch, step, tuple(ids))
                if progress.pending_feats is not None and progress.pending_feats[0] == key:
                    # reconnect landed mid-step: the forward pass already
                    # ran (and moved batch-norm stats), so reuse its output
                    feats = progress.pending_feats[1]
                else:
                    feats = worker.forward(ids, train=True)
                    progress.pending_feats = (key, feats)
                up = encode_batch_payload(
                    BatchPayload(epoch, step, tuple(ids), feats), f32=_f32(cfg))
                _send(transport, chan, MsgType.BATCH_ACTIVATIONS, up, _wire_flags(cfg))
                while True:
                    frame, payload = _recv(
                        transport, chan,
                        {MsgType.BATCH_GRADIENTS, MsgType.METRICS_REPORT},
                        f"epoch {epoch} step {step}")
                    if frame.msg_type == MsgType.METRICS_REPORT:
                        # the epoch report crossed our re-sent activations
                        # after a reconnect: keep it; the replayed gradients
                        # are already on their way down this connection
                        if stashed_report is not None:
                            raise ProtocolError(
                                f"received two reports for epoch {epoch}")
                        stashed_report = payload
                        continue
                    break
                down = parse_batch_payload(payload, frame.flags)
                if (down.epoch, down.step) != (epoch, step) or list(down.ids) != ids:
                    raise ProtocolError(
                        f"gradient payload for epoch {down.epoch} step {down.step} "
                        f"does not match epoch {epoch} step {step}")
                worker.backward_step(down.elements)
                progress.pending_feats = None
                progress.step_in_epoch = idx + 1
                progress.global_step = step
            if stashed_report is not None:
                report_payload = stashed_report
            else:
                _, report_payload = _recv(transport, chan, {MsgType.METRICS_REPORT},
                                          f"epoch {epoch} report")
            try:
                progress.epoch_reports.append(json.loads(report_payload))
            except json.JSONDecodeError as exc:
                raise ProtocolError(f"malformed METRICS_REPORT: {exc}") from exc
            progress.epoch = epoch + 1
            progress.step_in_epoch = 0
            Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(cfg.bottom_checkpoint, cfg.preset,
                            worker.state_tensors(progress.epoch, progress.global_step))
        transport.send_frame(chan.seal_frame(MsgType.SHUTDOWN, b""))
    except VfsegError as exc:
        if not isinstance(exc, TransportError):
            _send_error_best_effort(transport, chan, type(exc).__name__, str(exc))
        raise


def _top_session(transport: FrameTransport, cfg: PartyConfig, psk: bytes,
                 worker: TopWorker, progress: _Progress) -> None:
    chan = _handshake_top(transport, cfg, psk)
    try:
        frame, payload = _recv(transport, chan, {MsgType.ALIGN_REQUEST}, "alignment")
        their_ids = parse_id_list(payload)
        aligned = entity_align(their_ids, worker.labels.ids())
        _send(transport, chan, MsgType.ALIGN_RESPONSE, encode_id_list(aligned))
        _check_alignment(aligned, progress)

        for epoch in range(progress.epoch, cfg.epochs):
            schedule = batch_schedule(cfg.seed, epoch, progress.aligned, cfg.batch_size)
            start = progress.step_in_epoch if epoch == progress.epoch else 0
            if progress.epoch_agg is None:
                progress.epoch_agg = {"loss": 0.0, "pixel_accuracy": 0.0,
                                      "iou": 0.0, "steps": 0}
            agg = progress.epoch_agg
            for idx in range(start, len(schedule)):
                ids = schedule[idx]
                step = progress.global_step + 1
                while True:
                    frame, payload = _recv(transport, chan, {MsgType.BATCH_ACTIVATIONS},
                                           f"epoch {epoch} step {step}")
                    up = parse_batch_payload(payload, frame.flags)
                    if progress.replay is not None and \
                            (up.epoch, up.step, tuple(up.ids)) == progress.replay[0]:
                        # a reconnecting peer re-sent our last completed step:
                        # it never saw the gradients, so replay them without
                        # stepping the optimizer a second time
                        _send(transport, chan, MsgType.BATCH_GRADIENTS,
                              progress.replay[1], _wire_flags(cfg))
                        continue
                    break
                if (up.epoch, up.step) != (epoch, step) or list(up.ids) != ids:
                    raise ProtocolError(
                        f"activation payload for epoch {up.epoch} step {up.step} "
                        f"does not match epoch {epoch} step {step}")
                outcome = worker.process(ids, up.elements, train=True)
                down = BatchPayload(epoch, step, tuple(ids), outcome.grad_feats)
                body = encode_batch_payload(down, f32=_f32(cfg))
                # the optimizer step above already happened: record the step
                # as complete before the send so a send fault cannot replay it
                progress.replay = ((epoch, step, tuple(ids)), body)
                progress.step_in_epoch = idx + 1
                progress.global_step = step
                Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
                metrics_log_append(cfg.metrics_path, BatchMetrics.now(
                    epoch, step, ids, outcome.loss, outcome.accuracy, outcome.iou))
                agg["loss"] += outcome.loss
                agg["pixel_accuracy"] += outcome.accuracy
                agg["iou"] += outcome.iou
                agg["steps"] += 1
                _send(transport, chan, MsgType.BATCH_GRADIENTS, body, _wire_flags(cfg))
            steps = max(agg["steps"], 1)
            report = {"epoch": epoch, "steps": agg["steps"],
                      "loss": agg["loss"] / steps,
                      "pixel_accuracy": agg["pixel_accuracy"] / steps,
                      "iou": agg["iou"] / steps}
            _send(transport, chan, MsgType.METRICS_REPORT,
                  json.dumps(report, sort_keys=True).encode())
            progress.epoch_reports.append(report)
            progress.epoch = epoch + 1
            progress.step_in_epoch = 0
            progress.epoch_agg = None
            Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(cfg.top_checkpoint, cfg.preset,
                            worker.state_tensors(progress.epoch, progress.global_step))
        while True:
            frame, payload = _recv(transport, chan,
                                   {MsgType.SHUTDOWN, MsgType.BATCH_ACTIVATIONS},
                                   "shutdown")
            if frame.msg_type == MsgType.BATCH_ACTIVATIONS:
                up = parse_batch_payload(payload, frame.flags)
                if progress.replay is not None and \
                        (up.epoch, up.step, tuple(up.ids)) == progress.replay[0]:
                    _send(transport, chan, MsgType.BATCH_GRADIENTS,
                          progress.replay[1], _wire_flags(cfg))
                    continue
                raise ProtocolError("unexpected BATCH_ACTIVATIONS at shutdown")
            break
    except VfsegError as exc:
        if not isinstance(exc, TransportError):
            _send_error_best_effort(transport, chan, type(exc).__name__, str(exc))
        raise


def _resume_worker(worker, checkpoint_path: Path, preset: str,
                   resume: bool) -> tuple[int, int]:
    if not resume:
        return 0, 0
    if not checkpoint_path.exists():
        raise ConfigurationError(
            f"resume requested but no checkpoint at {checkpoint_path}")
    _, tensors = load_checkpoint(checkpoint_path, expect_preset=preset)
    return worker.load_state(tensors)


def _save_abort_state(cfg: PartyConfig, worker, progress: _Progress,
                      checkpoint_path: Path) -> None:
    try:
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        aborted = checkpoint_path.with_suffix(checkpoint_path.suffix + ".aborted")
        save_checkpoint(aborted, cfg.preset,
                        worker.state_tensors(progress.epoch, progress.global_step))
    except Exception:
        pass


def _summary(role: str, progress: _Progress, worker) -> dict:
    return {
        "role": role,
        "epochs_done": progress.epoch,
        "steps_done": progress.global_step,
        "aligned": len(progress.aligned or []),
        "epoch_reports": progress.epoch_reports,
        "worker": worker,
    }


def _model_config(cfg: PartyConfig) -> ModelConfig:
    return config_for(cfg.preset)


def run_bottom(cfg: PartyConfig, images, psk: bytes,
               transport: FrameTransport | None = None,
               record_digests: bool = False) -> dict:
    """Image-party entry point. Connects to the top party over TCP
    unless a transport is injected (loopback runs inject)."""
    worker = BottomWorker(_model_config(cfg), cfg.seed, images,
                          cfg.optimizer, cfg.lr, cfg.momentum)
    worker.record_digests = record_digests
    epoch, step = _resume_worker(worker, cfg.bottom_checkpoint, cfg.preset, cfg.resume)
    progress = _Progress(epoch=epoch, global_step=step)
    if transport is not None:
        try:
            _bottom_session(transport, cfg, psk, worker, progress)
        finally:
            transport.close()
        return _summary("bottom", progress, worker)
    for attempt in (0, 1):
        try:
            t = tcp_connect(cfg.host, cfg.port, cfg.timeout)
        except TransportError:
            if attempt == 1:
                _save_abort_state(cfg, worker, progress, cfg.bottom_checkpoint)
                raise
            continue
        try:
            _bottom_session(t, cfg, psk, worker, progress)
            return _summary("bottom", progress, worker)
        except TransportError:
            if attempt == 1:
                _save_abort_state(cfg, worker, progress, cfg.bottom_checkpoint)
                raise
        finally:
            t.close()
    raise ProtocolError("unreachable")


def run_top(cfg: PartyConfig, labels, psk: bytes,
            transport: FrameTransport | None = None,
            record_digests: bool = False) -> dict:
    """Label-party entry point. Listens for the bottom party over TCP
    unless a transport is injected."""
    worker = TopWorker(_model_config(cfg), cfg.seed, labels,
                       cfg.optimizer, cfg.lr, cfg.momentum)
    worker.record_digests = record_digests
    epoch, step = _resume_worker(worker, cfg.top_checkpoint, cfg.preset, cfg.resume)
    progress = _Progress(epoch=epoch, global_step=step)
    if transport is not None:
        try:
            _top_session(transport, cfg, psk, worker, progress)
        finally:
            transport.close()
        return _summary("top", progress, worker)
    listener = TcpListener(cfg.host, cfg.port)
    try:
        for attempt in (0, 1):
            try:
                t = listener.accept(cfg.timeout)
            except TransportError:
                if attempt == 1:
                    _save_abort_state(cfg, worker, progress, cfg.top_checkpoint)
                    raise
                continue
            try:
                _top_session(t, cfg, psk, worker, progress)
                return _summary("top", progress, worker)
            except TransportError:
                if attempt == 1:
                    _save_abort_state(cfg, worker, progress, cfg.top_checkpoint)
                    raise
            finally:
                t.close()
    finally:
        listener.close()
    raise ProtocolError("unreachable")


def run_both(cfg: PartyConfig, images, labels, psk: bytes | None = None,
             record_digests: bool = False) -> dict:
    """Run both parties in one process over the loopback transport."""
    if psk is None:
        psk = secrets.token_bytes(32)
    pair = LoopbackPair(timeout=cfg.timeout)
    results: dict[str, dict] = {}
    errors: list[BaseException] = []

    def _drive(name: str, fn, *args) -> None:
        try:
            results[name] = fn(*args)
        except BaseException as exc:
            errors.append(exc)
            pair.close()

    threads = [
        threading.Thread(target=_drive, name="bottom",
                         args=("bottom", run_bottom, cfg, images, psk,
                               pair.bottom, record_digests)),
        threading.Thread(target=_drive, name="top",
                         args=("top", run_top, cfg, labels, psk,
                               pair.top, record_digests)),
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return {"bottom": results["bottom"], "top": results["top"],
            "audit": pair.audit}


def bench_comm(feature_counts, *, batch_size: int = 4, steps: int = 3,
               seed: int = 0, preset: str = "tiny") -> list[dict]:
    """Measure wire cost per step across boundary widths.

    Uses a synthetic in-memory dataset sized to give exactly ``steps``
    full batches, one epoch, loopback transport.
    """
    from .data import MemoryImageStore, MemoryLabelStore, gen_synthetic

    if steps < 1 or batch_size < 2:
        raise ConfigurationError("bench needs steps >= 1 and batch_size >= 2")
    rows = []
    for count in feature_counts:
        segments = scale_segments(int(count))
        model_cfg = config_for(preset, segments=segments)
        total = sum(segments)
        pairs = gen_synthetic(batch_size * steps, model_cfg.input_size, seed)
        images = MemoryImageStore(pairs, model_cfg.input_size)
        labels = MemoryLabelStore(pairs, model_cfg.input_size)
        with tempfile.TemporaryDirectory() as tmp:
            cfg = PartyConfig(role="both", preset=preset, batch_size=batch_size,
                              epochs=1, seed=seed, out_dir=tmp).validate()
            begin = time.perf_counter()
            result = _run_both_with_model_config(cfg, model_cfg, images, labels)
            elapsed = time.perf_counter() - begin
        up = [r for r in result["audit"] if r.msg_type == MsgType.BATCH_ACTIVATIONS]
        down = [r for r in result["audit"] if r.msg_type == MsgType.BATCH_GRADIENTS]
        frame_overhead = 16 + 16
        bytes_up = sum(r.payload_len + frame_overhead for r in up)
        bytes_down = sum(r.payload_len + frame_overhead for r in down)
        per_step = (bytes_up + bytes_down) / steps
        rows.append({
            "features": total,
            "steps": steps,
            "payload_bytes_up": up[0].payload_len if up else 0,
            "payload_bytes_down": down[0].payload_len if down else 0,
            "bytes_per_step": per_step,
            "bytes_per_epoch": float(bytes_up + bytes_down),
            "steps_per_s": steps / elapsed if elapsed > 0 else float("inf"),
        })
    return rows


def _run_both_with_model_config(cfg: PartyConfig, model_cfg: ModelConfig,
                                images, labels) -> dict:
    """run_both with an explicit ModelConfig (bench sweeps segment
    widths that no named preset carries)."""
    psk = secrets.token_bytes(32)
    pair = LoopbackPair(timeout=cfg.timeout)
    results: dict[str, dict] = {}
    errors: list[BaseException] = []

    def _bottom() -> None:
        try:
            worker = BottomWorker(model_cfg, cfg.seed, images,
                                  cfg.optimizer, cfg.lr, cfg.momentum)
            progress = _Progress()
            try:
                _bottom_session(pair.bottom, cfg, psk, worker, progress)
            finally:
                pair.bottom.close()
            results["bottom"] = _summary("bottom", progress, worker)
        except BaseException as exc:
            errors.append(exc)
            pair.close()

    def _top() -> None:
        try:
            worker = TopWorker(model_cfg, cfg.seed, labels,
                               cfg.optimizer, cfg.lr, cfg.momentum)
            progress = _Progress()
            try:
                _top_session(pair.top, cfg, psk, worker, progress)
            finally:
                pair.top.close()
            results["top"] = _summary("top", progress, worker)
        except BaseException as exc:
            errors.append(exc)
            pair.close()

    threads = [threading.Thread(target=_bottom, name="bottom"),
               threading.Thread(target=_top, name="top")]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return {"bottom": results["bottom"], "top": results["top"], "audit": pair.audit}
