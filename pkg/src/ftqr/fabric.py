"""Deterministic simulated message-passing runtime with fail-stop faults.

Logical processes ("ranks") run in worker threads, but exactly one thread
executes at any time: a baton scheduler grants turns in fixed round-robin
rank order at every message boundary, so a run is a pure function of
(program, P, plan) and traces are byte-identical across executions.

Failure model:
  * a KillEvent stops one rank at a declared (panel, phase, step, point)
    checkpoint; the rank halts and never sends again (fail-stop),
  * failures are observed only when a communication involves the dead rank;
    the caller receives FailedPeerError and decides what to do,
  * respawn() creates a replacement that keeps the dead process's rank and
    starts with empty volatile state; the program sees is_respawn=True plus
    the point its predecessor died at,
  * survivor state published via publish_state() can be read by a
    replacement through fetch_state() without the survivor's participation,
    the moral equivalent of one-sided RMA access to retained redundancy
    data. The fetch blocks until the survivor's progress cursor covers the
    requested extent and is accounted as a single RECOVER trace event.

Trace export is line-delimited, one event per line, fields in fixed order:
`clock kind rank peer panel phase step bytes payload_tag`, `-` for absent
fields.
"""

import threading
from collections import deque
from dataclasses import dataclass, field

import numpy as np

PHASE_TSQR = "TSQR"
PHASE_TRAILING = "TRAILING"
PHASES = (PHASE_TSQR, PHASE_TRAILING)

BEFORE_EXCHANGE = "BEFORE_EXCHANGE"
AFTER_EXCHANGE = "AFTER_EXCHANGE"
POINTS = (BEFORE_EXCHANGE, AFTER_EXCHANGE)


class FabricError(Exception):
    pass


class FailedPeerError(FabricError):
    """A communication involved a failed rank."""

    def __init__(self, peer):
        super().__init__(f"peer rank {peer} has failed")
        self.peer = peer


class DeadlockError(FabricError):
    pass


class ProtocolError(FabricError):
    pass


class UnrecoverableError(FabricError):
    """A simulated failure the running algorithm cannot survive."""


@dataclass(frozen=True)
class KillEvent:
    rank: int
    panel: int
    phase: str
    step: int
    point: str


@dataclass(frozen=True)
class FaultPlan:
    events: tuple = ()

    @staticmethod
    def of(events):
        return FaultPlan(events=tuple(events))

    def validate(self, P):
        seen_ranks = set()
        prev_key = None
        for ev in self.events:
            if not 0 <= ev.rank < P:
                raise ProtocolError(f"kill event rank {ev.rank} out of range")
            if ev.phase not in PHASES:
                raise ProtocolError(f"kill event phase {ev.phase} unknown")
            if ev.point not in POINTS:
                raise ProtocolError(f"kill event point {ev.point} unknown")
            if ev.rank in seen_ranks:
                raise ProtocolError(f"rank {ev.rank} killed more than once")
            seen_ranks.add(ev.rank)
            key = (ev.panel, PHASES.index(ev.phase), ev.step)
            if prev_key is not None and key < prev_key:
                raise ProtocolError("kill events not sorted by (panel, phase, step)")
            prev_key = key
        # Both members of a buddy pair must never be down at the same step:
        # the survivor serves recovery.
        by_key = {}
        for ev in self.events:
            key = (ev.panel, ev.phase, ev.step)
            for other in by_key.get(key, ()):
                if other.rank ^ ev.rank == (1 << ev.step):
                    raise ProtocolError(
                        f"ranks {other.rank} and {ev.rank} are buddies at step "
                        f"{ev.step}; at most one may fail there")
            by_key.setdefault(key, []).append(ev)


@dataclass(frozen=True)
class TraceEvent:
    clock: int
    kind: str
    rank: int
    peer: int = None
    panel: int = None
    phase: str = None
    step: int = None
    bytes: int = 0
    payload_tag: str = None

    def line(self):
        def fmt(v):
            return "-" if v is None else str(v)

        return (f"{self.clock} {self.kind} {self.rank} {fmt(self.peer)} "
                f"{fmt(self.panel)} {fmt(self.phase)} {fmt(self.step)} "
                f"{self.bytes} {fmt(self.payload_tag)}")


@dataclass
class Outcome:
    results: list
    trace: list

    def trace_lines(self):
        return [ev.line() for ev in self.trace]

    def write_trace(self, path):
        with open(path, "w") as fh:
            for ev in self.trace:
                fh.write(ev.line() + "\n")


def payload_nbytes(payload):
    """Byte count of a message payload: 8 per float64 entry, 0 for markers."""
    if payload is None:
        return 0
    if isinstance(payload, np.ndarray):
        return 8 * payload.size
    if isinstance(payload, (tuple, list)):
        return sum(payload_nbytes(p) for p in payload)
    raise ProtocolError(f"unsupported payload type {type(payload)!r}")


def _copy_payload(payload):
    if payload is None:
        return None
    if isinstance(payload, np.ndarray):
        return payload.copy()
    return tuple(_copy_payload(p) for p in payload)


class _Killed(Exception):
    def __init__(self, event):
        self.event = event


class _Aborted(Exception):
    pass


@dataclass
class _Exchange:
    initiator: int
    payload: object
    done: bool = False
    reply: object = None


@dataclass
class _Proc:
    rank: int
    thread: object = None
    go: object = field(default_factory=threading.Event)
    state: str = "ready"  # ready | waiting | finished | dead | crashed
    wait_pred: object = None
    result: object = None
    error: object = None
    abort: bool = False
    is_respawn: bool = False
    death_point: object = None
    published: object = None
    wait_info: str = ""


class Fabric:
    """One simulated run; create, call run(), inspect the Outcome."""

    def __init__(self, program, P, plan=None):
        if P < 1 or (P & (P - 1)) != 0:
            raise ProtocolError(f"P must be a power of two >= 1, got {P}")
        self.program = program
        self.P = P
        self.plan = plan or FaultPlan()
        self.plan.validate(P)
        self._fired = set()
        self._clock = 0
        self.trace = []
        self._procs = [None] * P
        self._channels = {}
        self._exchanges = {}
        self._sched_evt = threading.Event()
        self._failed = set()
        self._death_points = {}

    # -- scheduling ---------------------------------------------------------

    def _spawn(self, rank, is_respawn=False, death_point=None):
        proc = _Proc(rank=rank, is_respawn=is_respawn, death_point=death_point)
        proc.thread = threading.Thread(
            target=self._body, args=(proc,), daemon=True,
            name=f"rank{rank}" + ("r" if is_respawn else ""))
        self._procs[rank] = proc
        proc.thread.start()
        return proc

    def _body(self, proc):
        ctx = Context(self, proc)
        try:
            self._wait_turn(proc)
            proc.result = self.program(ctx)
            proc.state = "finished"
        except _Killed as k:
            proc.state = "dead"
            self._failed.add(proc.rank)
            self._death_points[proc.rank] = (k.event.panel, k.event.phase,
                                             k.event.step, k.event.point)
            self._emit("FAIL", proc.rank, panel=k.event.panel,
                       phase=k.event.phase, step=k.event.step,
                       payload_tag=k.event.point)
        except _Aborted:
            proc.state = "crashed"
        except BaseException as exc:  # surfaced to run()'s caller
            proc.state = "crashed"
            proc.error = exc
        finally:
            self._sched_evt.set()

    def _wait_turn(self, proc):
        proc.go.clear()
        self._sched_evt.set()
        proc.go.wait()
        if proc.abort:
            raise _Aborted()

    def _yield_turn(self, proc, pred=None, info=""):
        """Give the baton back; with pred, sleep until it evaluates true."""
        if pred is None:
            proc.state = "ready"
        else:
            proc.state = "waiting"
            proc.wait_pred = pred
            proc.wait_info = info
        self._wait_turn(proc)
        proc.wait_pred = None
        proc.wait_info = ""

    def _runnable(self, proc):
        if proc.state == "ready":
            return True
        return proc.state == "waiting" and proc.wait_pred()

    def run(self):
        for rank in range(self.P):
            self._spawn(rank)
        cursor = 0
        try:
            while True:
                self._sched_evt.wait()
                self._sched_evt.clear()
                crashed = [p for p in self._procs if p.state == "crashed"]
                if crashed:
                    raise crashed[0].error or FabricError(
                        f"rank {crashed[0].rank} crashed")
                if any(p.state == "running" for p in self._procs):
                    # A freshly spawned thread signalled while the baton is
                    # still held; wait for the holder to yield.
                    continue
                granted = False
                for off in range(self.P):
                    proc = self._procs[(cursor + off) % self.P]
                    if self._runnable(proc):
                        cursor = (cursor + off + 1) % self.P
                        proc.state = "running"
                        proc.go.set()
                        granted = True
                        break
                if granted:
                    continue
                states = [p.state for p in self._procs]
                if all(s in ("finished", "dead") for s in states):
                    if "dead" in states:
                        # Quiescent with unreplaced dead ranks: nobody will
                        # ever observe them through a message, so REBUILD
                        # them here and let their recovery path run.
                        for proc in self._procs:
                            if proc.state == "dead":
                                self.respawn(proc.rank)
                                break
                        continue
                    break
                waiting = [p for p in self._procs if p.state == "waiting"]
                if waiting and all(s in ("waiting", "finished", "dead")
                                   for s in states):
                    detail = ", ".join(
                        f"rank {p.rank}: {p.wait_info or 'blocked'}"
                        for p in waiting)
                    raise DeadlockError(
                        f"no runnable process; blocked: {detail}")
                # A thread is mid-transition; wait for its signal.
        finally:
            self._shutdown()
        return Outcome(results=[p.result for p in self._procs],
                       trace=self.trace)

    def _shutdown(self):
        for proc in self._procs:
            if proc is None or proc.thread is None:
                continue
            if proc.state not in ("finished", "dead", "crashed"):
                proc.abort = True
                proc.go.set()
            proc.thread.join(timeout=5.0)

    # -- tracing ------------------------------------------------------------

    def _emit(self, kind, rank, peer=None, panel=None, phase=None, step=None,
              nbytes=0, payload_tag=None):
        ev = TraceEvent(clock=self._clock, kind=kind, rank=rank, peer=peer,
                        panel=panel, phase=phase, step=step, bytes=nbytes,
                        payload_tag=payload_tag)
        self._clock += 1
        self.trace.append(ev)
        return ev

    # -- rank-facing operations (called with the baton held) ----------------

    def _check_rank(self, rank):
        if not 0 <= rank < self.P:
            raise ProtocolError(f"rank {rank} out of range")

    def is_failed(self, rank):
        self._check_rank(rank)
        return rank in self._failed

    def send(self, proc, dst, tag, payload, panel=None, phase=None, step=None):
        self._check_rank(dst)
        if dst in self._failed:
            raise FailedPeerError(dst)
        key = (proc.rank, dst, tag)
        self._channels.setdefault(key, deque()).append(_copy_payload(payload))
        self._emit("SEND", proc.rank, peer=dst, panel=panel, phase=phase,
                   step=step, nbytes=payload_nbytes(payload), payload_tag=tag)
        self._yield_turn(proc)

    def recv(self, proc, src, tag, panel=None, phase=None, step=None):
        self._check_rank(src)
        key = (src, proc.rank, tag)
        while True:
            queue = self._channels.get(key)
            if queue:
                payload = queue.popleft()
                self._emit("RECV", proc.rank, peer=src, panel=panel,
                           phase=phase, step=step,
                           nbytes=payload_nbytes(payload), payload_tag=tag)
                return payload
            if src in self._failed:
                raise FailedPeerError(src)
            self._yield_turn(
                proc,
                pred=lambda: self._channels.get(key) or src in self._failed,
                info=f"recv(src={src}, tag={tag})")

    def sendrecv(self, proc, peer, tag, payload, panel=None, phase=None,
                 step=None):
        self._check_rank(peer)
        if peer == proc.rank:
            raise ProtocolError("sendrecv with self")
        if peer in self._failed:
            raise FailedPeerError(peer)
        key = (min(proc.rank, peer), max(proc.rank, peer), tag)
        other = self._exchanges.get(key)
        if other is not None and other.initiator == peer and not other.done:
            # Complete the exchange posted by the peer.
            self._exchanges.pop(key)
            other.reply = _copy_payload(payload)
            other.done = True
            nbytes = payload_nbytes(payload) + payload_nbytes(other.payload)
            self._emit("EXCHANGE", min(proc.rank, peer),
                       peer=max(proc.rank, peer), panel=panel, phase=phase,
                       step=step, nbytes=nbytes, payload_tag=tag)
            got = other.payload
            self._yield_turn(proc)
            return got
        entry = _Exchange(initiator=proc.rank, payload=_copy_payload(payload))
        self._exchanges[key] = entry
        self._yield_turn(
            proc,
            pred=lambda: entry.done or peer in self._failed,
            info=f"sendrecv(peer={peer}, tag={tag})")
        if entry.done:
            return entry.reply
        # Peer died before matching; withdraw the half so a retry reposts.
        if self._exchanges.get(key) is entry:
            self._exchanges.pop(key)
        raise FailedPeerError(peer)

    def checkpoint(self, proc, panel, phase, step, point):
        for i, ev in enumerate(self.plan.events):
            if i in self._fired:
                continue
            if (ev.rank == proc.rank and ev.panel == panel
                    and ev.phase == phase and ev.step == step
                    and ev.point == point):
                self._fired.add(i)
                raise _Killed(ev)

    def compute(self, proc, tag, panel=None, phase=None, step=None, nbytes=0):
        self._emit("COMPUTE", proc.rank, panel=panel, phase=phase, step=step,
                   nbytes=nbytes, payload_tag=tag)

    def respawn(self, rank):
        self._check_rank(rank)
        if rank not in self._failed:
            raise ProtocolError(f"respawn of live rank {rank}")
        self._failed.discard(rank)
        point = self._death_points.get(rank)
        panel = phase = step = None
        if point is not None:
            panel, phase, step, _ = point
        self._emit("RESPAWN", rank, panel=panel, phase=phase, step=step,
                   payload_tag="rebuild")
        self._spawn(rank, is_respawn=True, death_point=point)

    def publish_state(self, proc, state):
        proc.published = state

    def fetch_state(self, proc, peer, min_cursor, panel=None, phase=None,
                    step=None):
        """One-sided read of a survivor's published state for recovery.

        Blocks until the peer's progress cursor reaches min_cursor. Exactly
        one RECOVER event is emitted, carrying the number of bytes the
        replacement pulled.
        """
        self._check_rank(peer)

        def ready():
            if peer in self._failed:
                return True
            pub = self._procs[peer].published
            return pub is not None and pub.cursor >= min_cursor

        if not ready():
            self._yield_turn(proc, pred=ready,
                             info=f"fetch_state(peer={peer}, "
                                  f"cursor>={min_cursor})")
        if peer in self._failed:
            raise UnrecoverableError(
                f"recovery source rank {peer} is itself failed")
        pub = self._procs[peer].published
        self._emit("RECOVER", proc.rank, peer=peer, panel=panel, phase=phase,
                   step=step, nbytes=pub.nbytes_upto(min_cursor),
                   payload_tag="bundle")
        return pub


class Context:
    """Per-rank handle the program uses for all fabric interaction."""

    def __init__(self, fabric, proc):
        self._fabric = fabric
        self._proc = proc
        self.rank = proc.rank
        self.P = fabric.P
        self.is_respawn = proc.is_respawn
        self.death_point = proc.death_point

    def send(self, dst, tag, payload, **scope):
        self._fabric.send(self._proc, dst, tag, payload, **scope)

    def recv(self, src, tag, **scope):
        return self._fabric.recv(self._proc, src, tag, **scope)

    def sendrecv(self, peer, tag, payload, **scope):
        return self._fabric.sendrecv(self._proc, peer, tag, payload, **scope)

    def checkpoint(self, panel, phase, step, point):
        self._fabric.checkpoint(self._proc, panel, phase, step, point)

    def compute(self, tag, **scope):
        self._fabric.compute(self._proc, tag, **scope)

    def is_failed(self, rank):
        return self._fabric.is_failed(rank)

    def respawn(self, rank):
        self._fabric.respawn(rank)

    def publish_state(self, state):
        self._fabric.publish_state(self._proc, state)

    def fetch_state(self, peer, min_cursor, **scope):
        return self._fabric.fetch_state(self._proc, peer, min_cursor, **scope)


def run(program, P, plan=None):
    """Execute P logical processes to completion; deterministic."""
    return Fabric(program, P, plan=plan).run()
