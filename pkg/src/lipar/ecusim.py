"""In-vehicle deployment simulator.

The central electronic module (CEM) turns traffic into windows, posts one
task per branch to the mailbox of the ECU the plan chose for it, waits for
all results, then applies the fusion head and logit averaging itself.

Each ECU is a worker thread draining a FIFO mailbox. Timing is virtual: a
task starts when both it has been dispatched and the device is free, and
takes ``base_ns + per_mb_ns * branch_total_mb``. A window arrives at the CEM
at ``index * arrival_interval_ns`` and its branch tasks are dispatched
``preprocess_ns`` later; both instants are traced, so detection delay can be
read with or without the CEM's own preprocessing. Actual numerics run on the
worker threads, so predictions are exactly those of the monolithic model.
"""
from __future__ import annotations

import csv
import queue
import threading
import time
import warnings
from concurrent.futures import Future, wait
from dataclasses import dataclass, field

import numpy as np

from .allocator import DeviceProfile
from .autodiff.functional import softmax
from .autodiff.tensor import no_grad
from .candata import IMAGE_SHAPE, WINDOW_MESSAGES, Label, Window, feature_matrix, window_label
from .metrics import report_from_scores
from .model import FUSION, SPATIAL, TEMPORAL, branch_forward, combine_logits, fuse_spatial, size_report


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class DelayModel:
    base_ns: int = 0
    per_mb_ns: float = 0.0

    def cost_ns(self, size_mb):
        return int(self.base_ns + round(self.per_mb_ns * size_mb))


@dataclass
class Scenario:
    delays: dict = field(default_factory=dict)  # device id -> DelayModel
    failed: frozenset = frozenset()  # device ids that never answer
    arrival_interval_ns: int = 0  # virtual gap between window dispatches
    fusion_ns: int = 0
    timeout_s: float = 5.0
    preprocess_ns: int = 0  # CEM time from window arrival to branch dispatch

    @classmethod
    def from_dict(cls, d):
        delays = {k: DelayModel(int(v.get("base_ns", 0)), float(v.get("per_mb_ns", 0.0))) for k, v in d.get("delays", {}).items()}
        return cls(delays, frozenset(d.get("failed", [])), int(d.get("arrival_interval_ns", 0)),
                   int(d.get("fusion_ns", 0)), float(d.get("timeout_s", 5.0)), int(d.get("preprocess_ns", 0)))


@dataclass
class _Task:
    window: int
    branch: str
    dispatch_ns: int
    size_mb: float
    compute: object
    future: Future


@dataclass
class BranchResult:
    output: np.ndarray
    start_ns: int
    complete_ns: int


class SimDevice:
    """One ECU: processes its mailbox strictly in order, one task at a time."""

    def __init__(self, profile, delay=None, failed=False):
        self.profile = profile
        self.delay = delay or DelayModel()
        self.failed = failed
        self.mailbox = queue.Queue()
        self.free_at = 0
        self.busy = False
        self._thread = threading.Thread(target=self._run, name=f"ecu-{profile.id}", daemon=True)

    @property
    def id(self):
        return self.profile.id

    def start(self):
        self._thread.start()
        return self

    def stop(self):
        self.mailbox.put(None)
        self._thread.join(timeout=5)

    def post(self, task):
        self.mailbox.put(task)
        return task.future

    def _run(self):
        while True:
            task = self.mailbox.get()
            if task is None:
                return
            if self.failed:
                continue  # dropped: the CEM will time out
            self.busy = True
            try:
                with no_grad():
                    out = task.compute()
                start = max(task.dispatch_ns, self.free_at)
                complete = start + self.delay.cost_ns(task.size_mb)
                self.free_at = complete
                task.future.set_result(BranchResult(out, start, complete))
            except Exception as exc:  # surfaced to the CEM through the future
                task.future.set_exception(exc)
            finally:
                self.busy = False


@dataclass
class BranchEvent:
    window: int
    branch: str
    device: str
    dispatch_ns: int
    start_ns: int | None
    complete_ns: int | None
    status: str = "ok"


@dataclass
class WindowRecord:
    window: int
    true_label: int | None
    predicted: int | None
    fusion_ns: int | None
    wall_latency_s: float
    probs: np.ndarray | None = None
    arrival_ns: int = 0

    @property
    def timed_out(self):
        return self.predicted is None


@dataclass
class SimTrace:
    events: list = field(default_factory=list)
    windows: list = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def add(self, events, record):
        with self._lock:
            self.events.extend(events)
            self.windows.append(record)

    @property
    def timeouts(self):
        return [e for e in self.events if e.status == "timeout"]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["window", "branch", "dispatch_ns", "complete_ns", "device", "start_ns", "status", "arrival_ns"])
            arrivals = {r.window: r.arrival_ns for r in self.windows}
            for e in self.events:
                w.writerow([e.window, e.branch, e.dispatch_ns, "" if e.complete_ns is None else e.complete_ns, e.device,
                            "" if e.start_ns is None else e.start_ns, e.status, arrivals.get(e.window, "")])
            for r in self.windows:
                w.writerow([r.window, FUSION, "", "" if r.fusion_ns is None else r.fusion_ns, "cem", "",
                            "timeout" if r.timed_out else "ok", r.arrival_ns])


@dataclass
class SimResult:
    trace: SimTrace
    report: object
    predictions: list


class EcuSimulator:
    """CEM plus its ECUs for one plan; use as a context manager."""

    def __init__(self, params, plan, devices, scenario=None):
        self.params = params
        self.scenario = scenario or Scenario()
        units = [b for b in (*SPATIAL, TEMPORAL) if b in params.unit_names]
        missing = [b for b in units if b not in plan.assignments]
        if missing:
            raise SimulationError("unassigned: " + ", ".join(missing))
        profiles = {d.id: (d if isinstance(d, DeviceProfile) else d.profile) for d in devices}
        unknown = sorted({plan.assignments[b] for b in units} - set(profiles))
        if unknown:
            raise SimulationError("plan names unknown devices: " + ", ".join(unknown))
        self.units = units
        self.devices = {
            dev_id: SimDevice(p, self.scenario.delays.get(dev_id), dev_id in self.scenario.failed)
            for dev_id, p in profiles.items() if dev_id in plan.assignments.values()
        }
        self.host = {b: self.devices[plan.assignments[b]] for b in units}
        sizes = size_report(params)
        self.size_mb = {b: sizes.unit(b).total_mb for b in units}
        self.trace = SimTrace()

    def __enter__(self):
        for d in self.devices.values():
            d.start()
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        for d in self.devices.values():
            d.stop()

    @property
    def all_busy(self):
        return all(d.busy for d in self.devices.values())

    def process(self, index, window):
        """Run one window through the distributed path and record it."""
        t0 = time.perf_counter()
        arrival = index * self.scenario.arrival_interval_ns
        dispatch = arrival + self.scenario.preprocess_ns
        image = window.image[None]
        seq = np.ascontiguousarray(window.image.reshape(1, 27, 9).transpose(1, 0, 2))
        futures = {}
        for b in self.units:
            x = seq if b == TEMPORAL else image
            task = _Task(index, b, dispatch, self.size_mb[b],
                         (lambda b=b, x=x: branch_forward(self.params, b, x)), Future())
            futures[b] = self.host[b].post(task)
        done, _ = wait(list(futures.values()), timeout=self.scenario.timeout_s)
        events, results = [], {}
        for b, fut in futures.items():
            dev = self.host[b].id
            if fut in done:
                r = fut.result()
                results[b] = r
                events.append(BranchEvent(index, b, dev, dispatch, r.start_ns, r.complete_ns))
            else:
                events.append(BranchEvent(index, b, dev, dispatch, None, None, "timeout"))
        true = None if window.label is None else int(window.label)
        if len(results) < len(self.units):
            rec = WindowRecord(index, true, None, None, time.perf_counter() - t0, arrival_ns=arrival)
        else:
            with no_grad():
                logits = fuse_spatial(self.params, [results[b].output for b in SPATIAL])
                if TEMPORAL in results:
                    logits = combine_logits(logits, results[TEMPORAL].output)
            probs = softmax(logits.data)[0]
            fusion_ns = max(r.complete_ns for r in results.values()) + self.scenario.fusion_ns
            rec = WindowRecord(index, true, int(np.argmax(probs)), fusion_ns, time.perf_counter() - t0, probs, arrival)
        self.trace.add(events, rec)
        return rec


def run_simulation(params, plan, windows, devices, scenario=None):
    """Distributed inference over ``windows``; returns the trace and an evaluation of completed windows."""
    with EcuSimulator(params, plan, devices, scenario) as sim:
        records = [sim.process(i, w) for i, w in enumerate(windows)]
    done = [r for r in records if not r.timed_out]
    report = None
    if done:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            report = report_from_scores(np.array([r.true_label for r in done]), np.stack([r.probs for r in done]))
    return SimResult(sim.trace, report, [r.predicted for r in records])


@dataclass
class DetectionEvent:
    window: int
    label: Label | None
    latency_s: float


def stream_detect(params, plan, records, devices, scenario=None, trace=None):
    """Yield one detection per 27 records from an iterable of CanRecords.

    The CEM only pulls the next record once the current window's branch
    results are back, so a slow ECU set throttles the reader. A trailing
    partial window is dropped with a warning. Pass a :class:`SimTrace` as
    ``trace`` to collect the branch timings.
    """
    with EcuSimulator(params, plan, devices, scenario) as sim:
        if trace is not None:
            sim.trace = trace
        buf = []
        index = 0
        for rec in records:
            buf.append(rec)
            if len(buf) < WINDOW_MESSAGES:
                continue
            feats = feature_matrix(buf)
            window = Window(feats.reshape(IMAGE_SHAPE), window_label([r.label for r in buf]), index * WINDOW_MESSAGES)
            buf = []
            out = sim.process(index, window)
            yield DetectionEvent(index, None if out.timed_out else Label(out.predicted), out.wall_latency_s)
            index += 1
        if buf:
            warnings.warn(f"stream ended mid-window; discarded {len(buf)} trailing records", stacklevel=2)
