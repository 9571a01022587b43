"""Branch-to-ECU assignment from device idle rates and branch memory sizes.

A device's availability U combines its processor/memory idle rates with a
risk rating R; a branch's occupation O on a device combines the branch's
calculation rate (activation share of its size) with the share of the
device's memory it would take. A branch may run on a device iff U >= O and
the branch fits (m < 1).
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

FUSION_UNIT = "fusion"
CEM = "cem"


def _natural_key(s):
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", str(s))]


@dataclass(frozen=True)
class DeviceProfile:
    id: str
    P: float
    M: float
    R: int = 1
    total_memory_mb: float = 1.0

    def __post_init__(self):
        if not 0 < self.P <= 1:
            raise ValueError(f"device {self.id}: processor idle rate P={self.P} outside (0, 1]")
        if not 0 < self.M <= 1:
            raise ValueError(f"device {self.id}: memory idle rate M={self.M} outside (0, 1]")
        if self.R < 1:
            raise ValueError(f"device {self.id}: importance index R={self.R} must be >= 1")
        if self.total_memory_mb <= 0:
            raise ValueError(f"device {self.id}: total memory must be positive")

    @classmethod
    def from_dict(cls, d):
        return cls(str(d["id"]), float(d["P"]), float(d["M"]), d.get("R", 1), float(d.get("total_memory_mb", 1.0)))


@dataclass(frozen=True)
class BranchProfile:
    id: str
    fwd_bwd_mb: float
    param_mb: float
    total_mb: float | None = None

    def __post_init__(self):
        if self.fwd_bwd_mb < 0 or self.param_mb < 0:
            raise ValueError(f"branch {self.id}: sizes must be non-negative")
        if self.total_mb is None:
            object.__setattr__(self, "total_mb", self.fwd_bwd_mb + self.param_mb)
        elif abs(self.total_mb - (self.fwd_bwd_mb + self.param_mb)) > 0.01 + 1e-12:
            raise ValueError(f"branch {self.id}: total {self.total_mb} != fwd/bwd + params")

    @classmethod
    def from_dict(cls, d):
        total = d.get("total_mb")
        return cls(str(d["id"]), float(d["fwd_bwd_mb"]), float(d["param_mb"]), None if total is None else float(total))


def idle_rate(P, M):
    """Harmonic mean of processor and memory idle rates."""
    if P + M == 0:
        raise ValueError("idle_rate: P + M is zero")
    return 2.0 * P * M / (P + M)


def availability(P, M, R, alpha=1):
    """Availability index U, closed form."""
    a2 = float(alpha) ** 2
    den = a2 * (P + M) + 2.0 * P * M * R
    if den == 0:
        raise ValueError("availability: zero denominator")
    return 2.0 * (1.0 + a2) * P * M / den


def availability_fmeasure(P, M, R, alpha=1):
    """Same index written as a weighted F-measure of S and 1/R."""
    s = idle_rate(P, M)
    a2 = float(alpha) ** 2
    den = a2 / R + s
    if den == 0:
        raise ValueError("availability: zero denominator")
    return (1.0 + a2) * s / R / den


def calc_rate(branch):
    """Fraction of a branch's memory that is activations."""
    if branch.total_mb <= 0:
        raise ValueError(f"calc_rate: branch {branch.id} has zero total size")
    return branch.fwd_bwd_mb / branch.total_mb


def occupation(c, m, beta=2):
    b2 = float(beta) ** 2
    den = b2 * m + c
    if den == 0:
        raise ValueError("occupation: zero denominator")
    return (1.0 + b2) * c * m / den


def memory_ratio(branch, device):
    """Share of device memory the branch needs; values >= 1 mean it cannot fit."""
    if device.total_memory_mb <= 0:
        raise ValueError(f"device {device.id}: total memory must be positive")
    return branch.total_mb / device.total_memory_mb


@dataclass(frozen=True)
class PairScore:
    device: str
    branch: str
    U: float
    c: float
    m: float
    O: float | None
    eligible: bool

    def to_dict(self):
        r = lambda v: None if v is None else round(v, 4)
        return {"device": self.device, "branch": self.branch, "U": r(self.U), "c": r(self.c), "m": r(self.m),
                "O": r(self.O), "eligible": self.eligible}


@dataclass
class AllocationPlan:
    assignments: dict = field(default_factory=dict)
    scores: list = field(default_factory=list)
    unassigned: list = field(default_factory=list)
    pinned: dict = field(default_factory=dict)
    alpha: int = 1
    beta: int = 2

    def score(self, branch, device):
        for s in self.scores:
            if s.branch == branch and s.device == device:
                return s
        raise KeyError((branch, device))

    def to_dict(self):
        return {"alpha": self.alpha, "beta": self.beta, "assignments": dict(sorted(self.assignments.items())),
                "pinned": self.pinned, "unassigned": list(self.unassigned), "scores": [s.to_dict() for s in self.scores]}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        scores = [PairScore(s["device"], s["branch"], s["U"], s["c"], s["m"], s["O"], s["eligible"]) for s in d.get("scores", [])]
        return cls(dict(d["assignments"]), scores, list(d.get("unassigned", [])), dict(d.get("pinned", {})),
                   d.get("alpha", 1), d.get("beta", 2))

    def table(self):
        head = f"{'branch':<10}{'device':<10}{'U':>8}{'c':>8}{'m':>8}{'O':>8}  eligible"
        lines = [head, "-" * len(head)]
        for s in self.scores:
            o = "-" if s.O is None else f"{s.O:.4f}"
            lines.append(f"{s.branch:<10}{s.device:<10}{s.U:>8.4f}{s.c:>8.4f}{s.m:>8.4f}{o:>8}  {'yes' if s.eligible else 'no'}")
        lines.append("")
        for b, d in sorted(self.assignments.items(), key=lambda kv: _natural_key(kv[0])):
            lines.append(f"{b} -> {d}")
        for b, d in self.pinned.items():
            lines.append(f"{b} -> {d} (pinned)")
        if self.unassigned:
            lines.append("unassigned: " + ", ".join(self.unassigned))
        return "\n".join(lines)


REPORT_DECIMALS = 4


def score_pairs(devices, branches, alpha=1, beta=2, precision=REPORT_DECIMALS):
    """Score every (device, branch) pair.

    ``precision`` rounds the intermediate rates c and m to the reported
    number of decimals before they are combined into O, so O is reproducible
    from the printed c and m. ``None`` keeps full precision.
    """
    q = (lambda v: v) if precision is None else (lambda v: round(v, precision))
    scores = []
    for b in branches:
        c = q(calc_rate(b)) if b.total_mb > 0 else 0.0
        for d in devices:
            u = availability(d.P, d.M, d.R, alpha)
            m = q(memory_ratio(b, d))
            if m >= 1:
                scores.append(PairScore(d.id, b.id, u, c, m, None, False))
                continue
            o = occupation(c, m, beta) if (c or m) else 0.0
            scores.append(PairScore(d.id, b.id, u, c, m, o, u >= o))
    return scores


def _check_params(devices, alpha, beta):
    if int(alpha) != alpha or alpha < 1 or int(beta) != beta or beta < 1:
        raise ValueError("alpha and beta must be positive integers")
    ids = [d.id for d in devices]
    if len(set(ids)) != len(ids):
        raise ValueError("device ids must be unique")


def _greedy(scores, devices, branch_ids, taken, assignments):
    by_pair = {(s.branch, s.device): s for s in scores}
    dev_order = sorted(devices, key=lambda d: (-_device_u(scores, d.id), _natural_key(d.id)))

    def branch_key(bid):
        os_ = [s.O for s in scores if s.branch == bid and s.O is not None]
        return (-(max(os_) if os_ else float("inf")), _natural_key(bid))

    unassigned = []
    for bid in sorted(branch_ids, key=branch_key):
        for d in dev_order:
            if d.id in taken:
                continue
            if by_pair[(bid, d.id)].eligible:
                assignments[bid] = d.id
                taken.add(d.id)
                break
        else:
            unassigned.append(bid)
    return sorted(unassigned, key=_natural_key)


def _device_u(scores, device_id):
    for s in scores:
        if s.device == device_id:
            return s.U
    return 0.0


def allocate(devices, branches, alpha=1, beta=2, precision=REPORT_DECIMALS):
    """Greedy one-branch-per-device assignment.

    Branches are visited by descending worst-case occupation, devices by
    descending availability; ties go to the lower id. The fusion head never
    leaves the central module.
    """
    devices = list(devices)
    _check_params(devices, alpha, beta)
    pinned = {b.id: CEM for b in branches if b.id == FUSION_UNIT}
    branches = [b for b in branches if b.id != FUSION_UNIT]
    scores = score_pairs(devices, branches, alpha, beta, precision)
    assignments = {}
    unassigned = _greedy(scores, devices, [b.id for b in branches], set(), assignments)
    return AllocationPlan(assignments, scores, unassigned, pinned, alpha, beta)


def reallocate(plan, devices, branches, alpha=1, beta=2, precision=REPORT_DECIMALS):
    """Re-score with fresh device profiles, moving only branches whose host no longer qualifies."""
    devices = list(devices)
    _check_params(devices, alpha, beta)
    pinned = {b.id: CEM for b in branches if b.id == FUSION_UNIT}
    branches = [b for b in branches if b.id != FUSION_UNIT]
    scores = score_pairs(devices, branches, alpha, beta, precision)
    by_pair = {(s.branch, s.device): s for s in scores}
    assignments, taken, pending = {}, set(), []
    for b in branches:
        host = plan.assignments.get(b.id)
        if host is not None and (b.id, host) in by_pair and by_pair[(b.id, host)].eligible and host not in taken:
            assignments[b.id] = host
            taken.add(host)
        else:
            pending.append(b.id)
    unassigned = _greedy(scores, devices, pending, taken, assignments)
    return AllocationPlan(assignments, scores, unassigned, pinned, alpha, beta)


def branches_from_size_report(report):
    """Branch profiles for every unit except the fusion head."""
    return [BranchProfile(u.name, u.fwd_bwd_mb, u.param_mb) for u in report.units if u.name != FUSION_UNIT]


def load_devices(path):
    with open(path) as fh:
        data = json.load(fh)
    items = data["devices"] if isinstance(data, dict) else data
    return [DeviceProfile.from_dict(d) for d in items]


def load_branches(path):
    with open(path) as fh:
        data = json.load(fh)
    items = data["branches"] if isinstance(data, dict) else data
    return [BranchProfile.from_dict(d) for d in items]
