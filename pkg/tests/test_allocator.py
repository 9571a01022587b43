import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipar.allocator import (
    AllocationPlan,
    BranchProfile,
    DeviceProfile,
    allocate,
    availability,
    availability_fmeasure,
    branches_from_size_report,
    calc_rate,
    idle_rate,
    memory_ratio,
    occupation,
    reallocate,
)

# per-branch sizes (fwd/bwd MB, param MB, total MB) as published for the reference model
REFERENCE = [
    BranchProfile("branch1", 0.08, 0.00, 0.09),
    BranchProfile("branch2", 0.23, 0.15, 0.37),
    BranchProfile("branch3", 0.14, 0.10, 0.24),
    BranchProfile("branch4", 0.01, 0.05, 0.06),
]
PUBLISHED_C = [0.8889, 0.6216, 0.5833, 0.1667]
PUBLISHED_O = [0.3203, 0.5472, 0.4535, 0.1230]

rate = st.floats(min_value=1e-3, max_value=1.0)


def _device_with_u(dev_id, u, memory=1.0):
    # P = M = x, R = 1, alpha = 1 gives U = 2x / (1 + x)
    x = u / (2.0 - u)
    return DeviceProfile(dev_id, x, x, 1, memory)


@pytest.mark.parametrize("P,M,expected", [(0.5, 0.5, 0.5), (1.0, 1.0, 1.0), (0.4, 0.8, 0.64 / 1.2)])
def test_idle_rate_examples(P, M, expected):
    assert idle_rate(P, M) == pytest.approx(expected, abs=1e-12)


def test_idle_rate_zero():
    with pytest.raises(ValueError):
        idle_rate(0.0, 0.0)


@given(rate, rate)
def test_idle_rate_properties(P, M):
    s = idle_rate(P, M)
    assert s == pytest.approx(idle_rate(M, P), rel=1e-15)
    assert min(P, M) - 1e-12 <= s <= max(P, M) + 1e-12
    assert idle_rate(P, P) == pytest.approx(P, rel=1e-12)


def test_availability_examples():
    assert availability(1, 1, 1, 1) == pytest.approx(1.0)
    assert availability(0.5, 0.5, 2, 1) == pytest.approx(0.5)


def test_availability_forms_agree_many():
    rng = np.random.default_rng(0)
    worst = 0.0
    for P, M, R, a in zip(rng.uniform(1e-3, 1, 2000), rng.uniform(1e-3, 1, 2000), rng.integers(1, 11, 2000), rng.integers(1, 5, 2000)):
        worst = max(worst, abs(availability(P, M, R, a) - availability_fmeasure(P, M, R, a)))
    assert worst <= 1e-12


@given(rate, rate, st.integers(1, 10), st.integers(1, 4), st.floats(1e-3, 0.5))
def test_availability_monotone(P, M, R, alpha, d):
    u = availability(P, M, R, alpha)
    if P + d <= 1:
        assert availability(P + d, M, R, alpha) > u
    if M + d <= 1:
        assert availability(P, M + d, R, alpha) > u
    assert availability(P, M, R + 1, alpha) < u


@pytest.mark.parametrize("branch,expected", list(zip(REFERENCE, PUBLISHED_C)))
def test_calc_rate_published(branch, expected):
    assert round(calc_rate(branch), 4) == expected


def test_calc_rate_edges():
    assert calc_rate(BranchProfile("b", 0.0, 0.5)) == 0
    with pytest.raises(ValueError):
        calc_rate(BranchProfile("b", 0.0, 0.0))


@pytest.mark.parametrize("branch,expected", list(zip(REFERENCE, PUBLISHED_O)))
def test_occupation_published(branch, expected):
    dev = DeviceProfile("ecu", 1, 1, 1, 1.0)
    plan = allocate([dev], [branch], beta=2)
    assert round(plan.score(branch.id, "ecu").O, 4) == expected
    # chained from the 4-decimal c, as printed
    m = memory_ratio(branch, dev)
    assert round(occupation(round(calc_rate(branch), 4), m, 2), 4) == expected


def test_occupation_full_precision_branch3():
    # unrounded c = 0.58333... lands just above the printed value
    b3 = REFERENCE[2]
    assert round(occupation(calc_rate(b3), 0.24, 2), 4) == 0.4536
    plan = allocate([DeviceProfile("ecu", 1, 1, 1, 1.0)], [b3], precision=None)
    assert plan.score("branch3", "ecu").O == pytest.approx(occupation(7 / 12, 0.24, 2), rel=1e-12)


@given(st.floats(1e-3, 1.0))
def test_occupation_symmetric_point(c):
    assert occupation(c, c, 1) == pytest.approx(c, rel=1e-12)


@given(st.floats(0, 1, allow_subnormal=False), st.floats(1e-3, 0.999), st.integers(1, 5), st.floats(1e-3, 0.2))
def test_occupation_monotone_and_bounded(c, m, beta, d):
    o = occupation(c, m, beta)
    assert 0 <= o <= 1 + 1e-12
    if c + d <= 1:
        assert occupation(c + d, m, beta) >= o * (1 - 1e-12)
    if m + d < 1:
        assert occupation(c, m + d, beta) >= o * (1 - 1e-12)


def test_occupation_zero_denominator():
    with pytest.raises(ValueError):
        occupation(0.0, 0.0, 2)


def test_memory_ratio_examples():
    dev = DeviceProfile("ecu", 1, 1, 1, 1.0)
    assert memory_ratio(REFERENCE[1], dev) == pytest.approx(0.37)
    assert memory_ratio(BranchProfile("z", 0, 0), dev) == 0
    plan = allocate([DeviceProfile("small", 1, 1, 1, 0.4)], [BranchProfile("big", 0.3, 0.2)])
    s = plan.score("big", "small")
    assert s.m >= 1 and not s.eligible and plan.unassigned == ["big"]


@given(st.floats(0.01, 100), st.floats(0.0, 10), st.floats(0.001, 10))
def test_calc_rate_scale_invariant(k, f, p):
    a = calc_rate(BranchProfile("b", f, p))
    assert calc_rate(BranchProfile("b", f * k, p * k)) == pytest.approx(a, rel=1e-12)


def test_profile_validation():
    with pytest.raises(ValueError):
        DeviceProfile("d", 0, 0.5)
    with pytest.raises(ValueError):
        DeviceProfile("d", 0.5, 1.5)
    with pytest.raises(ValueError):
        DeviceProfile("d", 0.5, 0.5, 0)
    with pytest.raises(ValueError):
        BranchProfile("b", -1, 0)
    with pytest.raises(ValueError):
        BranchProfile("b", 0.1, 0.1, 0.5)


def test_allocate_all_fit():
    devices = [_device_with_u(f"ecu{i}", 0.6) for i in range(1, 5)]
    assert availability(devices[0].P, devices[0].M, 1, 1) == pytest.approx(0.6)
    plan = allocate(devices, REFERENCE, alpha=1, beta=2)
    assert plan.unassigned == []
    assert sorted(plan.assignments) == ["branch1", "branch2", "branch3", "branch4"]
    assert len(set(plan.assignments.values())) == 4


def test_allocate_low_availability():
    plan = allocate([_device_with_u("ecu1", 0.1)], REFERENCE, beta=2)
    assert plan.assignments == {}
    assert plan.unassigned == ["branch1", "branch2", "branch3", "branch4"]


def test_allocate_empty():
    plan = allocate([_device_with_u("ecu1", 0.5)], [])
    assert plan.assignments == {} and plan.unassigned == [] and plan.scores == []


def test_allocate_prefers_high_u_for_heaviest_branch():
    devices = [_device_with_u("ecu1", 0.55), _device_with_u("ecu2", 0.9), _device_with_u("ecu3", 0.6), _device_with_u("ecu4", 0.7)]
    plan = allocate(devices, REFERENCE)
    # branch2 has the largest O so it gets the most available device
    assert plan.assignments["branch2"] == "ecu2"
    assert plan.assignments["branch3"] == "ecu4"


def test_allocate_tie_breaks_lower_id():
    devices = [_device_with_u(f"ecu{i}", 0.6) for i in (3, 1, 2, 4)]
    plan = allocate(devices, REFERENCE)
    assert plan.assignments == {"branch2": "ecu1", "branch3": "ecu2", "branch1": "ecu3", "branch4": "ecu4"}


def test_fusion_pinned():
    plan = allocate([_device_with_u("ecu1", 0.9)], [BranchProfile("fusion", 0.01, 3.38)])
    assert plan.pinned == {"fusion": "cem"} and plan.assignments == {}


@settings(max_examples=60)
@given(
    st.lists(st.tuples(rate, rate, st.integers(1, 10), st.floats(0.05, 2.0)), min_size=1, max_size=6),
    st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=0, max_size=6),
    st.integers(1, 3),
    st.integers(1, 3),
)
def test_allocate_never_violates(devs, brs, alpha, beta):
    devices = [DeviceProfile(f"d{i}", P, M, R, mem) for i, (P, M, R, mem) in enumerate(devs)]
    branches = [BranchProfile(f"b{i}", f, p) for i, (f, p) in enumerate(brs) if f + p > 0]
    plan = allocate(devices, branches, alpha, beta)
    assert len(set(plan.assignments.values())) == len(plan.assignments)
    for b, d in plan.assignments.items():
        s = plan.score(b, d)
        assert s.m < 1 and s.U >= s.O
    assert set(plan.assignments) | set(plan.unassigned) == {b.id for b in branches}
    again = allocate(devices, branches, alpha, beta)
    assert again.to_dict() == plan.to_dict()


def test_reallocate_stable():
    devices = [_device_with_u(f"ecu{i}", 0.6) for i in range(1, 5)]
    plan = allocate(devices, REFERENCE)
    assert reallocate(plan, devices, REFERENCE).assignments == plan.assignments


def test_reallocate_moves_only_failing_branch():
    devices = [_device_with_u(f"ecu{i}", 0.6) for i in range(1, 6)]
    plan = allocate(devices, REFERENCE)
    host = plan.assignments["branch2"]
    # 0.5 sits between branch2's O (0.5472) and every other O (<= 0.4535)
    updated = [_device_with_u(d.id, 0.5) if d.id == host else d for d in devices]
    new = reallocate(plan, updated, REFERENCE)
    moved = {b for b in plan.assignments if plan.assignments[b] != new.assignments.get(b)}
    assert moved == {"branch2"}
    assert new.assignments["branch2"] == "ecu5"


def test_reallocate_saturated():
    devices = [_device_with_u(f"ecu{i}", 0.6) for i in range(1, 5)]
    plan = allocate(devices, REFERENCE)
    busy = [_device_with_u(d.id, 0.05) for d in devices]
    new = reallocate(plan, busy, REFERENCE)
    assert new.assignments == {} and new.unassigned == ["branch1", "branch2", "branch3", "branch4"]


def test_plan_json_round_trip():
    plan = allocate([_device_with_u(f"ecu{i}", 0.6) for i in range(1, 5)], REFERENCE)
    back = AllocationPlan.from_dict(plan.to_dict())
    assert back.assignments == plan.assignments and back.unassigned == plan.unassigned
    assert "branch2 -> " in plan.table()


def test_branches_from_size_report():
    from lipar.model import build_stparnet, size_report

    profiles = branches_from_size_report(size_report(build_stparnet(0)))
    assert [p.id for p in profiles] == ["branch1", "branch2", "branch3", "branch4"]
