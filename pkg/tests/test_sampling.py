"""Tests for flow sampling, process targeting and the organization map."""

import ipaddress
import random

import pytest

from src.analyzer.entities import OrganizationMap
from src.analyzer.sampling import FlowSampler
from src.packet_codec import PROTO_UDP, FlowKey

KEY = FlowKey(
    PROTO_UDP,
    ipaddress.ip_address("10.7.0.2"),
    5353,
    ipaddress.ip_address("192.0.2.53"),
    53,
)


# ---------------------------------------------------------------------------
# FlowSampler
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("rate", [-0.1, 1.5])
def test_rate_out_of_range(rate):
    with pytest.raises(ValueError):
        FlowSampler(rate)


def test_full_rate_admits_everything():
    sampler = FlowSampler(1.0)
    assert all(sampler.admit(KEY) for _ in range(100))
    assert sampler.snapshot()["admitted"] == 100


def test_zero_rate_admits_nothing():
    sampler = FlowSampler(0.0)
    assert not any(sampler.admit(KEY) for _ in range(100))
    assert sampler.skipped == 100


def test_partial_rate_follows_rng():
    sampler = FlowSampler(0.25, rng=random.Random(3))
    admitted = sum(sampler.admit(KEY) for _ in range(4000))
    assert 850 < admitted < 1150
    assert sampler.admitted + sampler.skipped == 4000


def test_targets():
    sampler = FlowSampler()
    assert sampler.wants_process(None)
    assert sampler.wants_process("anything")

    sampler.set_targets(["com.example.tracker", ""])
    assert sampler.wants_process("com.example.tracker")
    assert not sampler.wants_process("other")
    assert not sampler.wants_process(None)
    assert sampler.snapshot()["targets"] == ["com.example.tracker"]


def test_set_rate_rejects_bad_value_and_keeps_old():
    sampler = FlowSampler(0.5)
    with pytest.raises(ValueError):
        sampler.set_rate(2.0)
    assert sampler.rate == 0.5


# ---------------------------------------------------------------------------
# OrganizationMap
# ---------------------------------------------------------------------------


def test_longest_suffix_wins():
    orgs = OrganizationMap(
        {"example.com": "Example Inc", "ads.example.com": "Example Ads", "Tracker.NET.": "Trk"}
    )
    assert orgs.lookup("cdn.example.com") == "Example Inc"
    assert orgs.lookup("x.ads.example.com") == "Example Ads"
    assert orgs.lookup("pixel.tracker.net") == "Trk"
    assert orgs.lookup("notexample.com") is None
    assert orgs.lookup(None) is None
    assert len(orgs) == 3


def test_organization_map_from_file(tmp_path):
    path = tmp_path / "orgs.txt"
    path.write_text("# owners\nexample.com = Example Inc  # main\n\ndoubleclick.net=Google\n")
    orgs = OrganizationMap.from_file(path)
    assert orgs.lookup("ad.doubleclick.net") == "Google"
    assert orgs.lookup("example.com") == "Example Inc"


def test_organization_map_bad_line(tmp_path):
    path = tmp_path / "orgs.txt"
    path.write_text("example.com Example\n")
    with pytest.raises(ValueError, match=":1:"):
        OrganizationMap.from_file(path)
