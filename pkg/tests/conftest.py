"""Shared pytest configuration: opt-in tiers for benches and root-only tests."""

import os

import pytest


def pytest_collection_modifyitems(config, items):
    gates = {
        "bench": ("FLOWTAP_BENCH", "timing-sensitive bench; set FLOWTAP_BENCH=1"),
        "privileged": (
            "FLOWTAP_PRIVILEGED",
            "needs root and /dev/net/tun; set FLOWTAP_PRIVILEGED=1",
        ),
    }
    for marker, (env, reason) in gates.items():
        if os.environ.get(env) == "1":
            continue
        skip = pytest.mark.skip(reason=reason)
        for item in items:
            if marker in item.keywords:
                item.add_marker(skip)
