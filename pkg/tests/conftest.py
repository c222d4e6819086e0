from __future__ import annotations

import pytest

from reqflow import (
    Endpoint,
    ReplayEngine,
    build_all_dags,
    merge_streams,
    validate_dag,
)
from reqflow.synth import TopologySpec


def reconstruct(streams, topology: TopologySpec, validate: bool = True):
    """Replay synthetic streams with the engine configured from the topology.

    Returns (snapshot, dags). This is the reference path the round-trip
    tests exercise; it mirrors what the command line front end does.
    """
    gateway = next(s for s in topology.services if s.name == topology.gateway)
    engine = ReplayEngine(
        gateway_endpoints=[Endpoint(gateway.ip, gateway.port)],
        user_events=sorted(topology.user_event_rates),
    )
    for record in merge_streams([iter(stream) for stream in streams]):
        engine.handle(record)
    snapshot = engine.finalize()
    dags = list(build_all_dags(snapshot))
    if validate:
        for dag in dags:
            validate_dag(dag)
    return snapshot, dags


@pytest.fixture(scope="session")
def demo_run():
    """One shared demo simulation plus its reconstruction."""
    from reqflow.synth import demo_simulation, demo_topology

    streams, truth = demo_simulation()
    snapshot, dags = reconstruct(streams, demo_topology())
    return streams, truth, snapshot, dags
