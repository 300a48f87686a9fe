from __future__ import annotations

import numpy as np
import pytest

from defaultcast.evaluation import generate_scenario, truncate_for_training
from defaultcast.panel import (
    CENSORED,
    DEFAULT,
    OTHER_EXIT,
    EventRecord,
    FirmPanel,
    month_label,
)


def make_panel(values, firm_ids=None, start="2000-01"):
    """Build a FirmPanel from a (tau, 2n+2) array of stacked levels."""
    values = np.asarray(values, dtype=float)
    n = (values.shape[1] - 2) // 2
    firm_ids = firm_ids or tuple(f"f{i}" for i in range(n))
    origin = int(start[:4]) * 12 + int(start[5:7]) - 1
    labels = tuple(month_label(origin + t) for t in range(values.shape[0]))
    return FirmPanel(firm_ids=tuple(firm_ids), time_index=labels, values=values)


@pytest.fixture
def three_firm_panel():
    """Fully observed 3-firm panel over 10 months with simple values."""
    rng = np.random.default_rng(42)
    tau, n = 10, 3
    values = np.empty((tau, 2 * n + 2))
    values[:, :n] = 5.0 + rng.normal(scale=0.5, size=(tau, n))
    values[:, n:2 * n] = 0.1 + rng.normal(scale=0.2, size=(tau, n))
    values[:, 2 * n] = 4.0 + rng.normal(scale=0.1, size=tau)
    values[:, 2 * n + 1] = 0.05 + rng.normal(scale=0.05, size=tau)
    return make_panel(values)


@pytest.fixture
def three_firm_events(three_firm_panel):
    tau = three_firm_panel.n_periods
    return [
        EventRecord(firm_id="f0", month=4, kind=DEFAULT),
        EventRecord(firm_id="f1", month=7, kind=OTHER_EXIT),
        EventRecord(firm_id="f2", month=tau, kind=CENSORED),
    ]


@pytest.fixture(scope="session")
def medium_world():
    """One synthetic world reused across tests: 60 firms, 120 months."""
    scenario, panel, events = generate_scenario(60, seed=17, tau=120)
    return scenario, panel, events


@pytest.fixture(scope="session")
def medium_training(medium_world):
    _, panel, events = medium_world
    return truncate_for_training(panel, events, 114)
