import numpy as np

from steerkit._guidance import DIAGNOSTICS_FIELDS


def assert_diagnostics_consistent(rows, steps):
    assert len(rows) == steps
    for row in rows:
        assert set(row) == set(DIAGNOSTICS_FIELDS)
        assert row["reward_min"] - 1e-9 <= row["reward_mean"] <= row["reward_max"] + 1e-9
        assert row["ess"] >= 1.0 - 1e-9
    assert rows[-1]["resampled"] in (True, False)


def assert_finite_batch(chunks, shape):
    arr = np.asarray(chunks)
    assert arr.shape == shape
    assert np.all(np.isfinite(arr))


def assert_trace_consistent(result, horizon=8):
    assert len(result.trace) == result.chunks
    assert len(result.path) == len(result.path_stages) == result.chunks * horizon
    for record in result.trace:
        assert record["decision"] in ("advance", "maintain", "reinforce")
        assert record["stage"] >= 1
        assert record["lam"] >= 0.0
