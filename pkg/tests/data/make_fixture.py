"""Regenerate the committed fixture trace and its golden KeepSet.

Run from the repository root: ``python3 tests/data/make_fixture.py``.
The golden selection comes from the brute-force oracle, not the package.
"""

import json
import sys
from pathlib import Path

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent))

from oracle import budget, select  # noqa: E402

from guikv.traceio import read_trace, write_trace  # noqa: E402
from guikv.workload import TrajectoryParams, gen_trajectory  # noqa: E402

FIXTURE_PARAMS = TrajectoryParams(concentration=0.01, seed=20240)
GOLDEN_GAMMA = 0.2


def main():
    layout, traces = gen_trajectory(FIXTURE_PARAMS)
    trace_path = HERE / "fixture.gkvt"
    write_trace(trace_path, layout, traces)
    layout, traces = read_trace(trace_path)
    kept = [select(t, layout, GOLDEN_GAMMA, "gui-kv") for t in traces]
    golden = {
        "method": "gui-kv",
        "gamma": GOLDEN_GAMMA,
        "n": layout.n,
        "budget": budget(GOLDEN_GAMMA, layout.n),
        "layers": kept,
    }
    (HERE / "golden_keepset_guikv_0.2.json").write_text(json.dumps(golden, indent=1) + "\n")


if __name__ == "__main__":
    main()
