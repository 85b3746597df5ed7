"""Smoke test for the basinforge_py extension.

Build and run from the repository root:
    cargo build --release -p basinforge-py --features extension-module
    cp target/release/libbasinforge_py.so python/basinforge_py.so
    python3 python/smoke_test.py
"""

import json
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import basinforge_py as bf


def main():
    f = bf.Jet.linear([[0.5, 0.0], [0.0, 0.3]], 3)
    f.set(0, 0, 2, 1.0)
    z, w = f.evaluate(0.1, 0.2)
    assert abs(z - (0.05 + 0.04)) < 1e-15 and abs(w - 0.06) < 1e-15

    g = f.inverse()
    assert f.compose(g).max_diff_identity() < 1e-12
    assert bf.Jet.from_json(f.to_json()).max_diff(f) == 0.0

    spec = json.dumps({"family": "diagonal-random", "seed": 3, "bounds": {"C": 0.35, "D": 0.5}})
    germ = bf.generate_germ(spec, 10)
    assert germ.get(0, 0, 1) == 0 and 0.35 <= abs(germ.get(0, 1, 0)) <= 0.5

    trains = bf.diagonal_trains([-0.7] * 30 + [-1.0] * 30, [-1.0] * 30 + [-0.7] * 30, 2, 0.5)
    assert trains[0][:2] == (0, 0)

    assert bf.membership([f] * 60, 0.1, 0.1, 1e-6, 0.5) == "converged"
    assert bf.membership([f] * 60, 50.0, 50.0, 1e-6, 0.5) == "escaped"

    summary = json.loads(bf.run_config(bf.preset_toml("diagonal")))
    assert summary["status"] == "pass" and summary["exit_code"] == 0, summary["warnings"]
    print(f"smoke test passed: {len(summary['checks'])} diagonal checks, {len(trains)} trains from logs")


if __name__ == "__main__":
    main()
