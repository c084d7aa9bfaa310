"""Quick end-to-end check of the Python bindings.

Run after `pip install --no-build-isolation crates/py`:

    python3 crates/py/python/smoke_test.py
"""

import json

import snap_py


def main() -> None:
    o = snap_py.build_overlay(16)
    assert (o.n, o.depth, o.period) == (16, 4, 4)
    assert o.validate() == []
    assert o.iset_sizes() == [15] * 4
    assert o.table_max() <= 7

    run = o.simulate_slots(16)
    assert run["optimal"] and run["max_lag"] == 4 and run["violations"] == 0
    assert len(run["deliveries"]) == 16 * 16

    again = snap_py.Overlay.from_json(o.to_json())
    assert again.tree_levels(0) == o.tree_levels(0)

    smaller = o.depart(3)
    assert smaller.n == 15 and 3 not in smaller.peers() and smaller.validate() == []
    bigger = smaller.join(99)
    assert bigger.n == 16 and bigger.validate() == []

    a = snap_py.analytic(16, 1.0, 1.0)
    assert a["sbt_max"] == 8 and a["opst_max"] == 17 and a["sbt_avg_exact"] == 5.0625

    cal = snap_py.calibration_scenario(16, 1.0, 1.0, 32)
    s = snap_py.simulate(cal)
    assert s["playback_delay"]["max"] == 8.0 and s["lost"] == 0

    cfg = json.loads(snap_py.default_scenario(1))
    cfg["session_length"] = 60.0
    cfg["max_peers"] = 40
    text = json.dumps(cfg)
    assert snap_py.metrics_csv(text) == snap_py.metrics_csv(text)
    summary = snap_py.simulate(text)
    assert 0.0 < summary["control_overhead"] < 1.0

    try:
        snap_py.build_overlay(20, "single-level").join(20, "sideways")
    except ValueError:
        pass
    else:
        raise AssertionError("bad policy accepted")

    print("smoke test ok:", o, "hybrid p50", round(summary["playback_delay"]["p50"], 3))


if __name__ == "__main__":
    main()
