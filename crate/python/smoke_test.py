"""Smoke test for the Python bindings.

Build and install first:  pip install .  (or: maturin develop)
Then run:                 python python/smoke_test.py
"""

import json
import pathlib
import tempfile

import fso_sim_py as fso


def main():
    a = fso.run_falls(seed=1, informal_carers=10, devices=1, ticks=2000)
    b = fso.run_falls(seed=1, informal_carers=10, devices=1, ticks=2000)
    assert a == b, "same seed must give the same summary"
    assert a["scenario"] == "S1" and a["informal_carers"] == 10
    assert a["reqs_handled"] > 0

    city = fso.run_city(seed=2, strategy="fso", threshold=150, individuals=60, ticks=600)
    assert city["strategy"] == "fso"
    assert city["treated"] + city["died"] + city["unresolved"] == city["requests"]

    try:
        fso.run_city(seed=2, strategy="nope")
    except ValueError:
        pass
    else:
        raise AssertionError("bad strategy accepted")

    plan = fso.default_plan("fire")
    assert 'scenario = "fire"' in plan

    rows = fso.run_plan(
        'scenario = "city"\nseeds = 2\n',
        [("world.ticks", "300"), ("sweep.thresholds", "[150]"), ("sweep.individuals", "[60]")],
    )
    assert len(rows) == 6

    with tempfile.TemporaryDirectory() as tmp:
        first = pathlib.Path(tmp, "first")
        again = pathlib.Path(tmp, "again")
        m = fso.run_experiment('scenario = "falls"\nseeds = [3]\n', str(first),
                               [("world.ticks", "1000"), ("sweep.informal_carers", "[0, 5]")])
        fso.rerun_manifest(str(first / "manifest.json"), str(again))
        for f in m["files"]:
            assert (first / f["name"]).read_bytes() == (again / f["name"]).read_bytes(), f["name"]
        print(json.dumps({"files": len(m["files"]), "version": fso.__version__}))

    print("smoke test ok")


if __name__ == "__main__":
    main()
