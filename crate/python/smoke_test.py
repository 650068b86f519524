"""Smoke test for the Python extension.

Run after `pip install --no-build-isolation ./crates/python`, or point
MONOIMPUTE_LIB at a built `libmonoimpute.so`.
"""

import importlib.machinery
import importlib.util
import json
import math
import os
import sys
import tempfile


def load():
    path = os.environ.get("MONOIMPUTE_LIB")
    if path is None:
        import monoimpute

        return monoimpute
    loader = importlib.machinery.ExtensionFileLoader("monoimpute", path)
    spec = importlib.util.spec_from_file_location("monoimpute", path, loader=loader)
    module = importlib.util.module_from_spec(spec)
    loader.exec_module(module)
    return module


def main():
    mi = load()
    observed, full = mi.simulate(1, 120, 3)
    assert observed.splitlines()[0] == "id,y0,g,y1,y2"
    assert "NA" in observed and "NA" not in full
    assert mi.simulate(1, 120, 3) == (observed, full)

    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(tmp, "trial.csv")
        with open(data, "w") as fh:
            fh.write(observed)
        config = {
            "data": {
                "path": data,
                "schema": {
                    "id": "id",
                    "covariates": ["y0", "g"],
                    "visits": [{"name": "y1", "kind": "continuous"}, {"name": "y2", "kind": "binary"}],
                },
            },
            "mcmc": {"burn_in": 200, "thin": 5, "draws": 5, "seed": 11},
            "analysis": {"response": "y2", "family": "probit"},
            "output": os.path.join(tmp, "out"),
        }
        text = json.dumps(config)
        sets = mi.impute(text)
        assert len(sets) == 5 and all("NA" not in s for s in sets)
        assert sorted(os.listdir(config["output"]))[-1] == "manifest.json"

        pooled = {c["name"]: c for c in mi.analyze(text, sets)}
        g = pooled["g"]
        assert g["total"] >= g["within"] > 0 and 0 <= g["p"] <= 1

        config["tipping"] = {"delta0": [0.0, 1.0], "delta1": [0.0]}
        grid = mi.tipping(json.dumps(config)).splitlines()
        assert grid[0].split(",")[:3] == ["delta0", "delta1", "estimate"]
        zero = [float(v) for v in grid[1].split(",")[:3]]
        assert zero[:2] == [0.0, 0.0] and math.isclose(zero[2], g["estimate"])

    r = mi.pool([1.0, 1.4, 0.7, 1.1], [0.05, 0.06, 0.04, 0.05])
    assert math.isclose(r["estimate"], 1.05) and r["between"] > 0

    try:
        mi.simulate(3, 10, 1)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown scenario accepted")
    print("python smoke test passed")


if __name__ == "__main__":
    sys.exit(main())
