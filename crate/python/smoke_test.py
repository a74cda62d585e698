"""Smoke test for the pyqglue extension.

Build with `cargo build -p qglue-py --release`, then copy
target/release/libpyqglue.so to pyqglue.so somewhere on PYTHONPATH
(or use `maturin develop` in crates/py).
"""

import json
import math
import pathlib
import sys

import pyqglue

ROOT = pathlib.Path(__file__).resolve().parent.parent


def check_schema(command, summary):
    try:
        import jsonschema
    except ImportError:
        return
    schema = json.loads((ROOT / "schemas" / f"{command}.summary.schema.json").read_text())
    jsonschema.validate(summary, schema)


def main():
    c = json.loads(pyqglue.constants(5))
    assert math.isclose(c["epsBar"], (5 / 21) ** 0.125, rel_tol=1e-14), c
    assert c["p"] == 9.0

    o = json.loads(pyqglue.orbit(0.5, samples=32))
    assert len(o["t"]) == o["nSamples"]
    assert min(o["v"]) >= 0.5 - 1e-12

    spec = json.loads(pyqglue.indicial(0.5, [0, 1]))
    mode1 = sorted(spec["modes"][1]["exponents"])
    assert any(abs(x - 1.0) < 1e-6 for x in mode1), mode1

    for command, params in [
        ("constants", {"n": 5}),
        ("orbit", {"eps": 0.4}),
        ("indicial", {"eps": 0.6, "modes": "0..2"}),
        ("glue", {"eps": 0.5, "m": 2}),
    ]:
        raw, files = pyqglue.run(command, json.dumps(params))
        summary = json.loads(raw)
        assert summary["command"] == command
        check_schema(command, summary)
        print(f"{command}: ok ({', '.join(sorted(files)) or 'no artifacts'})")

    try:
        pyqglue.run("orbit", json.dumps({"eps": 0.95}))
    except ValueError:
        pass
    else:
        raise AssertionError("eps above the constant solution was accepted")

    try:
        pyqglue.run("orbit", json.dumps({"grid": 3}))
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key was accepted")

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
