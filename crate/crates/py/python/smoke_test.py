"""Smoke test for the tubefly_py extension.

Build first:
    cargo build --release -p tubefly-py --features extension-module
then run this script from anywhere. It copies the built library next to a
temporary module path so it can be imported without an install step.
"""

import importlib
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parents[3]


def load():
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libtubefly_py.so"
        if lib.exists():
            tmp = pathlib.Path(tempfile.mkdtemp())
            shutil.copy(lib, tmp / "tubefly_py.so")
            sys.path.insert(0, str(tmp))
            return importlib.import_module("tubefly_py")
    sys.exit("libtubefly_py.so not found; build the extension first")


def main():
    tf = load()

    entries = dict(tf.config_entries(["N=30"]))
    assert entries["N"] == "30", entries

    assert tf.policy_input_len(50) == 310

    tube = tf.tube(["tube_rollouts=50"])
    assert len(tube) == 10
    assert all(lo == -hi and hi >= 0.0 for _, lo, hi in tube)

    m = tf.simulate("hover")
    assert m["rmse_x"] <= 1e-4 and m["infeasible_steps"] == 0, m
    m = tf.simulate("t1", seed=1)
    print("t1 RMSE [mm]: x %.3f y %.3f z %.3f" % tuple(1e3 * m["rmse_" + a] for a in "xyz"))

    try:
        tf.simulate("t9")
    except ValueError as e:
        print("rejected unknown task:", e)
    else:
        raise AssertionError("unknown task accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
