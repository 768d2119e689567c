"""Smoke test for the teamsteal_py extension.

Uses an installed module if there is one, otherwise builds the cdylib with
cargo and imports it from a temporary directory.
"""

import importlib
import os
import pathlib
import random
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load():
    try:
        return importlib.import_module("teamsteal_py")
    except ImportError:
        pass
    subprocess.run(
        ["cargo", "build", "--release", "-q", "-p", "teamsteal-py"],
        cwd=ROOT,
        check=True,
    )
    target = pathlib.Path(os.environ.get("CARGO_TARGET_DIR", ROOT / "target"))
    lib = target / "release" / "libteamsteal_py.so"
    tmp = tempfile.mkdtemp(prefix="teamsteal_py_")
    shutil.copy(lib, pathlib.Path(tmp) / "teamsteal_py.so")
    sys.path.insert(0, tmp)
    return importlib.import_module("teamsteal_py")


def main():
    ts = load()

    rng = random.Random(7)
    data = [rng.randint(-(2**31), 2**31 - 1) for _ in range(200_000)]
    want = sorted(data)
    for variant in ["SeqSTL", "SeqQS", "Fork", "Randfork", "MMPar"]:
        got, stats = ts.sort(data, variant=variant, threads=4, block_size=64, blocks_per_thread=8)
        assert got == want, variant
        if variant == "Fork":
            assert stats["reg_cas"] == 0 and stats["team_cas"] == 0, stats
        if variant == "MMPar":
            assert stats["team_executions"] > 0, stats

    a = ts.generate("staggered", 10_000, seed=3)
    assert a == ts.generate("staggered", 10_000, seed=3)
    assert len(ts.generate("random", 0)) == 0

    assert ts.best_np(4096 * 128 * 4, 8) == 4
    assert ts.best_np(511, 8) == 1

    stats = ts.unit_tasks(10_000, threads=4)
    assert stats["children_ran"] == 10_000 and stats["executions"] == 10_001, stats
    assert stats["reg_cas"] == 0, stats

    out = ts.verify(4, mode="random", seeds=50, tasks=40)
    assert out["seeds"] == 50
    out = ts.verify(2, mode="exhaustive", workload="0:2,1:1,1:1")
    assert out["terminal"] > 0

    try:
        ts.sort([1, 2], variant="nope")
    except ValueError:
        pass
    else:
        raise AssertionError("bad variant accepted")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
