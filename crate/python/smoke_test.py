"""Smoke test for the modalanchor extension module.

Build and stage the module first:

    cargo build --release -p modalanchor-py --features extension-module
    cp target/release/libmodalanchor.so python/modalanchor.so
"""

import json
import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import modalanchor as ma


def check(cond, msg):
    if not cond:
        raise SystemExit(f"FAIL: {msg}")
    print(f"ok: {msg}")


def main():
    cfg = ma.default_config()
    check(cfg["trainer.epochs"] == "5", "default config exposes trainer.epochs")

    manifest = json.loads(ma.stream_manifest(3, {"stream.n_tasks": "2"}))
    check(len(manifest["tasks"]) == 2, "manifest lists two tasks")
    check(ma.stream_manifest(3) == ma.stream_manifest(3), "stream generation is deterministic")

    r = [[0.9, 0.1], [0.8, 0.85]]
    check(math.isclose(ma.backward_transfer(r), -0.1, abs_tol=1e-12), "backward transfer hand case")
    check(math.isclose(ma.forward_transfer([[0.9, 0.10], [0.8, 0.85]], [0.0, 0.03]), 0.07, abs_tol=1e-12),
          "forward transfer hand case")
    check(math.isclose(ma.forgetting_rate([[0.9, 0.0], [0.6, 0.5]]), 0.3, abs_tol=1e-12), "forgetting hand case")
    check(math.isclose(ma.average_accuracy(r), 0.825, abs_tol=1e-12), "average accuracy hand case")

    coords, explained = ma.pca_project([[1.0, 0.0], [-1.0, 0.0], [0.0, 0.5], [0.0, -0.5]], 2)
    check(len(coords) == 4 and explained[0] > explained[1], "pca orders components by variance")

    small = {
        "stream.n_tasks": "2",
        "stream.n_train": "200",
        "stream.n_eval": "64",
        "trainer.epochs": "1",
        "trainer.n_fisher": "16",
    }
    out = ma.run("ours", 1, small)
    check(len(out["r"]) == 2 and len(out["r"][0]) == 2, "run returns a 2x2 accuracy matrix")
    check(out["forgetting"] >= 0.0, "forgetting is non-negative")

    try:
        ma.run("bogus", 0, small)
    except ValueError as e:
        check("bogus" in str(e), "unknown strategy raises ValueError")
    else:
        raise SystemExit("FAIL: unknown strategy accepted")

    results = ma.gradcheck()
    check(all(ok for _, _, ok in results), f"gradcheck passes on {len(results)} components")
    print("smoke test passed")


if __name__ == "__main__":
    main()
