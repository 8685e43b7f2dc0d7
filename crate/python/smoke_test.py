#!/usr/bin/env python3
"""Smoke test for the brodyn_py extension module.

Builds the cdylib with cargo, loads it, and exercises the main types and
operations end to end at toy scale: spec construction, dataset generation,
training, momentum conservation, roll-outs, evaluation, zero-shot transfer
and checkpoint round-trips.

Usage: python3 python/smoke_test.py [--debug]
"""

import argparse
import math
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def build_extension(profile: str) -> Path:
    cmd = ["cargo", "build", "-p", "brodyn-python"]
    if profile == "release":
        cmd.append("--release")
    subprocess.run(cmd, cwd=REPO, check=True)
    lib = REPO / "target" / profile / "libbrodyn_py.so"
    if not lib.exists():  # macOS
        lib = REPO / "target" / profile / "libbrodyn_py.dylib"
    if not lib.exists():
        sys.exit(f"extension library not found under target/{profile}")
    stage = Path(tempfile.mkdtemp(prefix="brodyn_py_"))
    shutil.copy(lib, stage / "brodyn_py.so")
    sys.path.insert(0, str(stage))
    return stage


def check(name: str, ok: bool, detail: str = "") -> None:
    status = "ok" if ok else "FAIL"
    print(f"  [{status}] {name}" + (f" ({detail})" if detail else ""))
    if not ok:
        sys.exit(1)


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--debug", action="store_true", help="build without --release")
    args = parser.parse_args()
    build_extension("debug" if args.debug else "release")

    import brodyn_py as bd

    print("brodyn_py smoke test")

    spec = bd.SystemSpec("linear", 5)
    check("spec defaults", spec.n == 5 and spec.kbt == 1.0 and spec.dt == 1e-3, repr(spec))

    binary = bd.SystemSpec("binary", 10)
    check(
        "binary 3:7 types",
        binary.particle_types == [0] * 3 + [1] * 7 and binary.gamma_per_type == [1.0, 2.0],
    )

    x0 = spec.initial_condition(seed=4)
    forces = spec.spring_force(x0)
    net = [sum(f[c] for f in forces) for c in range(3)]
    check("ground-truth forces sum to zero", all(abs(v) < 1e-10 for v in net))

    data = bd.generate_dataset(spec, n_traj=4, points_per_traj=50, seed=11)
    check("dataset size", len(data) == 200)

    model, history = bd.train("brognet", spec, data, max_epochs=3, seed=11)
    check("training history", len(history) == 3 and history[0][0] == 0)
    check(
        "validation loss finite",
        all(math.isfinite(h[2]) for h in history),
        f"val={history[-1][2]:.4f}",
    )

    net = bd.total_force(model, spec, x0)
    check(
        "momentum conservation of trained model",
        all(abs(v) < 1e-10 for v in net),
        f"|sum F| <= {max(abs(v) for v in net):.2e}",
    )

    _, gammas = model.predict(spec, x0)
    check("gamma head positive", all(g > 0 for g in gammas), f"gamma[0]={gammas[0]:.3f}")

    traj = bd.simulate(spec, model, steps=10, seed=3)
    check("rollout shape", len(traj) == 11 and len(traj[0]) == 5 and len(traj[0][0]) == 3)
    same = bd.simulate(spec, model, steps=10, seed=3)
    check("rollout determinism", traj == same)

    report = bd.evaluate_model(model, spec, n_init=2, seeds_per_init=4, steps=10, seed=5)
    check(
        "evaluation report finite",
        math.isfinite(report.kl_geometric_mean) and math.isfinite(report.brownian_error),
        f"kl_gm={report.kl_geometric_mean:.4f} brownian={report.brownian_error:.4f}",
    )
    check("per-step series lengths", len(report.kl) == 10 and len(report.position_error) == 10)

    big = bd.zero_shot_eval(model, spec, n=50, n_init=2, seeds_per_init=3, steps=5, seed=5)
    check("zero-shot size transfer", math.isfinite(big.kl_geometric_mean))

    hot = bd.zero_shot_eval(model, spec, kbt=10.0, n_init=2, seeds_per_init=3, steps=5, seed=5)
    check("zero-shot temperature transfer", math.isfinite(hot.kl_geometric_mean))

    nn_model, _ = bd.train("nn", spec, data, max_epochs=1, seed=2)
    try:
        bd.zero_shot_eval(nn_model, spec, n=50, n_init=2, seeds_per_init=3, steps=5)
        check("nn rejected for transfer", False)
    except ValueError as e:
        check("nn rejected for transfer", "inductive" in str(e))

    with tempfile.TemporaryDirectory() as tmp:
        path = str(Path(tmp) / "model.params")
        model.save(path)
        loaded = bd.Model.load(path)
        _, g2 = loaded.predict(spec, x0)
        check("checkpoint round-trip", g2 == gammas and loaded.family == "brognet")

    print("all smoke checks passed")


if __name__ == "__main__":
    main()
