"""Smoke test for the compiled extension.

Build first:
    cargo build --release -p latent-bridge-py --features extension-module
then run:
    python3 python/smoke_test.py [path/to/liblatent_bridge_py.so]
"""
import importlib.util
import json
import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def find_library():
    if len(sys.argv) > 1:
        return sys.argv[1]
    for profile in ("release", "debug"):
        for name in ("liblatent_bridge_py.so", "liblatent_bridge_py.dylib"):
            path = os.path.join(ROOT, "target", profile, name)
            if os.path.exists(path):
                return path
    sys.exit("extension not built; see the docstring")


def load(path):
    tmp = tempfile.mkdtemp()
    target = os.path.join(tmp, "latent_bridge_py.so")
    shutil.copy(path, target)
    spec = importlib.util.spec_from_file_location("latent_bridge_py", target)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    lb = load(find_library())
    print(lb.__version__)

    schedule = lb.NoiseSchedule()
    grid = schedule.step_grid(50)
    assert len(grid) == 50 and grid[0] == 980 and grid[-1] == 0
    assert 0 < schedule.alpha_bars[-1] < 0.01

    world = lb.World(k=4, frames=8, height=16, width=16, sigma=0.05, seed=0)
    assert world.shape == (8, 16, 16)
    (values, shape), k = world.sample(3)
    assert shape == (8, 16, 16) and 0 <= k < 4
    mean, _ = world.component_clip(k)
    assert world.switch_rate(mean) == 0.0
    assert world.frame_consistency(mean) > 0.5

    eps = world.eps(values, 500, schedule, scope="clip")
    assert len(eps) == len(values) and all(math.isfinite(e) for e in eps)

    out = lb.run_strategy(world, schedule, task="control", strategy="sequential", alpha=1.0, seed=1)
    assert set(out) >= {"idm_output", "img_inverted", "vid_inverted", "mixed", "final", "metrics"}
    assert out["metrics"]["control_match_error"] < 0.05
    print("sequential control metrics:", out["metrics"])

    try:
        lb.run_strategy(world, schedule, alpha=1.5)
    except ValueError as e:
        assert "bridge.alpha" in str(e)
    else:
        raise AssertionError("alpha 1.5 accepted")

    with tempfile.TemporaryDirectory() as d:
        config = {
            "world": {"k": 2, "frames": 3, "height": 8, "width": 8},
            "ddim": {"t_infer": 10},
            "ablation": {"tasks": ["control"], "strategies": ["sequential"], "alphas": [0.25], "task_alphas": {}},
            "seeds": [0],
            "out_dir": d,
        }
        report = json.loads(lb.run_benchmark(json.dumps(config), threads=2))
        assert len(report["records"]) == 1
        assert os.path.exists(os.path.join(d, "report.csv"))
    print("smoke test ok")


if __name__ == "__main__":
    main()
