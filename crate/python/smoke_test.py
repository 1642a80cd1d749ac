#!/usr/bin/env python3
"""End-to-end smoke test for the Python bindings.

Builds nothing itself: expects the extension to be compiled already, e.g.

    cargo build -p rotmvps-python --release
    python3 python/smoke_test.py

The script locates the compiled cdylib, copies it next to itself as an
importable module, and runs a miniature synth -> train -> eval round trip.
"""

import json
import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def locate_extension():
    candidates = [
        ROOT / "target" / "release" / "librotmvps_py.so",
        ROOT / "target" / "debug" / "librotmvps_py.so",
        ROOT / "target" / "release" / "librotmvps_py.dylib",
        ROOT / "target" / "debug" / "librotmvps_py.dylib",
    ]
    for c in candidates:
        if c.exists():
            return c
    sys.exit("extension not built; run: cargo build -p rotmvps-python")


def main():
    src = locate_extension()
    dst = Path(__file__).resolve().parent / "rotmvps_py.so"
    if not dst.exists() or src.stat().st_mtime > dst.stat().st_mtime:
        shutil.copyfile(src, dst)
    sys.path.insert(0, str(dst.parent))
    import rotmvps_py as rm

    # pose algebra
    sched = rm.Schedule(4, 8)
    assert len(sched) == 32
    pose = sched[5]
    R = pose.light_rotation
    # orthonormal rows
    for i in range(3):
        norm = math.sqrt(sum(R[i][k] ** 2 for k in range(3)))
        assert abs(norm - 1.0) < 1e-9, norm
    o, d = pose.equivalent_ray([0.0, -2.5, 0.0], [0.0, 1.0, 0.0])
    assert abs(sum(x * x for x in d) - 1.0) < 1e-9

    # environment light
    env = rm.Environment.constant(1, 0.5)
    assert env.l_max == 1
    for v in env.eval([0.0, 0.0, 1.0]):
        assert abs(v - 0.5) < 1e-9

    # model basics: fresh init is roughly a centered sphere
    model = rm.Model(l_max=1, samples_per_ray=8, near=1.8, far=3.2, seed=3)
    assert model.num_parameters > 10000
    inside, outside = model.sdf([[0.0, 0.0, 0.0], [0.0, 0.0, 0.9]])
    assert inside < 0.0 < outside, (inside, outside)
    verts, tris = model.extract_mesh(resolution=24)
    assert len(verts) > 100 and len(tris) > 100

    # determinism of the parameter hash
    assert model.param_hash() == rm.Model(
        l_max=1, samples_per_ray=8, near=1.8, far=3.2, seed=3
    ).param_hash()

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        synth_summary = rm.synth(
            "sphere_lambert",
            tmp / "data",
            schedule="2x2",
            size=16,
            samples_per_ray=24,
            light_samples=16,
        )
        assert synth_summary["frames"] == 4

        train_summary = rm.train(
            tmp / "data",
            tmp / "run",
            iters=3,
            batch_rays=32,
            samples_per_ray=8,
            l_max=1,
            near=1.8,
            far=3.2,
            eik_points=32,
            occ_rays=2,
            checkpoint_every=0,
            no_geo_prior=True,
        )
        assert train_summary["skipped_steps"] == 0
        ckpt = Path(train_summary["checkpoint"])
        assert ckpt.exists()

        # reload and render one view
        reloaded = rm.Model.load(ckpt, samples_per_ray=8, near=1.8, far=3.2)
        w, h, rgb = reloaded.render(sched[0], size=8)
        assert (w, h, len(rgb)) == (8, 8, 8 * 8 * 3)
        assert all(math.isfinite(v) for v in rgb)

        eval_summary = rm.evaluate(
            tmp / "data",
            ckpt,
            tmp / "eval",
            resolution=24,
            mesh_samples=500,
            views=1,
            samples_per_ray=8,
            near=1.8,
            far=3.2,
        )
        assert math.isfinite(eval_summary["chamfer_mm"])

        env.save(tmp / "env.json")
        relight_summary = rm.relight(
            tmp / "data",
            ckpt,
            tmp / "env.json",
            tmp / "relight",
            views=1,
            samples_per_ray=8,
            near=1.8,
            far=3.2,
        )
        assert relight_summary["views"] == 1

        # chamfer oracle
        assert rm.chamfer([[0, 0, 0]], [[0.01, 0, 0]], 100.0) == 1.0

    print(json.dumps({"smoke_test": "ok"}))


if __name__ == "__main__":
    main()
