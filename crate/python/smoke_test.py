"""Smoke test for the rigvo_py extension module.

Build and install with `maturin develop -m crates/python/Cargo.toml --features extension-module`,
or copy the compiled cdylib next to this script as `rigvo_py.so`, then run
`python python/smoke_test.py`.
"""

import math
import os
import sys
import tempfile

import rigvo_py as rv


def main() -> int:
    p = rv.Pose([1.0, 2.0, 3.0], [0.0, 0.0, math.sin(0.25), math.cos(0.25)])
    q = p.compose(p.inverse())
    assert max(abs(v) for v in q.translation) < 1e-12, q

    rig = rv.RigConfig.vehicle_four_camera()
    assert len(rig) == 4

    scales, condition, observable = rv.recover_scales(rig, [1.0, 2.0, 0.5, 3.0])
    assert observable, condition
    assert all(abs(s / t - 1.0) < 1e-9 for s, t in zip(scales, [1.0, 2.0, 0.5, 3.0])), scales
    _, _, observable = rv.recover_scales(rig, [1.0, 2.0, 0.5, 3.0], trajectory="line")
    assert not observable

    with tempfile.TemporaryDirectory() as d:
        rig.save(os.path.join(d, "rig.txt"))
        assert len(rv.RigConfig.load(os.path.join(d, "rig.txt"))) == 4

        data = rv.simulate(rig, seed=3, frames=60, length=30.0)
        data.save(os.path.join(d, "tracks.txt"))
        again = rv.Dataset.load(os.path.join(d, "tracks.txt"))
        assert again.num_observations == data.num_observations

        result = rv.run(rig, data, seed=3)
        est, gt = result.trajectory(), result.ground_truth()
        trans, rot, _ = rv.ate(est, gt)
        drift = rv.scale_drift(est, gt)
        print(f"{len(est)} poses, ATE {trans:.3f} m, {rot:.3f} deg, scale drift {drift:.2f}%")
        assert trans < 0.3, trans

        try:
            rv.run(rig, rv.simulate(rig, frames=6), seed=0)
        except RuntimeError as e:
            assert "exit code 3" in str(e), e
        else:
            raise AssertionError("six frames should not initialize")
    print("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
