"""Smoke test for the planemorph extension module.

Build first: `maturin develop -m crates/python/Cargo.toml` (or `pip install ./crates/python`).
"""

import json
import math
import tempfile
from pathlib import Path

import planemorph as pm


def main():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)

        pm.gen_data(str(tmp / "data"), n=2, size=16, labels=2, max_disp=2.0, sigma=3.0, seed=1)
        fixed = pm.Volume.read(str(tmp / "data" / "fixed_0.mvol"))
        moving = pm.Volume.read(str(tmp / "data" / "moving_0.mvol"))
        assert fixed.shape == (16, 16, 16)
        assert pm.lncc(fixed, fixed, 5) < pm.lncc(fixed, moving, 5)
        ramp = pm.Volume((6, 6, 6), [((h * 7 + w * 3 + d * 5) % 11) / 10 for h in range(6) for w in range(6) for d in range(6)])
        assert abs(pm.lncc(ramp, ramp, 5) + 1.0) < 1e-4

        zero = pm.Field.zeros(fixed.shape)
        assert zero.warp(fixed, "nearest").data == fixed.data
        assert zero.jacobian_stats()[0] == 0.0

        model = pm.Model(json.dumps({"variant": "EM-11", "stride": 2, "embed_dim": 8}))
        assert model.count_params() > 0
        field, warped = model.register(fixed, moving)
        assert field.shape == fixed.shape and warped.shape == fixed.shape
        assert all(math.isfinite(v) for v in field.data)

        model.save(str(tmp / "model.json"))
        again = pm.Model.load(str(tmp / "model.json"))
        assert again.forward(fixed, moving).data == field.data

        cost = pm.attn_cost((8, 8, 8), 16, "xy")
        assert cost["score_elems"] == 32768
        assert pm.cost_csv((8, 8, 8), 16).startswith("strategy,")

        cfg = tmp / "cfg.json"
        cfg.write_text(json.dumps({
            "model": {"variant": "EM-11", "stride": 2, "embed_dim": 8},
            "train": {"epochs": 1, "seed": 0},
        }))
        pm.train(str(cfg), str(tmp / "data"), str(tmp / "run"))
        report = json.loads(pm.evaluate(str(tmp / "run" / "final.json"), str(tmp / "data"), str(tmp / "report.json")))
        assert report["dice"]["n"] == 2

        try:
            pm.resolve_config('{"model": {"variant": "EM-99"}}')
        except ValueError as e:
            assert "model.variant" in str(e)
        else:
            raise AssertionError("bad variant accepted")

    print("python smoke test ok")


if __name__ == "__main__":
    main()
