"""Smoke test for the Python bindings.

Build and run from the repository root:

    cargo build --release -p latentflow-py
    cp target/release/liblatentflow_py.so python/latentflow.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import latentflow as lf  # noqa: E402


def small_config():
    cfg = lf.RunConfig.from_toml(
        """
seed = 3
[wake]
grid_h = 16
grid_w = 16
[vae]
grid_h = 16
grid_w = 16
enc_channels = [4, 8, 8]
enc_kernels = [3, 3, 3]
enc_strides = [2, 2, 2]
dec_channels = [8, 4, 4]
dec_seed_channels = 8
[p2z]
hidden = 16
blocks = 1
[data]
n_low = 20
n_high = 64
[train]
epochs = 2
epos_p2z = 2
[spod]
n_dft = 32
overlap = 16
n_modes = 2
"""
    )
    cfg.validate()
    return cfg


def main():
    assert lf.pressure_to_cp(61.25) == 1.0
    assert abs(lf.strouhal(74.5, 0.02, 10.0) - 0.149) < 1e-12
    assert lf.block_count(1024, 256, 200) == 14
    assert lf.kl_divergence([0.0] * 4, [0.0] * 4) == 0.0
    assert lf.beta_schedule(2000, 2000, 0.001) == 0.001
    assert lf.alpha_schedule(1000, 1000, 0.01) == 0.01

    try:
        lf.RunConfig.from_toml("[train]\nlr_vea = 1.0\n")
    except ValueError as e:
        assert "lr_vea" in str(e)
    else:
        raise AssertionError("unknown key accepted")

    wake = lf.WakeModel()
    u, v = wake.field(0.1)
    assert len(u) == 64 and len(u[0]) == 64 and len(v) == 64
    assert len(wake.cp(0.0)) == 30
    times = [k / 64.0 for k in range(1024)]
    cl = [wake.lift(t) for t in times]
    low = [wake.lift(float(k)) for k in range(600)]
    best = lf.match_by_lift(cl, low, 0.05)[0]
    assert best["delta"] <= 0.05

    rows = [[math.sin(2 * math.pi * 8 / 64 * t + j) for j in range(3)] for t in range(512)]
    s = lf.spod(rows, 1.0 / 64.0, 64, 32, 2)
    assert abs(s["peaks"][0][0] - 8.0) < 1e-12, s["peaks"]
    p = lf.pod([[float(i * j % 5) for j in range(6)] for i in range(10)], 3)
    assert len(p["modes"]) == 3 and abs(sum(x * x for x in p["modes"][0]) - 1.0) < 1e-12

    cfg = small_config()
    with tempfile.TemporaryDirectory() as out:
        try:
            lf.train_p2z(cfg, out)
        except FileNotFoundError as e:
            assert "vae.lfck" in str(e)
        else:
            raise AssertionError("missing checkpoint accepted")
        manifest = lf.run_all(cfg, out)
        assert manifest["config_hash"] == cfg.hash()
        assert manifest["metrics"]["snapshots"] == 64
        fields = lf.read_field_file(os.path.join(out, "inferred", "high_fields.lff"))
        assert len(fields["times"]) == 64 and fields["h"] == 16
        t, cp = lf.read_pressure_file(os.path.join(out, "data", "high_pressure.csv"))
        assert len(t) == 64 and len(cp[0]) == 30

    print("python smoke test passed")


if __name__ == "__main__":
    main()
