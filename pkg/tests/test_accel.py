import subprocess
import sys
from pathlib import Path

import pytest

from rfd import _accel


@pytest.mark.parametrize("value, expected", [("0", "numpy"), ("off", "numpy"), ("1", "numba")])
def test_env_switch(monkeypatch, value, expected):
    monkeypatch.setenv("RFD_NUMBA", value)
    assert _accel.default_backend() == expected
    assert _accel.resolve(None) == expected


def test_explicit_backend_wins(monkeypatch):
    monkeypatch.setenv("RFD_NUMBA", "0")
    assert _accel.resolve("numba") == "numba"
    with pytest.raises(ValueError):
        _accel.resolve("cuda")


def test_numpy_only_process_runs_pipeline(tmp_path):
    code = ("from rfd import _accel, meshes; from rfd.geometry.bvh import build_bvh;"
            "from rfd.geometry.kernels import closest_hit; import numpy as np;"
            "m = meshes.cube(1.0, (0, 0, 3)); print(_accel.default_backend(),"
            " closest_hit(np.zeros((1, 3)), np.array([[0, 0, 1.0]]), build_bvh(m.vertices[m.triangles]))[1][0])")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True,
                         env={"RFD_NUMBA": "0", "PATH": ""}, check=True).stdout.split()
    assert out[0] == "numpy" and float(out[1]) == pytest.approx(2.5)


def test_benchmark_smoke(capsys):
    sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "benchmarks"))
    import bench_kernels
    bench_kernels.main(["--repeat", "1"])
    assert "speedup" in capsys.readouterr().out
