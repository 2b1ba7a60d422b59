"""Compiled-kernel / pure-Python backend selection and parity."""
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from rankscore import backend_name
from rankscore import _kernels_py

try:
    from rankscore import _kernels as _kernels_c
except ImportError:  # pragma: no cover - compiled extension optional
    _kernels_c = None

needs_compiled = pytest.mark.skipif(_kernels_c is None,
                                    reason="compiled kernels not built")


def test_backend_name_is_known():
    assert backend_name() in ("cython", "python")


def _qr_state(rng, n=80, p=7, lam=1.5):
    X = np.ascontiguousarray(rng.standard_normal((n, p)))
    X[:, 0] = 1.0
    y = np.ascontiguousarray(X[:, :3] @ np.array([1.0, -2.0, 0.5])
                             + rng.standard_normal(n))
    gram = X.T @ X
    gram[np.diag_indices_from(gram)] += 1.0
    chol_l = np.linalg.cholesky(gram)
    thr = np.full(p, lam)
    state = dict(theta=np.zeros(p), r=y.copy(), s=np.zeros(p),
                 u1=np.zeros(n), u2=np.zeros(p))
    return X, y, chol_l, thr, state


@needs_compiled
def test_qr_kernel_parity():
    # run both kernels for a fixed number of iterations with rho adaptation
    # disabled (adapt_factor = 1) so the trajectories are branch-free, then
    # compare the states element by element
    rng = np.random.default_rng(50)
    X, y, chol_l, thr, st_py = _qr_state(rng)
    st_c = {k: v.copy() for k, v in st_py.items()}
    args = (0.3, 1.0, 0.0, 200, 1.0, 10.0)
    out_py = _kernels_py.penalized_qr_admm(
        X, y, chol_l, thr, *args, st_py["theta"], st_py["r"], st_py["s"],
        st_py["u1"], st_py["u2"])
    out_c = _kernels_c.penalized_qr_admm(
        X, y, chol_l, thr, *args, st_c["theta"], st_c["r"], st_c["s"],
        st_c["u1"], st_c["u2"])
    assert out_py[0] == out_c[0] == 200
    assert out_py[4] == out_c[4]  # same final rho
    for key in ("theta", "r", "s", "u1", "u2"):
        np.testing.assert_allclose(st_c[key], st_py[key],
                                   rtol=1e-9, atol=1e-11, err_msg=key)
    assert out_c[1] == pytest.approx(out_py[1], rel=1e-7, abs=1e-10)
    assert out_c[2] == pytest.approx(out_py[2], rel=1e-7, abs=1e-10)


@needs_compiled
def test_quad_kernel_parity():
    rng = np.random.default_rng(51)
    p = 9
    B = rng.standard_normal((30, p))
    A = np.ascontiguousarray(B.T @ B / 30.0)
    lin = np.ascontiguousarray(rng.standard_normal(p))
    l1w = 0.15
    floor = -1e12
    args = (1.0, 1e-9, 20000, 2.0, 10.0, floor)
    st_py = dict(v=np.zeros(p), u=np.zeros(p), w=np.zeros(p))
    st_c = {k: v.copy() for k, v in st_py.items()}
    out_py = _kernels_py.l1_quad_admm(A, lin, l1w, *args, st_py["v"],
                                      st_py["u"], st_py["w"])
    out_c = _kernels_c.l1_quad_admm(A, lin, l1w, *args, st_c["v"],
                                    st_c["u"], st_c["w"])
    assert out_py[3] and out_c[3]
    assert not out_py[5] and not out_c[5]
    np.testing.assert_allclose(st_c["u"], st_py["u"], rtol=1e-6, atol=1e-8)

    def obj(v):
        return 0.5 * v @ A @ v + lin @ v + l1w * np.abs(v).sum()

    assert obj(st_c["u"]) == pytest.approx(obj(st_py["u"]),
                                           rel=1e-9, abs=1e-12)


def _subprocess_backend(env_value):
    env = dict(os.environ)
    env["RANKSCORE_BACKEND"] = env_value
    code = ("import rankscore, json; "
            "print(json.dumps(rankscore.backend_name()))")
    proc = subprocess.run([sys.executable, "-c", code], env=env,
                          capture_output=True, text=True, timeout=120)
    return proc


def test_env_var_forces_python_backend():
    proc = _subprocess_backend("python")
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout) == "python"


def test_env_var_rejects_unknown_backend():
    proc = _subprocess_backend("fortran")
    assert proc.returncode != 0
    assert "RANKSCORE_BACKEND" in proc.stderr


def test_full_solve_agrees_across_backends(tmp_path):
    # one pilot QR solved through the public API under each backend
    code = """
import json
import numpy as np
from rankscore import solve_penalized_qr, qr_objective, backend_name
rng = np.random.default_rng(1234)
X = rng.standard_normal((120, 12)); X[:, 0] = 1.0
y = X[:, :4] @ np.array([0.5, 1.0, -1.0, 2.0]) + rng.standard_normal(120)
fit = solve_penalized_qr(X, y, 0.4, 2.5)
print(json.dumps({"backend": backend_name(),
                  "obj": qr_objective(X, y, fit.theta, 0.4, 2.5),
                  "theta": fit.theta.tolist()}))
"""
    outputs = {}
    for backend in ("python", ""):
        env = dict(os.environ)
        env["RANKSCORE_BACKEND"] = backend
        proc = subprocess.run([sys.executable, "-c", code], env=env,
                              capture_output=True, text=True, timeout=300)
        assert proc.returncode == 0, proc.stderr
        outputs[backend] = json.loads(proc.stdout)
    got = outputs[""]
    ref = outputs["python"]
    assert ref["backend"] == "python"
    assert got["obj"] == pytest.approx(ref["obj"], rel=1e-9, abs=1e-10)
    np.testing.assert_allclose(got["theta"], ref["theta"],
                               rtol=1e-6, atol=1e-8)
