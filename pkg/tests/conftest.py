import os

# BLAS pinned before numpy loads, as the CLI does; numba picks its default pool.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dynstyle.camera import look_at
from dynstyle.deformation import DeformationField
from dynstyle.scene import GaussianSet, Scene

settings.register_profile("dynstyle", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("dynstyle")

ACCEPTANCE: dict = {}


def record_acceptance(number: int, text: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE[number] = (text, ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        text, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {text}"
                                    + (f" ({detail})" if detail else ""))


def random_scene(seed: int, n: int = 8, *, sh: bool = False, mlp: np.ndarray | None = None,
                 deform_noise: float = 0.0, extent: float = 1.0) -> Scene:
    rng = np.random.default_rng(seed)
    rot = rng.normal(size=(n, 4))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    gs = GaussianSet(rng.uniform(-0.6, 0.6, (n, 3)), rot, rng.uniform(0.08, 0.3, (n, 3)),
                     rng.uniform(0.2, 0.95, n), rng.random((n, 3)),
                     rng.normal(0, 0.2, (n, 9)) if sh else None, mlp)
    field = DeformationField.initialized(seed)
    if deform_noise:
        field = DeformationField(field.params + rng.normal(0, deform_noise, field.params.shape).astype(np.float32))
    cam = look_at(rng.normal(0, 0.2, 3) + [0.0, 0.0, -3.0], np.zeros(3), fx=20.0, fy=20.0, width=16, height=16)
    return Scene(gs, field, [cam], rng.random(3), extent)


@pytest.fixture
def cam16():
    return look_at([0.0, 0.0, -3.0], np.zeros(3), fx=20.0, fy=20.0, width=16, height=16)
