import numpy as np
import pytest

from lesionseg.volume import MultiPhaseCase, PhaseVolume


def make_case(shape=(24, 24, 24), spacing=(1.0, 1.0, 1.0), mask=None, seed=0,
              n_phases=3, constant=None):
    """Small synthetic case for unit tests (not a phantom)."""
    rng = np.random.default_rng(seed)
    phase_ids = ("arterial", "delay", "venous")[:n_phases]
    phases = []
    for i, pid in enumerate(phase_ids):
        if constant is not None:
            vox = np.full(shape, constant, dtype=np.float32)
        else:
            vox = rng.random(shape).astype(np.float32)
        phases.append(PhaseVolume(vox, spacing, pid))
    if mask is None:
        mask = np.zeros(shape, dtype=np.uint8)
        c = tuple(s // 2 for s in shape)
        mask[c[0] - 2:c[0] + 2, c[1] - 2:c[1] + 2, c[2] - 2:c[2] + 2] = 1
    return MultiPhaseCase(phases, mask, subject_id=f"case-{seed}")


@pytest.fixture
def small_case():
    return make_case()
