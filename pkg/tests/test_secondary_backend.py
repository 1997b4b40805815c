"""Cross-implementation conformance against the TypeScript backend.

These tests spawn the built backend (backend/dist) over stdio; they skip when
node or the build output is missing so the primary suite stands alone.
"""

import shutil
import subprocess
from pathlib import Path

import numpy as np
import pytest

from mvd.bridge import PipeTransport, RemoteDenoiser
from mvd.denoise import DenoiserRequest, oracle_denoise
from mvd.imgio import write_pfm
from mvd.schedule import build_schedule, ddim_step

BACKEND_MAIN = Path(__file__).resolve().parents[1] / "backend" / "dist" / "src" / "main.js"

pytestmark = pytest.mark.skipif(
    shutil.which("node") is None or not BACKEND_MAIN.exists(),
    reason="node or built backend missing (run: cd backend && npm run build)",
)


def spawn_oracle_backend(target_pfm: Path) -> PipeTransport:
    proc = subprocess.Popen(
        ["node", str(BACKEND_MAIN), "--mode", "stdio", "--predictor", "oracle",
         "--target", str(target_pfm)],
        stdin=subprocess.PIPE,
        stdout=subprocess.PIPE,
    )
    return PipeTransport(proc)


def test_oracle_bit_identical_over_random_requests(tmp_path):
    s = build_schedule(150)
    rng = np.random.default_rng(17)
    target = rng.standard_normal((3, 5, 4)).astype(np.float32)
    target_pfm = tmp_path / "target.pfm"
    write_pfm(target_pfm, np.transpose(target, (1, 2, 0)))

    remote = RemoteDenoiser(spawn_oracle_backend(target_pfm), s, timeout=30)
    try:
        for _ in range(100):
            t = int(rng.integers(1, 151))
            latent = rng.standard_normal((3, 5, 4)).astype(np.float32)
            got = remote(DenoiserRequest(0, t, latent)).eps
            want = oracle_denoise(DenoiserRequest(0, t, latent), target, s).eps
            assert got.tobytes() == want.tobytes()
    finally:
        remote.close()


def test_end_to_end_rollout_matches_in_process(tmp_path):
    s = build_schedule(60)
    rng = np.random.default_rng(23)
    target = rng.random((3, 6, 6)).astype(np.float32)
    target_pfm = tmp_path / "target.pfm"
    write_pfm(target_pfm, np.transpose(target, (1, 2, 0)))

    remote = RemoteDenoiser(spawn_oracle_backend(target_pfm), s, timeout=30)
    x_remote = rng.standard_normal((3, 6, 6)).astype(np.float32)
    x_local = x_remote.copy()
    try:
        for t in range(60, 0, -1):
            eps_r = remote(DenoiserRequest(0, t, x_remote)).eps
            x_remote = ddim_step(x_remote, eps_r, t, s).astype(np.float32)
            eps_l = oracle_denoise(DenoiserRequest(0, t, x_local), target, s).eps
            x_local = ddim_step(x_local, eps_l, t, s).astype(np.float32)
    finally:
        remote.close()
    assert np.max(np.abs(x_remote - x_local)) <= 1e-6


def test_backend_death_aborts_step(tmp_path):
    s = build_schedule(10)
    rng = np.random.default_rng(3)
    target = rng.random((1, 3, 3)).astype(np.float32)
    target_pfm = tmp_path / "target.pfm"
    write_pfm(target_pfm, target[0])

    transport = spawn_oracle_backend(target_pfm)
    remote = RemoteDenoiser(transport, s, timeout=10)
    transport.proc.kill()
    transport.proc.wait()
    from mvd.errors import BackendError

    with pytest.raises(BackendError):
        remote(DenoiserRequest(0, 5, rng.standard_normal((1, 3, 3)).astype(np.float32)))
