import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import vaecircuits
from vaecircuits.data import SyntheticSCM, generate_synthetic
from vaecircuits.engine import SeededRNG, Tensor, backward
from vaecircuits.engine import functional as F
from vaecircuits.harness.checkpoint import load_checkpoint, save_checkpoint
from vaecircuits.models import ModelConfig, init_model, train

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

PKG_ROOT = Path(vaecircuits.__file__).parent


def tiny_config(**kw) -> ModelConfig:
    base = dict(variant="standard", image_size=16, conv_channels=(3, 4, 5), latent_dim=3,
                disc_hidden=(8, 8), batch_size=16, epochs=1)
    base.update(kw)
    return ModelConfig(**base)


def random_model(seed: int = 0, **kw):
    cfg = tiny_config(seed=seed, **kw)
    return init_model(cfg, SeededRNG(seed))


def tiny_images(n: int = 32, size: int = 16, seed: int = 0) -> np.ndarray:
    scm = SyntheticSCM(image_size=size)
    return generate_synthetic(scm, n, seed).images


def weighted_sum(out: Tensor, seed: int = 123) -> Tensor:
    """Scalar probe sum(out * R) with fixed random R, so every output element matters."""
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return F.sum(F.mul(out, Tensor(r)))


def fd_check(fn, arrays, h: float = 1e-5, rel_tol: float = 1e-4, abs_floor: float = 1e-6,
             max_entries: int | None = None, seed: int = 0) -> float:
    """Central finite differences vs reverse mode for scalar ``fn(*tensors)``.

    Returns the worst relative error; entries whose analytic gradient is below
    ``abs_floor`` are compared absolutely.
    """
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    loss = fn(*tensors)
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        g = t.grad.reshape(-1)
        for i in idx:
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[k].reshape(-1)[i] += h
            minus[k].reshape(-1)[i] -= h
            fp = fn(*[Tensor(a) for a in plus]).item()
            fm = fn(*[Tensor(a) for a in minus]).item()
            num = (fp - fm) / (2 * h)
            scale = max(abs(g[i]), abs(num))
            err = abs(g[i] - num) if scale < abs_floor else abs(g[i] - num) / scale
            worst = max(worst, err)
    return worst


def _source_digest() -> str:
    h = hashlib.sha256()
    for p in sorted(PKG_ROOT.rglob("*.py")):
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def model_cache(request):
    """Train-or-load helper keyed by config, data recipe and package source."""
    root = Path(request.config.cache.mkdir("vaecircuits-models"))
    digest = _source_digest()

    def get(cfg: ModelConfig, images_fn, data_key: dict):
        key = json.dumps({"cfg": cfg.to_dict(), "data": data_key, "src": digest},
                         sort_keys=True)
        path = root / (hashlib.sha256(key.encode()).hexdigest()[:24] + ".vcp")
        meta = path.with_suffix(".json")
        if path.exists() and meta.exists():
            return load_checkpoint(path), json.loads(meta.read_text())
        images = images_fn()
        t0 = time.perf_counter()
        model, log = train(images, cfg)
        info = {"epochs": log.epochs, "seconds": time.perf_counter() - t0}
        save_checkpoint(path, model)
        meta.write_text(json.dumps(info))
        return model, info

    return get


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
