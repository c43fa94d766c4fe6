import pytest
import torch

from mcsynth.nets import GeneratorConfig

torch.set_num_threads(1)


def tiny_config(**kw) -> GeneratorConfig:
    base = dict(image_size=16, base_channels=8, num_scales=2, attention_resolution=8, attention_heads=2,
                time_embed_dim=16, z_dim=4, groups=4)
    base.update(kw)
    return GeneratorConfig(**base)


def central_diff(f, x: torch.Tensor, idx, h: float = 1e-6) -> float:
    """Central finite difference of scalar ``f`` w.r.t. ``x[idx]``."""
    xp = x.detach().clone()
    xm = x.detach().clone()
    xp[idx] += h
    xm[idx] -= h
    return (float(f(xp).detach()) - float(f(xm).detach())) / (2 * h)


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def criterion(request):
    """``criterion(n, text, ok, detail)`` records a pass/fail line for the summary, then asserts.

    ``known`` names a measured, documented shortfall: the line still reads FAIL but the
    test is reported as xfail instead of an error.
    """
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def check(n, text, ok, detail="", known=None):
        tag = "PASS" if ok else ("FAIL, known" if known else "FAIL")
        lines.append(f"[{tag}] criterion {n}: {text}" + (f" ({detail})" if detail else ""))
        if not ok and known:
            pytest.xfail(f"criterion {n}: {known}")
        assert ok, f"criterion {n} failed: {text} {detail}"

    return check


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
