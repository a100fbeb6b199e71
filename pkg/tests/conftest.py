import numpy as np
import pytest
import torch

from mmflow.model import ModelConfig, SizeCondition, TextSequence, TokenGrid


def tiny_config(**kw) -> ModelConfig:
    base = dict(depth=2, hidden=32, heads=2, text_dim=16, freq_dim=32, mlp_ratio=2.0)
    base.update(kw)
    return ModelConfig(**base)


def perturb_(module: torch.nn.Module, seed: int = 0, scale: float = 0.05):
    """Add noise to every parameter so adaLN-zero layers are no longer inert."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return module


def random_sample(cfg: ModelConfig, rows: int, cols: int, text_len: int, gen, dtype=torch.float32, t=None):
    grid = TokenGrid(torch.randn(rows, cols, cfg.token_dim, generator=gen, dtype=dtype),
                     (rows * 4, cols * 4))
    text = TextSequence(torch.randn(text_len, cfg.text_dim, generator=gen, dtype=dtype))
    if t is None:
        t = float(torch.rand((), generator=gen))
    return grid, text, SizeCondition(rows * 4, cols * 4), t


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_examples(cfg: ModelConfig, gen, shapes=((2, 3), (3, 2), (2, 2)), dtype=torch.float32,
                  masked=True):
    """TrainExamples over random grids; when ``masked`` the first cell of each is a defect."""
    from mmflow.training import DefectMask, TrainExample

    out = []
    for i, (r, c) in enumerate(shapes):
        x0 = torch.randn(r, c, cfg.token_dim, generator=gen, dtype=dtype)
        eps = torch.randn(r, c, cfg.token_dim, generator=gen, dtype=dtype)
        keep = np.ones((r, c), bool)
        if masked:
            keep[0, 0] = False
        out.append(TrainExample(TokenGrid(x0, (4 * r, 4 * c)), f"a red circle {i}",
                                SizeCondition(4 * r, 4 * c), 0.2 + 0.25 * i, eps, DefectMask(keep)))
    return out


# --- acceptance report -----------------------------------------------------
# Tests marked ``criterion(n, title)`` get one PASS/FAIL line in the terminal summary.

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when not in ("setup", "call"):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "details": []})
    if call.excinfo is not None:
        entry["ok"] = False
        entry["details"].append(f"{item.name}: {call.excinfo.typename}")
    elif call.when == "call":
        entry["details"].extend(v for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(f"[{status}] {n:2d}. {e['title']}  {'; '.join(e['details'])}")
