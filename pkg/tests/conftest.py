import numpy as np
import pytest
import torch

from lsttn.oracles import oracle_finite_diff, relative_error


def check_gradients(loss_fn, params, eps=1e-4):
    """Largest relative error between autograd and central differences, per parameter."""
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    with torch.no_grad():
        numeric = oracle_finite_diff(lambda: loss_fn().item(), [p.data for p in params], eps)
    errors = []
    for p, a, n in zip(params, analytic, numeric):
        a = np.zeros(p.shape) if a is None else a.numpy()
        errors.append(relative_error(a, n))
    return errors


@pytest.fixture
def gradcheck():
    return check_gradients


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_INI = """
[data]
synth = synth.txt
ratios = 0.6, 0.2, 0.2

[layout]
L = 84
S = 12
F = 12
steps_per_day = 12
pretrain_stride = 4
train_stride = 4
eval_stride = 4

[mst]
d_repr = 8
n_layers = 1
n_heads = 2
dropout = 0.0

[extractors]
K = 1
d_emb = 4
stgnn_channels = 4
stgnn_skip = 8
d_short = 8
stgnn_blocks = 1
stgnn_dropout = 0.0
fusion_h1 = 8
fusion_h2 = 8
fusion_h3 = 16

[train]
batch_size = 8
epochs = 2
pretrain_epochs = 2
milestones =
pretrain_milestones =
eval_batch_size = 16
"""

TINY_SYNTH = """
nodes = 4
days = 2
daily_amp = 20
trend_max = 1
noise_sigma = 1
missing_blocks = 30:40:1, 560:563:0
seed = 7
"""


@pytest.fixture
def tiny_config_path(tmp_path):
    (tmp_path / "synth.txt").write_text(TINY_SYNTH)
    path = tmp_path / "run.ini"
    path.write_text(TINY_INI)
    return path


@pytest.fixture
def tiny_setup(tiny_config_path):
    from lsttn.config import load_config
    from lsttn.training import prepare_data

    cfg = load_config(tiny_config_path)
    return cfg, prepare_data(cfg)


# -- acceptance summary: one line per criterion --------------------------------

_CRITERIA: dict[str, dict] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::test_criterion_")[1]
    entry = _CRITERIA.setdefault(name, {"outcome": "pass", "detail": ""})
    for key, value in report.user_properties:
        if key == "detail":
            entry["detail"] = value
    if report.failed:
        entry["outcome"] = "FAIL"
    elif report.skipped and report.when != "teardown":
        entry["outcome"] = "skip"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        entry = _CRITERIA[name]
        number, _, title = name.partition("_")
        line = f"{entry['outcome'].upper():4s}  {int(number):2d}  {title.replace('_', ' ')}"
        if entry["detail"]:
            line += f"  [{entry['detail']}]"
        terminalreporter.write_line(line)
