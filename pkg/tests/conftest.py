import numpy as np
import pytest
from hypothesis import settings

from mmsae.embedding_store import EmbeddingMatrix, PairedDataset, normalize_rows
from mmsae.sae_model import SaeParams

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_params(rng, d, p, scale=1.0):
    return SaeParams(
        w_enc=scale * rng.normal(size=(p, d)),
        w_dec=rng.normal(size=(d, p)),
        b_enc=0.1 * rng.normal(size=p),
        b_pre_a=0.1 * rng.normal(size=d),
        b_pre_b=0.1 * rng.normal(size=d),
    )


def unit_rows(rng, n, d):
    return normalize_rows(rng.normal(size=(n, d)))


def paired(rng, n, d, modalities=("image", "text")):
    return PairedDataset(EmbeddingMatrix(unit_rows(rng, n, d), modalities[0]),
                         EmbeddingMatrix(unit_rows(rng, n, d), modalities[1]))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        _ACCEPTANCE[name] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda n: int(n.split("_")[2])):
        outcome, detail = _ACCEPTANCE[name]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        label = " ".join(name.split("_")[3:])
        terminalreporter.write_line(f"criterion {name.split('_')[2]} ({label}): {verdict}  {detail}")
