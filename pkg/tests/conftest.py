"""Shared fixtures: golden files, the training corpus, and meta-trained models.

The trained-model fixtures run the real offline pipeline once per session
(about two minutes); everything downstream (adaptation, tuning, acceptance)
shares them.
"""

import pathlib
import re

import pytest

from kerntune.harness import DatasetParams, dataset_samples, gen_dataset
from kerntune.meta import MetaConfig, meta_train, pretrain
from kerntune.util import rng_from

GOLDEN = pathlib.Path(__file__).parent / "golden"


@pytest.fixture(scope="session")
def golden_dir():
    return GOLDEN


@pytest.fixture(scope="session")
def full_dataset():
    """The default offline corpus: 47 kernels x 200 configs on platform-A."""
    return gen_dataset(DatasetParams(), rng_from("gen-dataset", 0))


@pytest.fixture(scope="session")
def trained_models(full_dataset):
    """Meta-trained cost models for both graph representations."""
    cfg = MetaConfig(seed=0)
    models = {}
    for rep in ("raw", "super"):
        samples = dataset_samples(full_dataset, augmented=rep == "super")
        m = pretrain(samples, cfg, rng_from("pretrain", rep, 0))
        models[rep] = meta_train(m, samples, cfg, rng_from("metatrain", rep, 0))
    return models


# --- acceptance summary ------------------------------------------------------
#
# Tests in test_acceptance.py are named test_NN_short_name; after the run the
# terminal summary prints one PASS/FAIL line per criterion.

_ACCEPT = re.compile(r"test_acceptance\.py::test_(\d+)_([a-z0-9_]+)")
_results: dict = {}


def pytest_runtest_logreport(report):
    m = _ACCEPT.search(report.nodeid)
    if not m:
        return
    num, name = int(m.group(1)), m.group(2)
    if report.when == "call" or (report.when == "setup" and report.failed):
        outcome = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _results[num] = (name, outcome)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_results):
        name, outcome = _results[num]
        terminalreporter.write_line(
            f"criterion {num:2d} {name.replace('_', '-'):<32s} {outcome}"
        )
