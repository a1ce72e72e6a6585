"""Shared fixtures: the reference synthetic dataset and one trained model,
built once per session because training takes minutes."""

import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from qks.config import DEFAULTS, section
from qks.dataset_io import SyntheticConfig, generate_synthetic, load_split
from qks.evaluation import MetricWarning, predict
from qks.training import TrainSettings, model_config_for, train


def reference_synth(seed=0) -> SyntheticConfig:
    return SyntheticConfig.from_dict(dict(section(DEFAULTS, "synth"), seed=seed))


def reference_settings(**over) -> TrainSettings:
    return TrainSettings.from_dict(dict(section(DEFAULTS, "train"), **over))


def reference_model(manifest, **over):
    return model_config_for(manifest, **dict(section(DEFAULTS, "model"), **over))


@dataclass
class ReferenceRun:
    manifest: object
    train: object
    test: object
    table: object
    result: object
    preds: object
    out_dir: Path
    seconds: float


@pytest.fixture(scope="session")
def reference_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("reference")
    man = generate_synthetic(reference_synth(0), root / "data")
    return man, load_split(man, "train"), load_split(man, "test"), man.label_table(), root


@pytest.fixture(scope="session")
def reference_run(reference_data):
    man, tr, te, table, root = reference_data
    t0 = time.perf_counter()
    result = train(man, reference_model(man), reference_settings(checkpoint_every=0),
                   seed=0, out_dir=root / "run", data=tr, table=table)
    seconds = time.perf_counter() - t0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MetricWarning)
        preds = predict(result.head, te.features, table, final_attention=True)
    return ReferenceRun(man, tr, te, table, result, preds, root / "run", seconds)


def ema(values, coef=0.9):
    out = np.empty(len(values))
    acc = None
    for i, v in enumerate(values):
        acc = v if acc is None else coef * acc + (1 - coef) * v
        out[i] = acc
    return out


# ---------------------------------------------------------------------------
# acceptance summary
# ---------------------------------------------------------------------------

_ACCEPTANCE = {}


def record_acceptance(n, ok, detail):
    _ACCEPTANCE[n] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
