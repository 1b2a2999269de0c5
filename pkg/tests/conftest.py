"""Shared fixtures: a small on-disk synthetic corpus and deterministic torch.

The corpus here is intentionally tiny (2 languages x 8 clips) so unit tests
stay fast; the acceptance suite builds its own full-size corpus.
"""

import numpy as np
import pytest
import torch

from lipsynth.synthkit import SynthCorpusConfig, build_synthetic_corpus, make_languages, make_rig

torch.set_num_threads(1)

ACCEPTANCE_LINES: list[str] = []


def record_criterion(n: int, ok: bool, detail: str) -> None:
    """Collect a one-line verdict; printed in the terminal summary."""
    ACCEPTANCE_LINES.append(f"[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def rig():
    return make_rig(seed=5)


@pytest.fixture(scope="session")
def languages():
    return make_languages(2, seed=5, conflicting=True)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    cfg = SynthCorpusConfig(
        out_dir=tmp_path_factory.mktemp("tiny_corpus"),
        n_languages=2,
        clips_per_language=8,
        min_symbols=3,
        max_symbols=5,
        seed=13,
    )
    return build_synthetic_corpus(cfg)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
