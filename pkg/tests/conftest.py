import sys
from pathlib import Path

import pytest
import torch
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

from neftsum.corpus import build_instruction_samples, synthetic_records  # noqa: E402
from neftsum.model import CausalLM, ModelConfig, init_params  # noqa: E402
from neftsum.tokenizer import train_bpe  # noqa: E402


@pytest.fixture(scope="session")
def csds_records():
    return synthetic_records(6, "csds", seed=3)


@pytest.fixture(scope="session")
def samsum_records():
    return synthetic_records(4, "samsum", seed=3)


@pytest.fixture(scope="session")
def small_tokenizer(csds_records, samsum_records):
    texts = []
    for recs, tag in ((csds_records, "csds"), (samsum_records, "samsum")):
        for s in build_instruction_samples(recs, tag):
            texts += [s.instruction, s.dialogue, s.summary]
    return train_bpe(texts, 320)


@pytest.fixture
def mini_config():
    return ModelConfig.preset("mini")


@pytest.fixture
def mini_model(mini_config):
    return CausalLM(init_params(mini_config, seed=7, dtype=torch.float64), mini_config)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
