import json
import random
from pathlib import Path

import pytest
import torch

from domain_atsc.model import EncoderConfig, EncoderModel
from domain_atsc.text import ReviewDoc, Vocab, build_vocab

FIXTURES = Path(__file__).parent / "fixtures"

WORDS = ("the food was good bad great awful service staff pizza pasta screen battery keyboard "
         "i love their dumplings is an input device touchscreen and but very slow fast .").split()


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def vocab() -> Vocab:
    return build_vocab([WORDS])


def random_docs(n_docs: int, seed: int, sentences=(2, 5), length=(3, 9), prefix="d") -> list[ReviewDoc]:
    rng = random.Random(seed)
    return [ReviewDoc(f"{prefix}{i:04d}",
                      [[rng.choice(WORDS) for _ in range(rng.randint(*length))]
                       for _ in range(rng.randint(*sentences))], "restaurants")
            for i in range(n_docs)]


@pytest.fixture
def docs() -> list[ReviewDoc]:
    return random_docs(40, seed=3)


def toy_model(vocab_size: int, seed: int = 0, dtype=torch.float64, max_len: int = 32, **kw) -> EncoderModel:
    cfg = EncoderConfig(num_layers=2, hidden_dim=64, num_heads=2, ff_dim=128, vocab_size=vocab_size,
                        max_len=max_len, **kw)
    return EncoderModel(cfg, seed=seed).to(dtype)


def load_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


# one line per acceptance criterion, echoed after the run even when output is captured
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
