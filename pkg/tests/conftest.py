import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))  # for oracles.py

from mohd.config import AnalysisConfig, ModelConfig, RunConfig, TrainConfig
from mohd.training import train

FIXTURE_TXT = os.path.join(os.path.dirname(__file__), "data", "fixture.txt")

_WORDS = (
    "the of and a to in is that it was for on are as with his they at be this "
    "have from or one had by word but not what all were we when your can said "
    "there use an each which she do how their if will up other about out many "
    "then them these so some her would make like him into time has look two "
    "more write go see number no way could people my than first water been "
    "call who oil its now find long down day did get come made may part over "
    "new sound take only little work know place year live me back give most "
    "very after thing our just name good sentence man think say great where "
    "help through much before line right too mean old any same tell boy follow "
    "came want show also around form three small set put end does another well "
    "large must big even such because turn here why ask went men read need land"
).split()


def make_prose(n_bytes: int, seed: int) -> bytes:
    """Deterministic English-like filler with Zipf-weighted word frequencies."""
    rng = np.random.default_rng(seed)
    weights = 1.0 / np.arange(1, len(_WORDS) + 1)
    weights /= weights.sum()
    words = rng.choice(len(_WORDS), size=max(64, n_bytes // 4), p=weights)
    lengths = rng.integers(5, 13, size=len(words) // 5 + 1)
    out, pos = [], 0
    for n in lengths:
        if pos >= len(words):
            break
        sentence = " ".join(_WORDS[i] for i in words[pos : pos + n])
        out.append(sentence.capitalize() + ". ")
        pos += n
    text = "".join(out).encode()
    while len(text) < n_bytes:
        text += text
    return text[:n_bytes]


def make_code(n_bytes: int, seed: int) -> bytes:
    """Deterministic code-shaped filler, visibly unlike the prose domain."""
    rng = np.random.default_rng(seed)
    chunks = []
    size = 0
    while size < n_bytes:
        i, k, n = rng.integers(0, 100, size=3)
        kind = rng.integers(0, 4)
        if kind == 0:
            s = f"def fn_{i}(x, y):\n    return x * {k} + y - {n}\n\n"
        elif kind == 1:
            s = f"for idx in range({n}):\n    total_{i} += vals[idx] % {k + 1}\n\n"
        elif kind == 2:
            s = f"if flags[{i}] and count > {k}:\n    buffer.append(items[{n}])\n\n"
        else:
            s = f"result_{i} = {{'key_{k}': [{n}, {i}, {k}], 'ok': True}}\n\n"
        chunks.append(s)
        size += len(s)
    return "".join(chunks).encode()[:n_bytes]


def _write(path, blob: bytes) -> str:
    path.write_bytes(blob)
    return str(path)


@pytest.fixture(scope="session")
def prose_corpus_small(tmp_path_factory):
    """~300 KB prose corpus for quick training fixtures."""
    path = tmp_path_factory.mktemp("corpus") / "prose_small.txt"
    return _write(path, make_prose(300_000, seed=7))


@pytest.fixture(scope="session")
def prose_corpus_1mb(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "prose_1mb.txt"
    return _write(path, make_prose(1_000_000, seed=11))


@pytest.fixture(scope="session")
def prose_corpus_5mb(tmp_path_factory):
    """The fixed corpus for the training-analog acceptance runs."""
    path = tmp_path_factory.mktemp("corpus") / "prose_5mb.txt"
    return _write(path, make_prose(5_000_000, seed=13))


@pytest.fixture(scope="session")
def code_corpus_small(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "code_small.txt"
    return _write(path, make_code(300_000, seed=17))


def small_dense_config(corpus: str, out_dir: str, **train_kw) -> RunConfig:
    model = ModelConfig(
        arch="vanilla", d_base=32, heads=4, head_dim=8, ffn_dim=128, depth=3,
        fusion_r=4, attn_subdims=8, ffn_subdims=8,
    )
    defaults = dict(
        corpus=corpus, seq_len=64, batch_size=8, steps=300, lr=3e-4, seed=5,
        eval_interval=100, checkpoint_dir=out_dir,
    )
    defaults.update(train_kw)
    return RunConfig(model=model, train=TrainConfig(**defaults), analysis=AnalysisConfig())


def small_mohd_config(corpus: str, out_dir: str, beta: float = 0.01, **train_kw) -> RunConfig:
    model = ModelConfig(
        arch="mohd", d_base=32, heads=4, head_dim=8, ffn_dim=128, depth=2,
        fusion_r=4, attn_subdims=8, attn_delta=0.75, attn_shared=0.5,
        ffn_subdims=8, ffn_delta=0.75, ffn_shared=0.5, balance_beta=beta,
    )
    defaults = dict(
        corpus=corpus, seq_len=32, batch_size=8, steps=250, lr=3e-4, seed=5,
        eval_interval=100, checkpoint_dir=out_dir,
    )
    defaults.update(train_kw)
    return RunConfig(model=model, train=TrainConfig(**defaults), analysis=AnalysisConfig())


@pytest.fixture(scope="session")
def toy_trained_dense(tmp_path_factory, prose_corpus_small):
    """A small trained dense model shared by the analysis-suite tests."""
    out = tmp_path_factory.mktemp("toy_dense")
    cfg = small_dense_config(prose_corpus_small, str(out))
    return cfg, train(cfg)


@pytest.fixture(scope="session")
def beta_pair(tmp_path_factory, prose_corpus_small):
    """Matched sparse runs with and without the balance penalty."""
    results = {}
    for beta in (0.05, 0.0):
        out = tmp_path_factory.mktemp(f"beta_{beta}")
        cfg = small_mohd_config(prose_corpus_small, str(out), beta=beta, steps=250)
        results[beta] = (cfg, train(cfg))
    return results
