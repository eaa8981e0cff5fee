import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from hiergen.data import synthetic_dataset
from hiergen.pipeline import Bundle
from hiergen.tokenizer import TextVocab
from hiergen.data import vocabulary_words
from hiergen.training import (EncodedCorpus, TrainConfig, TrainLog, build_tokenizer, encode_corpus,
                              finetune_sr, pretrain_coglm)


@dataclass
class ToyRun:
    bundle: Bundle
    train: EncodedCorpus
    val: EncodedCorpus
    logs: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)


@pytest.fixture(scope="session")
def toy() -> ToyRun:
    """2k-pair synthetic set, desk tokenizer and all three trained stages (built once)."""
    secs = {}
    t = time.process_time()
    splits = synthetic_dataset(2000, seed=0)
    cb, vocab = build_tokenizer(splits.train, seed=0)
    train = encode_corpus(splits.train, cb, vocab)
    val = encode_corpus(splits.val, cb, vocab)
    secs["data"] = time.process_time() - t
    logs = {}
    t = time.process_time()
    coglm, logs["coglm"] = pretrain_coglm(train, vocab, TrainConfig())
    secs["coglm"] = time.process_time() - t
    t = time.process_time()
    direct, logs["direct"] = finetune_sr(coglm, "direct", train, vocab)
    iterative, logs["iterative"] = finetune_sr(coglm, "iterative", train, vocab)
    secs["sr"] = time.process_time() - t
    return ToyRun(Bundle(cb, vocab, coglm, direct, iterative), train, val, logs, secs)


@pytest.fixture
def small_vocab():
    return TextVocab(vocabulary_words(), offset=32)


@pytest.fixture(scope="session")
def tiny_bundle() -> Bundle:
    """Random 32-entry clustered codebook and briefly trained small models; fast, not meaningful."""
    from hiergen.model import ModelConfig
    from hiergen.tokenizer import Codebook, cluster_codebook
    from hiergen.training import desk_model_config, random_token_corpus

    rng = np.random.default_rng(0)
    cb = cluster_codebook(Codebook(8, rng.random((32, 8 * 8 * 3))), 4, seed=0)
    vocab = TextVocab(vocabulary_words(), offset=cb.size)
    corpus = random_token_corpus(vocab, 16, rng)
    cfg = TrainConfig(steps=2, batch_size=2, warmup=1)
    coglm, _ = pretrain_coglm(corpus, vocab, cfg, model_config=desk_model_config(vocab, d_model=16, n_heads=2))
    direct, _ = finetune_sr(coglm, "direct", corpus, vocab, cfg)
    iterative, _ = finetune_sr(coglm, "iterative", corpus, vocab, cfg)
    return Bundle(cb, vocab, coglm, direct, iterative)
