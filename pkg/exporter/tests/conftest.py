import numpy as np
import pytest
import torch


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory) -> str:
    """A local 8-layer pre-norm causal LM plus a word-level tokenizer."""
    from tokenizers import Tokenizer, models, pre_tokenizers
    from transformers import LlamaConfig, LlamaForCausalLM, PreTrainedTokenizerFast

    path = tmp_path_factory.mktemp("tiny_model")
    config = LlamaConfig(
        vocab_size=64,
        hidden_size=48,
        intermediate_size=96,
        num_hidden_layers=8,
        num_attention_heads=4,
        num_key_value_heads=2,
        max_position_embeddings=256,
    )
    torch.manual_seed(1234)
    model = LlamaForCausalLM(config)
    model.save_pretrained(path)

    vocab = {f"w{i}": i for i in range(62)}
    vocab["[UNK]"] = 62
    vocab["[PAD]"] = 63
    tok = Tokenizer(models.WordLevel(vocab, unk_token="[UNK]"))
    tok.pre_tokenizer = pre_tokenizers.Whitespace()
    fast = PreTrainedTokenizerFast(
        tokenizer_object=tok, unk_token="[UNK]", pad_token="[PAD]"
    )
    fast.save_pretrained(path)
    return str(path)


@pytest.fixture(scope="session")
def calib_text(tmp_path_factory) -> str:
    """Enough pseudo-words for a few hundred short calibration sequences."""
    rng = np.random.Generator(np.random.PCG64(99))
    words = [f"w{i}" for i in rng.integers(0, 62, size=12_000)]
    path = tmp_path_factory.mktemp("text") / "calib.txt"
    path.write_text(" ".join(words), encoding="utf-8")
    return str(path)
