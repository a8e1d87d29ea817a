import numpy as np
import pytest
import torch

from textreid.corpus import load_manifest, save_manifest
from textreid.encoders import AlignmentModel, ModelConfig
from textreid.synth import RenderParams, Vocabulary, generate_corpus


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """8 identities x 3 images, default render params."""
    out = tmp_path_factory.mktemp("tiny_corpus")
    manifest, vocab = generate_corpus(8, 3, RenderParams(), seed=11, out_dir=out)
    save_manifest(manifest, out / "manifest.jsonl")
    vocab.save(out / "vocab.txt")
    return {"dir": out, "manifest": manifest, "vocab": vocab}


@pytest.fixture()
def micro_config():
    def make(vocab_size: int, **overrides) -> ModelConfig:
        defaults = dict(
            image_size=32, patch_size=16, embed_dim=16, num_heads=2,
            vision_layers=1, text_layers=1, fusion_layers=1,
            proj_dim=8, max_text_len=10, max_phrase_len=6, vocab_size=vocab_size,
        )
        defaults.update(overrides)
        return ModelConfig(**defaults)
    return make


def build_model(config: ModelConfig, seed: int = 0) -> AlignmentModel:
    torch.manual_seed(seed)
    return AlignmentModel(config)


def random_unit_vectors(rng: np.random.Generator, n: int, d: int) -> torch.Tensor:
    x = torch.tensor(rng.standard_normal((n, d)))
    return torch.nn.functional.normalize(x, dim=-1)
