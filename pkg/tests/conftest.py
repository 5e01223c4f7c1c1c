import pytest
import torch

from mdmd.model import MdmdModel, ModelConfig
from mdmd.schema import SchemaSet, make_schema


def two_point_schema(name="two"):
    groups = [[] for _ in range(12)]
    groups[5], groups[6] = [0], [1]
    return make_schema(name, 2, groups, normalization={"pair": [0, 1]}, flip_permutation=[1, 0])


TOY = dict(image_size=32, patch_size=8, embed_dim=32, encoder_layers=1, encoder_heads=4, decoder_blocks=1)


def toy_model(schemas=None, dtype=torch.float64, seed=0, **overrides):
    schemas = schemas or SchemaSet((two_point_schema(),))
    return MdmdModel(ModelConfig(**{**TOY, **overrides}), schemas, seed=seed, dtype=dtype)


@pytest.fixture
def toy():
    return toy_model()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
