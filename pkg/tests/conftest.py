import numpy as np
import pytest
import torch

from latentmim.config import DecoderConfig, TeacherConfig, ViTConfig

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_vit():
    # 8px images, 4px patches -> N = 4
    return ViTConfig(image_size=8, patch_size=4, depth=2, embed_dim=8, num_heads=2, ffn_ratio=2.0)


@pytest.fixture
def tiny_teacher_cfg():
    return TeacherConfig(image_size=8, patch_size=4, depth=1, embed_dim=8, num_heads=2, ffn_ratio=2.0)


def tiny_decoder(variant="prompting", depth=1, d_target=6):
    return DecoderConfig(depth=depth, dec_dim=8, num_heads=2, ffn_ratio=2.0, d_target=d_target, variant=variant)


TINY_TRAIN = {
    "epochs": 4, "warmup_epochs": 1, "batch_size": 8, "base_lr": 0.01, "synthetic_images": 32,
    "vit.image_size": 16, "vit.patch_size": 4, "vit.depth": 1, "vit.embed_dim": 16, "vit.num_heads": 2,
    "dec.depth": 1, "dec.dec_dim": 16, "dec.num_heads": 2,
    "teacher.image_size": 16, "teacher.patch_size": 4, "teacher.depth": 1, "teacher.embed_dim": 16,
    "teacher.num_heads": 2, "teacher.saliency": 2.0,
}


def tiny_train_cfg(**overrides):
    from latentmim.config import build_config

    return build_config({**TINY_TRAIN, **{k.replace("__", "."): v for k, v in overrides.items()}})


# criterion lines recorded by test_acceptance.py, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
