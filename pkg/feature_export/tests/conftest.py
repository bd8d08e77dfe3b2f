import numpy as np
import pytest

from feature_export.encoder import load_encoder


@pytest.fixture(scope="session")
def small_encoder():
    # untrained resnet18 keeps the suite fast; frozen, so shareable
    return load_encoder("resnet18", weights="none", seed=0)


@pytest.fixture()
def frame_dir(tmp_path):
    """12 numbered frames of slowly drifting color; returns (dir, n)."""
    import cv2
    root = tmp_path / "frames"
    root.mkdir()
    rng = np.random.default_rng(3)
    for i in range(12):
        img = np.full((48, 64, 3), 40 + 14 * i, np.uint8)
        img += rng.integers(0, 4, img.shape, dtype=np.uint8)
        cv2.imwrite(str(root / f"frame_{i:04d}.png"), img)
    return root, 12


def write_labels(path, pairs):
    lines = ["frame_index,phase_id"] + [f"{i},{p}" for i, p in pairs]
    path.write_text("\n".join(lines) + "\n")
    return path
