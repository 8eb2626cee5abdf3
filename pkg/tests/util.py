"""Shared test helpers: finite-difference oracles and dataset builders."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from convprune.dataset import RetrievalDataset, save_tensor


def fd_gradient(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar function f() w.r.t. x.

    f must read x by reference; x is perturbed in place and restored.
    """
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-relative disagreement of two gradient tensors."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 and nb == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / max(na, nb))


def nudge_from_zero(x: np.ndarray, margin: float = 1e-3) -> np.ndarray:
    """Push entries out of the [-margin, margin] band around ReLU's kink."""
    sign = np.where(x >= 0.0, 1.0, -1.0)
    return np.where(np.abs(x) < margin, x + sign * margin, x)


def pool_safe(rng: np.random.Generator, shape: tuple, gap: float = 1e-3) -> np.ndarray:
    """Random positive maps whose 2x2 windows have no near-ties."""
    c, h, w = shape
    for _ in range(100):
        x = rng.uniform(0.1, 2.0, size=shape)
        win = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(-1, 4)
        top2 = np.sort(win, axis=1)[:, -2:]
        if np.all(top2[:, 1] - top2[:, 0] > gap):
            return x
    raise RuntimeError("could not draw a tie-free pooling input")


def build_dataset(root: Path, images_by_instance: list[list[np.ndarray]]) -> RetrievalDataset:
    """Write a handcrafted dataset: per instance, image 0 is the query, the
    next up-to-4 are index items, the rest training images."""
    root = Path(root)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    shape = images_by_instance[0][0].shape
    items = []
    relevant = {}
    for label, images in enumerate(images_by_instance):
        ids = []
        for j, img in enumerate(images):
            item_id = f"i{label:03d}_v{j}"
            split = "query" if j == 0 else ("index" if j <= 4 else "train")
            rel_path = f"tensors/{item_id}.cptn"
            save_tensor(img, root / rel_path)
            items.append({"item_id": item_id, "label": label, "split": split, "path": rel_path})
            ids.append((item_id, split))
        relevant[ids[0][0]] = [iid for iid, split in ids if split == "index"]
    manifest = {
        "format_version": 1,
        "image_shape": list(shape),
        "seed": -1,
        "instances": len(images_by_instance),
        "images_per_instance": len(images_by_instance[0]),
        "items": items,
        "relevant": relevant,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return RetrievalDataset(root, manifest)


class ArrayDataset:
    """Duck-typed stand-in for RetrievalDataset when only load_image and a
    fingerprint are needed (micro-pipeline salience tests)."""

    def __init__(self, images: dict[str, np.ndarray]):
        self._images = images
        self.fingerprint = "arraydataset"

    def load_image(self, item_id: str) -> np.ndarray:
        return self._images[item_id]
