"""Dataset loading for the exporter.

Every dataset is normalized to 3x224x224 ImageNet-statistics tensors so a
ResNet34 produces the canonical block shapes (28x28x128, 14x14x256,
7x7x512).  Each loader returns (train_dataset, test_dataset) of
(tensor, label) pairs; the underlying PIL image is re-derivable for the
image dump via ``unnormalize``.
"""

from __future__ import annotations

from pathlib import Path

import torch
from torchvision import datasets, transforms

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def _base_transform(grayscale: bool) -> transforms.Compose:
    steps = []
    if grayscale:
        steps.append(transforms.Grayscale(num_output_channels=3))
    steps += [
        transforms.Resize((224, 224)),
        transforms.ToTensor(),
        transforms.Normalize(IMAGENET_MEAN, IMAGENET_STD),
    ]
    return transforms.Compose(steps)


def unnormalize(tensor: torch.Tensor) -> torch.Tensor:
    """Invert the ImageNet normalization back to [0, 1] RGB."""
    mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
    return (tensor * std + mean).clamp(0.0, 1.0)


def load_pair(name: str, data_root: str | Path, download: bool = False,
              fake_size: int = 32, fake_classes: int = 5):
    """(train, test) datasets for a dataset id.

    ``mnist`` and ``stl10`` use the torchvision downloads; ``image-folder``
    expects ``<root>/train/<class>/*`` and ``<root>/test/<class>/*``;
    ``fake`` generates random images locally (smoke tests, no network).
    """
    root = str(data_root)
    if name == "mnist":
        tf = _base_transform(grayscale=True)
        return (
            datasets.MNIST(root, train=True, transform=tf, download=download),
            datasets.MNIST(root, train=False, transform=tf, download=download),
        )
    if name == "stl10":
        tf = _base_transform(grayscale=False)
        return (
            datasets.STL10(root, split="train", transform=tf, download=download),
            datasets.STL10(root, split="test", transform=tf, download=download),
        )
    if name == "image-folder":
        tf = _base_transform(grayscale=False)
        return (
            datasets.ImageFolder(Path(root) / "train", transform=tf),
            datasets.ImageFolder(Path(root) / "test", transform=tf),
        )
    if name == "fake":
        tf = _base_transform(grayscale=False)
        train = datasets.FakeData(size=fake_size, image_size=(3, 224, 224),
                                  num_classes=fake_classes, transform=tf,
                                  random_offset=0)
        test = datasets.FakeData(size=max(fake_size // 2, fake_classes),
                                 image_size=(3, 224, 224),
                                 num_classes=fake_classes, transform=tf,
                                 random_offset=fake_size)
        return train, test
    raise ValueError(f"unknown dataset {name!r}; use mnist, stl10, image-folder, or fake")


def num_classes_of(name: str, train_dataset) -> int:
    if name == "mnist":
        return 10
    if name == "stl10":
        return 10
    if name == "image-folder":
        return len(train_dataset.classes)
    if name == "fake":
        return train_dataset.num_classes
    raise ValueError(name)
