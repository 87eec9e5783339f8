"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .data import Dataset, Frame, load_dnerf_dataset
from .errors import ContractError, DataError, RangeError
from .rasterizer import Camera


def check_time(t) -> float:
    try:
        value = float(t)
    except (TypeError, ValueError) as exc:
        raise RangeError(f"timestamp must be a number, got {t!r}") from exc
    if not (math.isfinite(value) and 0.0 <= value <= 1.0):
        raise RangeError(f"timestamp {value} outside [0, 1]")
    return value


def check_image(image, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Return ``image`` as a float64 ``(H, W, 3)`` array with values in [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ContractError(f"expected an H x W x 3 image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    arr = arr.astype(np.float64, copy=False)
    if not np.isfinite(arr).all():
        raise ContractError("image contains non-finite values")
    if shape is not None and arr.shape[:2] != tuple(shape):
        raise ContractError(f"image is {arr.shape[0]}x{arr.shape[1]}, expected {shape[0]}x{shape[1]}")
    return arr


def check_dataset(X) -> Dataset:
    """Accept a dataset, a directory in the D-NeRF layout or a list of frames."""
    if isinstance(X, Dataset):
        ds = X
    elif isinstance(X, (str, Path)):
        ds = load_dnerf_dataset(X)
    else:
        ds = Dataset(check_frames(X))
    if not ds.frames:
        raise DataError("dataset has no frames")
    return ds


def check_frames(X) -> list[Frame]:
    if isinstance(X, Dataset):
        return list(X.frames)
    if isinstance(X, Frame):
        return [X]
    frames = list(X)
    for i, f in enumerate(frames):
        if not isinstance(f, Frame):
            raise ContractError(f"item {i} is {type(f).__name__}, expected Frame")
        check_time(f.t)
        check_image(f.image, (f.camera.height, f.camera.width))
    return frames


def check_views(X) -> list[tuple[Camera, float]]:
    """Normalise render requests to ``(camera, t)`` pairs.

    Frames contribute their own camera and timestamp; bare pairs are checked.
    """
    if isinstance(X, (Dataset, Frame)):
        X = check_frames(X)
    views = []
    for i, item in enumerate(X):
        if isinstance(item, Frame):
            cam, t = item.camera, item.t
        else:
            try:
                cam, t = item
            except (TypeError, ValueError) as exc:
                raise ContractError(f"item {i}: expected a Frame or a (camera, t) pair") from exc
        if not isinstance(cam, Camera):
            raise ContractError(f"item {i}: expected a Camera, got {type(cam).__name__}")
        views.append((cam, check_time(t)))
    return views
