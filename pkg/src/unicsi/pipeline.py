"""Input-space generalization: antenna partitioning, RB categories and delay transform.

A CSI tensor ``[2, K, N_BS, N_UE]`` is cut into ``N_BS * N_UE`` antenna slices
of shape ``[2, K]``. Each slice is zero-padded to the IFFT size of its RB
category and moved to the delay domain with a unitary inverse DFT, giving a
real vector of length ``2 * ifft_size`` (real plane, then imaginary plane).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .channelgen import CsiTensor
from .errors import RangeError

MAX_RB = 256

_DIM_AXES = {"frequency": 1, "bs_antenna": 2, "ue_antenna": 3}


@dataclass(frozen=True)
class InputCategory:
    index: int
    ifft_size: int
    rb_min: int
    rb_max: int

    @property
    def input_size(self) -> int:
        return 2 * self.ifft_size


@lru_cache(maxsize=None)
def categories() -> tuple[InputCategory, ...]:
    cats = []
    lo = 1
    for index in range(1, 6):
        n = 2 ** (index + 3)
        cats.append(InputCategory(index, n, lo, n))
        lo = n + 1
    return tuple(cats)


def category(index: int) -> InputCategory:
    if not 1 <= index <= 5:
        raise RangeError(f"category index {index} not in 1..5")
    return categories()[index - 1]


def categorize(K: int) -> InputCategory:
    """Smallest category whose IFFT size holds ``K`` bins."""
    if not 1 <= K <= MAX_RB:
        raise RangeError(f"K out of supported range: {K} (supported 1..{MAX_RB})")
    for cat in categories():
        if cat.rb_min <= K <= cat.rb_max:
            return cat
    raise AssertionError("categories do not cover 1..MAX_RB")


@dataclass
class DelaySample:
    """One antenna slice in the delay domain.

    ``origin`` is ``(tensor_id, bs_index, ue_index, K)``. ``scale`` is the
    RMS that was divided out before encoding (1.0 when not normalized).
    """

    data: np.ndarray
    category: InputCategory
    origin: tuple[int, int, int, int] = (0, 0, 0, 0)
    scale: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.shape != (self.category.input_size,):
            raise ValueError(
                f"delay sample length {self.data.shape} does not match category "
                f"{self.category.index} (expected {self.category.input_size})"
            )
        if not np.all(np.isfinite(self.data)):
            raise ValueError("delay sample contains non-finite entries")


def _as_array(h) -> np.ndarray:
    return h.data if isinstance(h, CsiTensor) else np.asarray(h)


def partition(h) -> list[np.ndarray]:
    """Split into ``N_BS * N_UE`` slices of shape ``[2, K]``, BS-major order."""
    a = _as_array(h)
    return [a[:, :, b, u] for b in range(a.shape[2]) for u in range(a.shape[3])]


def partition_along(h, dim: str, parts: int) -> list[np.ndarray]:
    """Contiguous equal blocks along ``frequency``, ``bs_antenna`` or ``ue_antenna``."""
    a = _as_array(h)
    if dim not in _DIM_AXES:
        raise ValueError(f"unknown partition dimension {dim!r}")
    axis = _DIM_AXES[dim]
    if parts < 1 or a.shape[axis] % parts:
        raise ValueError(f"cannot split size {a.shape[axis]} along {dim} into {parts} parts")
    return np.split(a, parts, axis=axis)


def concat_along(parts: list[np.ndarray], dim: str) -> np.ndarray:
    return np.concatenate(parts, axis=_DIM_AXES[dim])


def reconstruct_concat(parts: list[np.ndarray], n_bs: int, n_ue: int,
                       subcarrier_spacing_hz: float | None = None) -> CsiTensor:
    """Inverse of :func:`partition`."""
    if len(parts) != n_bs * n_ue:
        raise ValueError(f"expected {n_bs * n_ue} slices, got {len(parts)}")
    shapes = {np.shape(p) for p in parts}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent slice shapes {sorted(shapes)}")
    stacked = np.stack(parts, axis=-1)  # [2, K, n_bs*n_ue]
    data = stacked.reshape(stacked.shape[0], stacked.shape[1], n_bs, n_ue)
    if subcarrier_spacing_hz is None:
        return CsiTensor(data)
    return CsiTensor(data, subcarrier_spacing_hz)


def _freq_to_delay(x: np.ndarray, n: int) -> np.ndarray:
    """``x``: real ``[..., 2, K]``; returns real ``[..., 2n]``."""
    z = x[..., 0, :] + 1j * x[..., 1, :]
    pad = np.zeros(z.shape[:-1] + (n,), dtype=complex)
    pad[..., : z.shape[-1]] = z
    d = np.fft.ifft(pad, norm="ortho")
    return np.concatenate([d.real, d.imag], axis=-1)


def _delay_to_freq(d: np.ndarray, n: int, K: int) -> np.ndarray:
    """``d``: real ``[..., 2n]``; returns real ``[..., 2, K]``."""
    z = d[..., :n] + 1j * d[..., n:]
    f = np.fft.fft(z, norm="ortho")[..., :K]
    return np.stack([f.real, f.imag], axis=-2)


def to_delay(slice_: np.ndarray, cat: InputCategory,
             origin: tuple[int, int, int, int] | None = None) -> DelaySample:
    slice_ = np.asarray(slice_, dtype=float)
    K = slice_.shape[-1]
    if K > cat.ifft_size:
        raise RangeError(f"K={K} exceeds the IFFT size {cat.ifft_size} of category {cat.index}")
    data = _freq_to_delay(slice_, cat.ifft_size)
    return DelaySample(data, cat, origin if origin is not None else (0, 0, 0, K))


def from_delay(sample: DelaySample, K: int) -> np.ndarray:
    """Forward unitary DFT then keep the first ``K`` bins; returns ``[2, K]``."""
    n = sample.category.ifft_size
    if K > n:
        raise RangeError(f"K={K} exceeds the IFFT size {n}")
    return _delay_to_freq(sample.data * sample.scale, n, K)


@dataclass
class DelaySet:
    """A batch of delay-domain samples sharing one category.

    Attributes:
        data: ``(n, 2 * ifft_size)`` array, RMS-normalized when ``scale`` != 1.
        scale: ``(n,)`` per-sample factors; ``data * scale`` restores raw values.
        origin: ``(n, 4)`` integer array of ``(tensor_id, bs, ue, K)``.
    """

    data: np.ndarray
    scale: np.ndarray
    origin: np.ndarray
    category: InputCategory

    def __len__(self):
        return self.data.shape[0]

    def raw(self) -> np.ndarray:
        return self.data * self.scale[:, None]

    def subset(self, idx) -> "DelaySet":
        return DelaySet(self.data[idx], self.scale[idx], self.origin[idx], self.category)

    def sample(self, i: int) -> DelaySample:
        return DelaySample(self.data[i], self.category, tuple(int(v) for v in self.origin[i]),
                           float(self.scale[i]))

    @classmethod
    def concat(cls, sets: list["DelaySet"]) -> "DelaySet":
        cats = {s.category for s in sets}
        if len(cats) != 1:
            raise ValueError("cannot concatenate delay sets of different categories")
        return cls(np.concatenate([s.data for s in sets]),
                   np.concatenate([s.scale for s in sets]),
                   np.concatenate([s.origin for s in sets]), cats.pop())


def rms_normalize(data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scale each row to unit RMS; all-zero rows keep scale 1."""
    rms = np.sqrt(np.mean(data**2, axis=-1))
    scale = np.where(rms > 0, rms, 1.0)
    return data / scale[..., None], scale


def tensors_to_delay(tensors: list, cat: InputCategory | None = None,
                     normalize: bool = True, ids=None) -> DelaySet:
    """Partition every tensor and move all slices to the delay domain."""
    if not tensors:
        raise ValueError("no tensors given")
    K = _as_array(tensors[0]).shape[1]
    cat = cat or categorize(K)
    if K > cat.ifft_size:
        raise RangeError(f"K={K} exceeds the IFFT size {cat.ifft_size}")
    ids = range(len(tensors)) if ids is None else ids
    rows, origins = [], []
    for tid, t in zip(ids, tensors):
        a = _as_array(t)
        if a.shape[1] != K:
            raise ValueError("all tensors must share K")
        n_bs, n_ue = a.shape[2], a.shape[3]
        # [2, K, n_bs, n_ue] -> [n_bs*n_ue, 2, K], BS-major like partition()
        rows.append(np.moveaxis(a.reshape(2, K, n_bs * n_ue), -1, 0))
        b, u = np.divmod(np.arange(n_bs * n_ue), n_ue)
        origins.append(np.stack([np.full(n_bs * n_ue, tid), b, u, np.full(n_bs * n_ue, K)], 1))
    data = _freq_to_delay(np.concatenate(rows), cat.ifft_size)
    if normalize:
        data, scale = rms_normalize(data)
    else:
        scale = np.ones(data.shape[0])
    return DelaySet(data, scale, np.concatenate(origins).astype(np.int64), cat)


def delay_to_slices(data: np.ndarray, cat: InputCategory, K: int) -> np.ndarray:
    """Batched inverse of the delay transform: ``(n, 2N)`` -> ``(n, 2, K)``."""
    return _delay_to_freq(np.asarray(data), cat.ifft_size, K)
