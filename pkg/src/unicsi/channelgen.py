"""Tapped-delay-line CSI synthesis and the ``CSIT`` dataset container.

Each (BS antenna, UE antenna) pair gets its own independent set of Rayleigh
tap gains. The frequency response on bin ``k`` is

    H_k = sum_l a_l * exp(-j 2 pi k df tau_l)

and white complex Gaussian noise is added at the requested SNR, which models
an imperfect channel estimate rather than a received data signal.

Typical usage::

    profile = get_profile("EPA")
    setting = GenSetting(profile, snr_db=20.0, K=128, n_bs=32, n_ue=4,
                         seed=7, samples=16)
    tensors = generate_csi(setting)
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

GENERATOR_VERSION = "1.0"
DEFAULT_SUBCARRIER_SPACING_HZ = 15e3

CSIT_MAGIC = b"CSIT"
CSIT_VERSION = 1


@dataclass(frozen=True)
class ChannelProfile:
    """Power-delay profile of a tapped delay line.

    Attributes:
        name: Identifier such as ``"EPA"``.
        tap_delays: Tap delays in nanoseconds, first one zero.
        tap_powers: Mean tap powers in dB.
        fading: Draw Rayleigh (complex Gaussian) gains per tap.
    """

    name: str
    tap_delays: tuple[float, ...]
    tap_powers: tuple[float, ...]
    fading: bool = True

    def __post_init__(self):
        object.__setattr__(self, "tap_delays", tuple(float(d) for d in self.tap_delays))
        object.__setattr__(self, "tap_powers", tuple(float(p) for p in self.tap_powers))
        if not self.tap_delays:
            raise ConfigurationError(f"profile {self.name!r} has no taps")
        if len(self.tap_delays) != len(self.tap_powers):
            raise ConfigurationError(
                f"profile {self.name!r}: {len(self.tap_delays)} delays but "
                f"{len(self.tap_powers)} powers"
            )
        if self.tap_delays[0] != 0.0:
            raise ConfigurationError(f"profile {self.name!r}: first tap delay must be 0")
        if any(b < a for a, b in zip(self.tap_delays, self.tap_delays[1:])):
            raise ConfigurationError(f"profile {self.name!r}: tap delays must be non-decreasing")
        if not all(math.isfinite(p) for p in self.tap_powers):
            raise ConfigurationError(f"profile {self.name!r}: tap powers must be finite")

    @property
    def n_taps(self) -> int:
        return len(self.tap_delays)

    def linear_powers(self) -> np.ndarray:
        """Tap powers on a linear scale, normalized to unit sum."""
        p = 10.0 ** (np.asarray(self.tap_powers) / 10.0)
        return p / p.sum()

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "tap_delays_ns": list(self.tap_delays),
            "tap_powers_db": list(self.tap_powers),
            "fading": self.fading,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelProfile":
        return cls(
            name=d["name"],
            tap_delays=d["tap_delays_ns"],
            tap_powers=d["tap_powers_db"],
            fading=d.get("fading", True),
        )


def tdl_exponential(name: str, delay_spread_ns: float, n_taps: int,
                    tap_spacing_ns: float) -> ChannelProfile:
    """Uniformly spaced taps with an exponentially decaying power profile."""
    if n_taps < 1 or delay_spread_ns <= 0 or tap_spacing_ns < 0:
        raise ConfigurationError(f"invalid TDL parameters for {name!r}")
    delays = np.arange(n_taps) * float(tap_spacing_ns)
    powers_db = -10.0 * np.log10(np.e) * delays / float(delay_spread_ns)
    return ChannelProfile(name, tuple(delays), tuple(powers_db))


def load_profiles(source: str | Path | None = None) -> list[ChannelProfile]:
    """Read profiles from a JSON file, or the bundled tables when ``source`` is None."""
    if source is None:
        text = resources.files("unicsi.data").joinpath("profiles.json").read_text()
    else:
        text = Path(source).read_text()
    raw = json.loads(text)
    profiles = [ChannelProfile.from_dict(d) for d in raw.get("profiles", [])]
    for d in raw.get("tdl_family", []):
        profiles.append(
            tdl_exponential(d["name"], d["delay_spread_ns"], d["n_taps"], d["tap_spacing_ns"])
        )
    if not profiles:
        raise ConfigurationError("profile file defines no profiles")
    return profiles


def builtin_profiles() -> list[ChannelProfile]:
    """EPA, EVA and the exponential TDL family shipped with the package."""
    return load_profiles(None)


def get_profile(name: str, profiles: list[ChannelProfile] | None = None) -> ChannelProfile:
    for p in profiles if profiles is not None else builtin_profiles():
        if p.name.lower() == name.lower():
            return p
    raise ConfigurationError(f"unknown channel profile {name!r}")


@dataclass
class CsiTensor:
    """Stacked real/imaginary channel responses, shape ``[2, K, N_BS, N_UE]``."""

    data: np.ndarray
    subcarrier_spacing_hz: float = DEFAULT_SUBCARRIER_SPACING_HZ

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4 or self.data.shape[0] != 2:
            raise ValueError(f"CSI tensor must have shape [2, K, N_BS, N_UE], got {self.data.shape}")
        if min(self.data.shape[1:]) < 1:
            raise ValueError("K, N_BS and N_UE must all be at least 1")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("CSI tensor contains non-finite entries")
        if not self.subcarrier_spacing_hz > 0:
            raise ValueError("subcarrier spacing must be positive")

    @property
    def K(self) -> int:
        return self.data.shape[1]

    @property
    def n_bs(self) -> int:
        return self.data.shape[2]

    @property
    def n_ue(self) -> int:
        return self.data.shape[3]

    def complex(self) -> np.ndarray:
        """Complex view, shape ``[K, N_BS, N_UE]``."""
        return self.data[0] + 1j * self.data[1]

    @classmethod
    def from_complex(cls, h: np.ndarray, subcarrier_spacing_hz=DEFAULT_SUBCARRIER_SPACING_HZ):
        return cls(np.stack([h.real, h.imag]), subcarrier_spacing_hz)


@dataclass
class GenSetting:
    profile: ChannelProfile
    snr_db: float
    K: int
    n_bs: int
    n_ue: int
    seed: int
    samples: int
    subcarrier_spacing_hz: float = DEFAULT_SUBCARRIER_SPACING_HZ

    def __post_init__(self):
        from .pipeline import categorize

        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ConfigurationError("snr_db must be finite (or +inf to disable noise)")
        if self.samples < 1:
            raise ConfigurationError("samples must be at least 1")
        if self.n_bs < 1 or self.n_ue < 1:
            raise ConfigurationError("antenna counts must be at least 1")
        categorize(self.K)
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["profile"] = self.profile.to_dict()
        d["snr_db"] = "inf" if math.isinf(self.snr_db) else self.snr_db
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenSetting":
        d = dict(d)
        d["profile"] = ChannelProfile.from_dict(d["profile"])
        d["snr_db"] = float(d["snr_db"])
        return cls(**d)


def frequency_response(gains: np.ndarray, delays_ns, K: int, spacing_hz: float) -> np.ndarray:
    """Evaluate the tap sum on bins ``0..K-1``.

    Args:
        gains: Complex tap gains with taps on axis 1, shape ``(n, L, ...)``.
        delays_ns: The ``L`` tap delays.

    Returns:
        Complex array of shape ``(n, K, ...)``.
    """
    tau = np.asarray(delays_ns, dtype=float) * 1e-9
    phase = np.exp(-2j * np.pi * np.outer(np.arange(K) * spacing_hz, tau))  # (K, L)
    return np.tensordot(phase, gains, axes=([1], [1])).swapaxes(0, 1)


def draw_tap_gains(profile: ChannelProfile, n: int, n_bs: int, n_ue: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Independent per-antenna-pair tap gains, shape ``(n, L, n_bs, n_ue)``.

    With fading each gain is ``CN(0, p_l)`` for the normalized tap powers
    ``p_l``; without fading it is the deterministic ``sqrt(p_l)``.
    """
    shape = (n, profile.n_taps, n_bs, n_ue)
    powers = profile.linear_powers()[None, :, None, None]
    if not profile.fading:
        return np.broadcast_to(np.sqrt(powers), shape).astype(complex)
    g = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    return g * np.sqrt(powers / 2.0)


def generate_csi(setting: GenSetting) -> list[CsiTensor]:
    """Draw ``setting.samples`` noisy CSI tensors; deterministic in ``setting.seed``.

    Gains are drawn before noise, so two settings differing only in SNR share
    the same clean channels.
    """
    rng = np.random.default_rng(setting.seed)
    gains = draw_tap_gains(setting.profile, setting.samples, setting.n_bs, setting.n_ue, rng)
    h = frequency_response(gains, setting.profile.tap_delays, setting.K,
                           setting.subcarrier_spacing_hz)
    if math.isfinite(setting.snr_db):
        # unit total tap power, so E|H_k|^2 = 1 per entry
        sigma2 = 10.0 ** (-setting.snr_db / 10.0)
        noise = rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape)
        h = h + noise * math.sqrt(sigma2 / 2.0)
    return [CsiTensor.from_complex(h[i], setting.subcarrier_spacing_hz)
            for i in range(setting.samples)]


def generate_grid(settings: list[GenSetting]) -> list[CsiTensor]:
    out = []
    for s in settings:
        out.extend(generate_csi(s))
    return out


# --- dataset container ---------------------------------------------------

def write_container(path: str | Path, array: np.ndarray) -> None:
    """Write ``array`` as ``CSIT``: magic, u16 version, u32 ndim, u32 dims, f32 data."""
    array = np.ascontiguousarray(array, dtype="<f4")
    header = CSIT_MAGIC + struct.pack("<HI", CSIT_VERSION, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(array.tobytes(order="C"))


def read_container(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != CSIT_MAGIC:
        raise ValueError(f"{path}: not a CSIT container")
    version, ndim = struct.unpack_from("<HI", raw, 4)
    if version != CSIT_VERSION:
        raise ValueError(f"{path}: unsupported CSIT version {version}")
    off = 4 + struct.calcsize("<HI")
    dims = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    data = np.frombuffer(raw, dtype="<f4", offset=off)
    if data.size != math.prod(dims):
        raise ValueError(f"{path}: payload size does not match header dims {dims}")
    return data.reshape(dims).astype(np.float64)


def manifest_path(path: str | Path) -> Path:
    return Path(str(path) + ".json")


def write_dataset(path: str | Path, tensors: list[CsiTensor],
                  settings: list[GenSetting], extra: dict | None = None) -> dict:
    """Write stacked tensors ``[n, 2, K, N_BS, N_UE]`` plus the JSON manifest."""
    shapes = {t.data.shape for t in tensors}
    if len(shapes) != 1:
        raise ValueError(f"all tensors in a container must share one shape, got {sorted(shapes)}")
    spacings = {t.subcarrier_spacing_hz for t in tensors}
    array = np.stack([t.data for t in tensors])
    write_container(path, array)
    manifest = {
        "format": "CSIT",
        "generator_version": GENERATOR_VERSION,
        "domain": "frequency",
        "shape": list(array.shape),
        "subcarrier_spacing_hz": spacings.pop(),
        "antenna_correlation": "independent",
        "settings": [s.to_dict() for s in settings],
    }
    if extra:
        manifest.update(extra)
    manifest_path(path).write_text(json.dumps(manifest, indent=2))
    return manifest


def read_dataset(path: str | Path) -> tuple[list[CsiTensor], dict]:
    manifest = json.loads(manifest_path(path).read_text())
    if manifest.get("domain", "frequency") != "frequency":
        raise ValueError(f"{path}: expected a frequency-domain dataset")
    array = read_container(path)
    spacing = manifest.get("subcarrier_spacing_hz", DEFAULT_SUBCARRIER_SPACING_HZ)
    return [CsiTensor(a, spacing) for a in array], manifest


@dataclass
class GridSpec:
    """Cartesian product of generation settings, one seed per cell."""

    profiles: list[ChannelProfile]
    snrs_db: list[float]
    K: int
    n_bs: int
    n_ue: int
    samples_per_setting: int
    seed: int = 0
    subcarrier_spacing_hz: float = DEFAULT_SUBCARRIER_SPACING_HZ
    settings: list[GenSetting] = field(init=False)

    def __post_init__(self):
        ss = np.random.SeedSequence(self.seed)
        cells = [(p, s) for p in self.profiles for s in self.snrs_db]
        children = ss.spawn(len(cells))
        self.settings = [
            GenSetting(p, float(s), self.K, self.n_bs, self.n_ue,
                       int(c.generate_state(1, np.uint64)[0]),
                       self.samples_per_setting, self.subcarrier_spacing_hz)
            for (p, s), c in zip(cells, children)
        ]
