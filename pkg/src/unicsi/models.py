"""Encoder/decoder families for multi-rate CSI compression.

Three ways to serve a set of latent sizes ``Lambda``:

* ``naive``  - one dedicated encoder ``2N -> 4*lam -> lam`` per latent size.
* ``saldr``  - a universal block ``2N -> N -> lam_max`` followed by a chain of
  single-layer fully connected blocks (FCBs) that shrink the latent one
  size at a time; the smallest size pays for the whole chain.
* ``masked`` - the same universal block followed by a parameter-free mask
  that keeps the first ``lam`` entries.

``N`` is the IFFT size of the input category. Every approach has one decoder
per latent size, ending in ``2N`` outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import neural
from .errors import ConfigurationError
from .neural import MaskVector, ModelParams, apply_mask, count_flops, count_params, predict
from .pipeline import InputCategory, category

APPROACHES = ("naive", "saldr", "masked")


@dataclass(frozen=True)
class LambdaSet:
    lambdas: tuple[int, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        lams = tuple(int(l) for l in self.lambdas)
        ws = tuple(float(w) for w in self.weights)
        object.__setattr__(self, "lambdas", lams)
        object.__setattr__(self, "weights", ws)
        if not lams:
            raise ConfigurationError("lambda set is empty")
        if any(l < 1 for l in lams) or any(b <= a for a, b in zip(lams, lams[1:])):
            raise ConfigurationError(f"latent sizes must be positive and strictly increasing: {lams}")
        if len(ws) != len(lams) or any(w < 0 or not math.isfinite(w) for w in ws):
            raise ConfigurationError("need one non-negative finite weight per latent size")
        if abs(math.fsum(ws) - 1.0) > 1e-12:
            raise ConfigurationError(f"weights must sum to 1, got {math.fsum(ws)!r}")

    @classmethod
    def uniform(cls, lambdas) -> "LambdaSet":
        lams = sorted(int(l) for l in lambdas)
        return cls(tuple(lams), tuple([1.0 / len(lams)] * len(lams)))

    @property
    def lambda_max(self) -> int:
        return self.lambdas[-1]

    def __len__(self):
        return len(self.lambdas)

    def __iter__(self):
        return iter(self.lambdas)

    def weight(self, lam: int) -> float:
        return self.weights[self.lambdas.index(lam)]

    def to_dict(self) -> dict:
        return {"lambdas": list(self.lambdas), "weights": list(self.weights)}


def lambda_set_for_cardinality(c: int, lambda_max: int = 32) -> LambdaSet:
    """Latent-size ladder used for the |Lambda| sweeps.

    Up to ``log2(lambda_max) + 1`` sizes the ladder halves from ``lambda_max``
    (so 4 gives {4, 8, 16, 32}); larger sets are the multiples of
    ``lambda_max / c`` (so 32 gives {1, ..., 32}).
    """
    if c < 1 or c > lambda_max:
        raise ConfigurationError(f"cardinality {c} not in 1..{lambda_max}")
    if 2 ** (c - 1) <= lambda_max:
        return LambdaSet.uniform([lambda_max >> i for i in range(c)])
    if lambda_max % c:
        raise ConfigurationError(f"cardinality {c} does not divide lambda_max {lambda_max}")
    step = lambda_max // c
    return LambdaSet.uniform(range(step, lambda_max + 1, step))


@dataclass
class AeBundle:
    """Encoder(s), optional FCB chain and per-size decoders for one category.

    ``fcbs[i]`` maps the i-th largest latent size to the next smaller one.
    """

    approach: str
    encoders: list[ModelParams]
    decoders: dict[int, ModelParams]
    category: InputCategory
    lambda_set: LambdaSet
    fcbs: list[ModelParams] = field(default_factory=list)

    def __post_init__(self):
        if self.approach not in APPROACHES:
            raise ConfigurationError(f"unknown approach {self.approach!r}")
        n_enc = len(self.lambda_set) if self.approach == "naive" else 1
        if len(self.encoders) != n_enc:
            raise ConfigurationError(f"{self.approach} bundle needs {n_enc} encoder(s)")
        if sorted(self.decoders) != list(self.lambda_set.lambdas):
            raise ConfigurationError("need exactly one decoder per latent size")

    @property
    def lambda_max(self) -> int:
        return self.lambda_set.lambda_max

    def encoder_for(self, lam: int) -> ModelParams:
        if self.approach == "naive":
            return self.encoders[self.lambda_set.lambdas.index(lam)]
        return self.encoders[0]

    def fcb_chain(self, lam: int) -> list[ModelParams]:
        """FCBs needed to go from ``lambda_max`` down to ``lam`` (saldr only)."""
        if self.approach != "saldr":
            return []
        steps = len(self.lambda_set) - 1 - self.lambda_set.lambdas.index(lam)
        return self.fcbs[:steps]

    def encoder_params(self) -> int:
        return sum(count_params(m) for m in self.encoders) + sum(count_params(m) for m in self.fcbs)

    def decoder_params(self) -> int:
        return sum(count_params(m) for m in self.decoders.values())

    def encode_flops(self, lam: int) -> int:
        self._check(lam)
        # the mask is a selection, not arithmetic
        return count_flops(self.encoder_for(lam)) + sum(count_flops(f) for f in self.fcb_chain(lam))

    def named_models(self) -> dict[str, ModelParams]:
        out = {}
        if self.approach == "naive":
            for lam, enc in zip(self.lambda_set, self.encoders):
                out[f"encoder_{lam}"] = enc
        else:
            out["encoder"] = self.encoders[0]
        for f in self.fcbs:
            out[f"fcb_{f.input_size}_{f.output_size}"] = f
        for lam in self.lambda_set:
            out[f"decoder_{lam}"] = self.decoders[lam]
        return out

    def _check(self, lam: int) -> None:
        if lam not in self.lambda_set.lambdas:
            raise ValueError(f"latent size {lam} not supported by this bundle {self.lambda_set.lambdas}")


def _check_config(cat: InputCategory, ls: LambdaSet) -> None:
    if ls.lambda_max > cat.input_size:
        raise ConfigurationError(
            f"lambda_max {ls.lambda_max} exceeds the encoder input size {cat.input_size}"
        )


def build_universal_block(cat: InputCategory, lambda_max: int, rng) -> ModelParams:
    n = cat.ifft_size
    return neural.init_dense([2 * n, n, lambda_max], rng)


def build_decoder(cat: InputCategory, latent_size: int, rng) -> ModelParams:
    """``latent_size -> N -> 2N``, leaky hidden layer, linear output."""
    if latent_size < 1:
        raise ConfigurationError("decoder latent size must be at least 1")
    n = cat.ifft_size
    return neural.init_dense([latent_size, n, 2 * n], rng)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def build_masked(cat: InputCategory, ls: LambdaSet, seed=0,
                 universal_block: ModelParams | None = None) -> AeBundle:
    """Universal block plus mask; ``universal_block`` may replace the default MLP."""
    _check_config(cat, ls)
    rng = _rng(seed)
    enc = universal_block or build_universal_block(cat, ls.lambda_max, rng)
    if enc.input_size != cat.input_size or enc.output_size != ls.lambda_max:
        raise ConfigurationError("universal block must map 2N inputs to lambda_max outputs")
    decs = {lam: build_decoder(cat, ls.lambda_max, rng) for lam in ls}
    return AeBundle("masked", [enc], decs, cat, ls)


def build_saldr(cat: InputCategory, ls: LambdaSet, seed=0) -> AeBundle:
    _check_config(cat, ls)
    rng = _rng(seed)
    enc = build_universal_block(cat, ls.lambda_max, rng)
    desc = ls.lambdas[::-1]
    fcbs = [neural.init_dense([a, b], rng, output="linear") for a, b in zip(desc, desc[1:])]
    decs = {lam: build_decoder(cat, ls.lambda_max, rng) for lam in ls}
    return AeBundle("saldr", [enc], decs, cat, ls, fcbs)


def build_naive(cat: InputCategory, ls: LambdaSet, seed=0) -> AeBundle:
    _check_config(cat, ls)
    rng = _rng(seed)
    n = cat.ifft_size
    encs = [neural.init_dense([2 * n, 4 * lam, lam], rng) for lam in ls]
    decs = {lam: build_decoder(cat, lam, rng) for lam in ls}
    return AeBundle("naive", encs, decs, cat, ls)


BUILDERS = {"naive": build_naive, "saldr": build_saldr, "masked": build_masked}


def build(approach: str, cat: InputCategory, ls: LambdaSet, seed=0) -> AeBundle:
    if approach not in BUILDERS:
        raise ConfigurationError(f"unknown approach {approach!r}")
    return BUILDERS[approach](cat, ls, seed)


def encode(bundle: AeBundle, x: np.ndarray, lam: int) -> np.ndarray:
    """Latent of length ``lambda_max`` (masked) or ``lam`` (naive, saldr)."""
    bundle._check(lam)
    z = predict(bundle.encoder_for(lam), x)
    if bundle.approach == "masked":
        return apply_mask(z, MaskVector(lam, bundle.lambda_max))
    for fcb in bundle.fcb_chain(lam):
        z = predict(fcb, z)
    return z


def pad_latent(z: np.ndarray, size: int) -> np.ndarray:
    z = np.asarray(z)
    if z.shape[-1] == size:
        return z
    out = np.zeros(z.shape[:-1] + (size,), dtype=z.dtype)
    out[..., : z.shape[-1]] = z
    return out


def decode(bundle: AeBundle, z: np.ndarray, lam: int) -> np.ndarray:
    bundle._check(lam)
    dec = bundle.decoders[lam]
    return predict(dec, pad_latent(z, dec.input_size))


def reconstruct(bundle: AeBundle, x: np.ndarray, lam: int) -> np.ndarray:
    return decode(bundle, encode(bundle, x, lam), lam)


def compression_ratio(lam: int, K: int, n_bs: int = 1, n_ue: int = 1) -> Fraction:
    if min(lam, K, n_bs, n_ue) < 1:
        raise ValueError("compression_ratio needs positive arguments")
    return Fraction(lam, 2 * K * n_bs * n_ue)


# --- persistence -------------------------------------------------------------

def save_bundle(path: str | Path, bundle: AeBundle, extra: dict | None = None) -> None:
    meta = {
        "approach": bundle.approach,
        "category": bundle.category.index,
        "lambda_set": bundle.lambda_set.to_dict(),
        "encoder_params": bundle.encoder_params(),
        "decoder_params": bundle.decoder_params(),
    }
    meta.update(extra or {})
    neural.write_checkpoint(path, bundle.named_models(), meta)


def load_bundle(path: str | Path) -> tuple[AeBundle, dict]:
    models, meta = neural.read_checkpoint(path)
    ls = LambdaSet(**meta["lambda_set"])
    cat = category(meta["category"])
    approach = meta["approach"]
    if approach == "naive":
        encs = [models[f"encoder_{lam}"] for lam in ls]
    else:
        encs = [models["encoder"]]
    fcbs = [m for name, m in models.items() if name.startswith("fcb_")]
    decs = {lam: models[f"decoder_{lam}"] for lam in ls}
    return AeBundle(approach, encs, decs, cat, ls, fcbs), meta
