"""NMSE evaluation, parameter/flop accounting and latency benchmarks."""

from __future__ import annotations

import contextlib
import csv
import gc
import hashlib
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import neural
from .errors import UsageError
from .models import AeBundle, LambdaSet, build, compression_ratio, reconstruct
from .neural import activate
from .pipeline import DelaySet, InputCategory, category, delay_to_slices, partition_along
from .training import History, autoencoder_reconstruct, fit_autoencoder

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None


def nmse(h, h_hat) -> float:
    """``||h - h_hat||^2 / ||h||^2``."""
    h = np.asarray(h, dtype=float).ravel()
    h_hat = np.asarray(h_hat, dtype=float).ravel()
    if h.shape != h_hat.shape:
        raise ValueError(f"length mismatch {h.shape} vs {h_hat.shape}")
    ref = float(np.dot(h, h))
    if ref == 0.0:
        raise ValueError("NMSE undefined for a zero reference")
    d = h - h_hat
    return float(np.dot(d, d)) / ref


def to_db(x: float) -> float:
    return 10.0 * math.log10(x) if x > 0 else -math.inf


def row_nmse(h: np.ndarray, h_hat: np.ndarray) -> np.ndarray:
    ref = np.sum(h * h, axis=1)
    if np.any(ref == 0):
        raise ValueError("NMSE undefined for a zero reference sample")
    d = h - h_hat
    return np.sum(d * d, axis=1) / ref


@dataclass
class NmseResult:
    approach: str
    lam: int
    nmse_linear: float
    nmse_db: float
    sample_count: int
    stderr_linear: float = 0.0
    tensor_nmse_linear: float | None = None
    cr: Fraction | None = None


def tensor_nmse(origin: np.ndarray, raw: np.ndarray, raw_hat: np.ndarray,
                cat: InputCategory) -> np.ndarray:
    """Per-tensor NMSE after mapping slices back to frequency and cropping to K."""
    out = []
    tids = origin[:, 0]
    for tid in np.unique(tids):
        rows = np.flatnonzero(tids == tid)
        K = int(origin[rows[0], 3])
        h = delay_to_slices(raw[rows], cat, K)
        hh = delay_to_slices(raw_hat[rows], cat, K)
        out.append(nmse(h, hh))
    return np.asarray(out)


def evaluate(bundle: AeBundle, dataset: DelaySet, ls: LambdaSet | None = None,
             keep_reconstructions: bool = False):
    """Per-latent-size NMSE on denormalized delay-domain samples.

    Returns a list of :class:`NmseResult`; with ``keep_reconstructions`` also a
    dict ``lam -> raw reconstruction array``.
    """
    if dataset.category != bundle.category:
        raise UsageError(
            f"bundle category {bundle.category.index} does not match data category "
            f"{dataset.category.index}"
        )
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset (is the held-out split empty?)")
    ls = ls or bundle.lambda_set
    raw = dataset.raw()
    K = int(dataset.origin[0, 3])
    results, recons = [], {}
    for lam in ls:
        raw_hat = reconstruct(bundle, dataset.data, lam) * dataset.scale[:, None]
        per = row_nmse(raw, raw_hat)
        mean = float(np.mean(per))
        se = float(np.std(per, ddof=1) / math.sqrt(len(per))) if len(per) > 1 else 0.0
        t = tensor_nmse(dataset.origin, raw, raw_hat, dataset.category)
        results.append(NmseResult(bundle.approach, lam, mean, to_db(mean), len(per), se,
                                  float(np.mean(t)), compression_ratio(lam, K)))
        if keep_reconstructions:
            recons[lam] = raw_hat
    return (results, recons) if keep_reconstructions else results


# --- latency -------------------------------------------------------------

def compile_encoder(bundle: AeBundle, lam: int):
    """Flatten the inference path for one latent size into a tight closure."""
    bundle._check(lam)
    layers = [(l.weights, l.biases, l.activation)
              for m in [bundle.encoder_for(lam), *bundle.fcb_chain(lam)] for l in m.layers]
    mask = None
    if bundle.approach == "masked":
        mask = neural.MaskVector(lam, bundle.lambda_max).vector(layers[0][0].dtype)

    def run(x):
        for w, b, act in layers:
            x = w @ x + b
            if act != "linear":
                x = activate(act, x)
        return x * mask if mask is not None else x

    return run


@contextlib.contextmanager
def single_thread():
    ctx = threadpool_limits(limits=1) if threadpool_limits else contextlib.nullcontext()
    gc_was = gc.isenabled()
    gc.disable()
    try:
        with ctx:
            yield
    finally:
        if gc_was:
            gc.enable()


@dataclass
class BenchResult:
    approach: str
    cardinality: int
    worst_cr_latency: float
    per_cr_latency: dict[int, float]
    repeats: int
    param_count: int
    per_cr_flops: dict[int, int] = field(default_factory=dict)
    per_cr_std: dict[int, float] = field(default_factory=dict)
    per_cr_median: dict[int, float] = field(default_factory=dict)

    @property
    def worst_cr_median(self) -> float:
        return max(self.per_cr_median.values())

    @property
    def worst_cr_flops(self) -> int:
        return max(self.per_cr_flops.values())


def tensor_flops(bundle: AeBundle, lam: int, parts: int = 128) -> int:
    return parts * bundle.encode_flops(lam)


def bench_latency_many(bundles: list[AeBundle], repeats: int = 10_000, parts: int = 128,
                       warmup: int = 3, seed: int = 0, dtype=np.float64) -> list[BenchResult]:
    """Time several bundles with their CRs interleaved repeat by repeat.

    One timed unit compresses a full tensor as ``parts`` sequential
    single-slice encodes. Interleaving means slow drift of the host affects
    every (bundle, CR) pair alike, so ratios between them stay meaningful.
    """
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    rng = np.random.default_rng(seed)
    jobs = []
    for bi, b in enumerate(bundles):
        x = rng.standard_normal((parts, b.category.input_size)).astype(dtype)
        for lam in b.lambda_set:
            jobs.append((bi, lam, compile_encoder(b, lam), x))
    times = np.empty((len(jobs), repeats))
    with single_thread():
        for _, _, run, x in jobs:
            for _ in range(warmup):
                for p in range(parts):
                    run(x[p])
        for r in range(repeats):
            # a fresh job order each round keeps position effects from favouring any CR
            for j in rng.permutation(len(jobs)):
                run, x = jobs[j][2], jobs[j][3]
                t0 = time.perf_counter()
                for p in range(parts):
                    run(x[p])
                times[j, r] = time.perf_counter() - t0
    results = []
    for bi, b in enumerate(bundles):
        per, std, med, flops = {}, {}, {}, {}
        for j, (bj, lam, _, _) in enumerate(jobs):
            if bj == bi:
                per[lam] = float(times[j].mean())
                std[lam] = float(times[j].std())
                med[lam] = float(np.median(times[j]))
                flops[lam] = tensor_flops(b, lam, parts)
        results.append(BenchResult(b.approach, len(b.lambda_set), max(per.values()), per,
                                   repeats, b.encoder_params(), flops, std, med))
    return results


def bench_latency(bundle: AeBundle, ls: LambdaSet | None = None, repeats: int = 10_000,
                  parts: int = 128, warmup: int = 3, seed: int = 0,
                  dtype=np.float64) -> BenchResult:
    """Latency of compressing one tensor (``parts`` encoder calls) for every CR.

    The per-CR figure is the mean over ``repeats``; ``worst_cr_latency`` is
    the largest of them.
    """
    if ls is not None and tuple(ls.lambdas) != bundle.lambda_set.lambdas:
        raise UsageError("lambda set does not match the bundle")
    return bench_latency_many([bundle], repeats, parts, warmup, seed, dtype)[0]


@dataclass
class ScalingRow:
    approach: str
    cardinality: int
    params: int
    latency_s: float | None
    flops: int


def scaling_experiment(approaches, lambda_sets: list[LambdaSet], cat: InputCategory | None = None,
                       repeats: int = 0, parts: int = 128, seed: int = 0) -> list[ScalingRow]:
    """Encoder parameters, worst-CR flops and (optionally) latency versus |Lambda|.

    ``repeats=0`` skips wall-clock timing; counts need no training.
    """
    cat = cat or category(4)
    bundles = [build(a, cat, ls, seed) for ls in lambda_sets for a in approaches]
    lats = [None] * len(bundles)
    if repeats:
        lats = [r.worst_cr_latency for r in bench_latency_many(bundles, repeats, parts, seed=seed)]
    rows = []
    for b, lat in zip(bundles, lats):
        worst = max(tensor_flops(b, lam, parts) for lam in b.lambda_set)
        rows.append(ScalingRow(b.approach, len(b.lambda_set), b.encoder_params(), lat, worst))
    return rows


# --- partition-dimension experiment ---------------------------------------

def hash_split(ids, seed: int = 0, test_fraction: float = 0.1) -> np.ndarray:
    """Boolean test mask from a seed-stable hash of each id."""
    out = []
    for i in ids:
        h = hashlib.blake2b(f"{seed}:{int(i)}".encode(), digest_size=8).digest()
        out.append(int.from_bytes(h, "little") / 2**64 < test_fraction)
    return np.asarray(out, dtype=bool)


def split_delay_set(ds: DelaySet, seed: int = 0, test_fraction: float = 0.1):
    """Train/test split at tensor granularity (all slices of a tensor stay together)."""
    tids = np.unique(ds.origin[:, 0])
    test_ids = tids[hash_split(tids, seed, test_fraction)]
    is_test = np.isin(ds.origin[:, 0], test_ids)
    return ds.subset(~is_test), ds.subset(is_test)


def part_size(shape, dim: str, parts: int) -> int:
    """Element count of one part when ``shape`` is split ``parts`` ways along ``dim``."""
    axis = {"frequency": 1, "bs_antenna": 2, "ue_antenna": 3}[dim]
    if shape[axis] % parts:
        raise ValueError(f"size {shape[axis]} not divisible by {parts}")
    return math.prod(shape) // parts


@dataclass
class PartitionResult:
    dim: str
    input_size: int
    nmse_linear: float
    nmse_db: float
    train_curve: list[float]


def partition_dim_experiment(tensors, dims=("frequency", "bs_antenna", "ue_antenna"),
                             parts: int = 4, latent: int | None = None, epochs: int = 30,
                             batch_size: int = 32, learning_rate: float = 1e-3, seed: int = 0,
                             test_fraction: float = 0.2) -> dict[str, PartitionResult]:
    """Train one shared linear autoencoder per partition setting and compare NMSE.

    Every part of every tensor goes through the same encoder/decoder. NMSE is
    measured per held-out tensor after reassembling its parts.
    """
    arrays = [t.data if hasattr(t, "data") else np.asarray(t) for t in tensors]
    shape = arrays[0].shape
    is_test = hash_split(range(len(arrays)), seed, test_fraction)
    if is_test.all() or not is_test.any():
        is_test = np.zeros(len(arrays), dtype=bool)
        is_test[-max(1, len(arrays) // 5):] = True
    out = {}
    for dim in dims:
        d = part_size(shape, dim, parts)
        z = latent or max(1, d // 64)
        x = np.stack([p.ravel() for a in arrays for p in partition_along(a, dim, parts)])
        rms = np.sqrt(np.mean(x * x, axis=1, keepdims=True))
        rms[rms == 0] = 1.0
        xn = x / rms
        owner = np.repeat(np.arange(len(arrays)), parts)
        train_rows = ~is_test[owner]
        rng = np.random.default_rng(seed)
        enc = neural.init_dense([d, z], rng, output="linear")
        dec = neural.init_dense([z, d], rng, output="linear")
        curve = fit_autoencoder(enc, dec, xn[train_rows], epochs, batch_size, learning_rate, seed)
        test_rows = ~train_rows
        x_hat = autoencoder_reconstruct(enc, dec, xn[test_rows]) * rms[test_rows]
        per_tensor = []
        for tid in np.flatnonzero(is_test):
            sel = owner[test_rows] == tid
            per_tensor.append(nmse(x[test_rows][sel], x_hat[sel]))
        val = float(np.mean(per_tensor))
        out[dim] = PartitionResult(dim, d, val, to_db(val), curve)
    return out


# --- reports -----------------------------------------------------------------

NMSE_COLUMNS = ["approach", "lambda", "cr", "nmse_linear", "nmse_db", "n"]
SCALING_COLUMNS = ["approach", "cardinality", "params", "latency_s", "flops"]


def write_nmse_csv(path, results: list[NmseResult]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(NMSE_COLUMNS)
        for r in results:
            w.writerow([r.approach, r.lam, str(r.cr) if r.cr is not None else "",
                        repr(r.nmse_linear), repr(r.nmse_db), r.sample_count])


def write_scaling_csv(path, rows: list[ScalingRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SCALING_COLUMNS)
        for r in rows:
            w.writerow([r.approach, r.cardinality, r.params,
                        "" if r.latency_s is None else repr(r.latency_s), r.flops])


def write_plot_data(outdir, nmse_results: list[NmseResult] | None = None,
                    scaling_rows: list[ScalingRow] | None = None,
                    finetune_history: History | None = None) -> list[Path]:
    """Per-figure CSVs: fig7 (NMSE vs CR), fig8 (latency), fig9 (params), fig10 (learning curve)."""
    outdir = Path(outdir)
    written = []
    if nmse_results is not None:
        p = outdir / "fig7.csv"
        write_nmse_csv(p, nmse_results)
        written.append(p)
    if scaling_rows is not None:
        p8, p9 = outdir / "fig8.csv", outdir / "fig9.csv"
        with open(p8, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["approach", "cardinality", "latency_s", "flops"])
            for r in scaling_rows:
                w.writerow([r.approach, r.cardinality,
                            "" if r.latency_s is None else repr(r.latency_s), r.flops])
        with open(p9, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["approach", "cardinality", "params"])
            for r in scaling_rows:
                w.writerow([r.approach, r.cardinality, r.params])
        written += [p8, p9]
    if finetune_history is not None:
        p = outdir / "fig10.csv"
        finetune_history.write_csv(p)
        written.append(p)
    return written
