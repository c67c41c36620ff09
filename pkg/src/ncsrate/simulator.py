"""Closed-loop Monte Carlo simulation of a plant controlled through an
entropy-coded dithered quantizer, with rate/entropy measurement and the
statistical checks on the coding noise and stationarity.
"""

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numba
import numpy as np
from scipy import stats

from .ecdq import (BitReader, BitWriter, CodeBook, EcdqConfig, conditional_entropy_bits, dither_bin,
                   dither_block, ecdq_decode_step, ecdq_encode_step, train_codebooks)
from .lti import RationalTF

DIVERGENCE_LIMIT = 1e9
STAT_LAGS = 20
ESCAPE_TARGET = 0.01


class DivergenceError(RuntimeError):
    def __init__(self, message, seeds=()):
        super().__init__(message)
        self.seeds = list(seeds)


@dataclass(frozen=True)
class SimRun:
    plant: object
    design: object
    ecdq: EcdqConfig
    horizon: int = 10_000
    warmup: int = 1_000
    noise_seed: int = 0
    initial_state_std: float = 1.0

    def __post_init__(self):
        if not self.horizon > self.warmup >= 0:
            raise ValueError("need horizon > warmup >= 0 (got %d, %d)" % (self.horizon, self.warmup))
        if self.initial_state_std < 0:
            raise ValueError("initial_state_std must be nonnegative")
        expected = math.sqrt(12.0 * self.design.sigma_q_sq)
        if abs(self.ecdq.delta - expected) > 1e-9 * expected:
            raise ValueError("quantizer step %.12g does not match sqrt(12 sigma_q^2) = %.12g"
                             % (self.ecdq.delta, expected))

    @property
    def measured(self):
        return self.horizon - self.warmup


def make_run(plant, design, horizon=10_000, warmup=1_000, noise_seed=0, dither_seed=1,
             initial_state_std=1.0, **ecdq_options):
    """SimRun whose quantizer step is derived from the design's noise variance."""
    cfg = EcdqConfig(delta=design.delta, dither_seed=int(dither_seed), **ecdq_options)
    return SimRun(plant, design, cfg, int(horizon), int(warmup), int(noise_seed), float(initial_state_std))


# ------------------------------------------------------------------ kernel

@numba.njit(cache=True)
def _tdf2_out(b, state, x):
    return b[0] * x + (state[0] if state.size else 0.0)


@numba.njit(cache=True)
def _tdf2_update(b, a, state, x, y):
    n = state.size
    for i in range(n - 1):
        state[i] = b[i + 1] * x + state[i + 1] - a[i + 1] * y
    if n:
        state[n - 1] = b[n] * x - a[n] * y


@numba.njit(cache=True)
def _kernel(A, B1, B2, C1, C2, D11, D12, D21, x0, d, dither, delta,
            bw, aw, by, ay, bf, af, limit, y_out, v_out, w_out, u_out, e_out, idx_out):
    n = A.shape[0]
    n_e = C1.shape[0]
    n_d = B1.shape[1]
    x = x0.copy()
    xn = np.zeros(n)
    sw = np.zeros(aw.size - 1)
    sy = np.zeros(ay.size - 1)
    sf = np.zeros(af.size - 1)
    for k in range(d.shape[0]):
        y = 0.0
        for j in range(n):
            y += C2[0, j] * x[j]
        for j in range(n_d):
            y += D21[0, j] * d[k, j]
        ly = _tdf2_out(by, sy, y)
        lw = sw[0] if sw.size else 0.0
        v = ly + lw
        idx = np.rint((v + dither[k]) / delta)
        w = idx * delta - dither[k]
        _tdf2_update(by, ay, sy, y, ly)
        _tdf2_update(bw, aw, sw, w, lw)
        u = _tdf2_out(bf, sf, w)
        _tdf2_update(bf, af, sf, w, u)
        for i in range(n_e):
            s = D12[i, 0] * u
            for j in range(n):
                s += C1[i, j] * x[j]
            for j in range(n_d):
                s += D11[i, j] * d[k, j]
            e_out[k, i] = s
        norm = 0.0
        for i in range(n):
            s = B2[i, 0] * u
            for j in range(n):
                s += A[i, j] * x[j]
            for j in range(n_d):
                s += B1[i, j] * d[k, j]
            xn[i] = s
            norm += s * s
        for i in range(n):
            x[i] = xn[i]
        y_out[k] = y
        v_out[k] = v
        w_out[k] = w
        u_out[k] = u
        idx_out[k] = np.int64(idx)
        big = abs(v) + abs(u)
        for i in range(sw.size):
            big += abs(sw[i])
        for i in range(sy.size):
            big += abs(sy[i])
        for i in range(sf.size):
            big += abs(sf[i])
        if norm > limit * limit or big > limit or not np.isfinite(big):
            return k
    return -1


def _filter_coeffs(tf):
    b, a = tf.causal_coeffs()
    return np.ascontiguousarray(b), np.ascontiguousarray(a)


# ------------------------------------------------------------------ traces and reports

@dataclass
class Trace:
    y: np.ndarray
    v: np.ndarray
    w: np.ndarray
    u: np.ndarray
    e: np.ndarray
    d: np.ndarray
    dither: np.ndarray
    index: np.ndarray
    bin: np.ndarray
    bits: np.ndarray

    @property
    def q(self):
        """Coding noise w - v."""
        return self.w - self.v

    def symbol_log(self, start=0):
        return np.column_stack([self.index[start:], self.bin[start:]])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            ecols = ["e"] if self.e.shape[1] == 1 else ["e%d" % i for i in range(self.e.shape[1])]
            wr.writerow(["k", "y", "v", "w", "u"] + ecols + ["bits"])
            for k in range(len(self.y)):
                wr.writerow([k] + [repr(float(x)) for x in (self.y[k], self.v[k], self.w[k], self.u[k])]
                            + [repr(float(x)) for x in self.e[k]] + [int(self.bits[k])])


@dataclass
class Verdict:
    passed: bool
    statistic: float
    threshold: float
    detail: dict = field(default_factory=dict)

    def to_dict(self):
        return {"passed": bool(self.passed), "statistic": float(self.statistic),
                "threshold": float(self.threshold), **self.detail}


@dataclass
class RunReport:
    noise_seed: int
    dither_seed: int
    samples: int
    sigma_e_sq: float
    rate_bits: float
    rate_uncond_bits: float
    cond_entropy_bits: float
    escape_fraction: float
    verdicts: dict
    counts: dict = field(default_factory=dict, repr=False)   # (bin, index) -> occurrences

    def to_dict(self):
        out = {k: getattr(self, k) for k in ("noise_seed", "dither_seed", "samples", "sigma_e_sq", "rate_bits",
                                             "rate_uncond_bits", "cond_entropy_bits", "escape_fraction")}
        out["verdicts"] = {k: v.to_dict() for k, v in self.verdicts.items()}
        return out


def _mean_se(values):
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return float(values.mean()), float("nan")
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))


@dataclass
class SimulationReport:
    runs: list
    sigma_e_sq: float
    sigma_e_sq_se: float
    rate_bits: float
    rate_bits_se: float
    rate_uncond_bits: float
    rate_uncond_bits_se: float
    cond_entropy_bits: float
    cond_entropy_bits_se: float
    escape_fraction: float
    verdicts: dict

    @property
    def realizations(self):
        return len(self.runs)

    @classmethod
    def pool(cls, runs, pooled_entropy):
        se = {}
        for name in ("sigma_e_sq", "rate_bits", "rate_uncond_bits", "cond_entropy_bits"):
            se[name] = _mean_se([getattr(r, name) for r in runs])
        # rates and escapes pool by sufficient statistics (all runs share a length)
        verdicts = {}
        for key in runs[0].verdicts:
            n_pass = int(sum(bool(r.verdicts[key].passed) for r in runs))
            verdicts[key] = {"passed": n_pass == len(runs), "runs_passed": n_pass, "runs": len(runs)}
        return cls(runs=runs, sigma_e_sq=se["sigma_e_sq"][0], sigma_e_sq_se=se["sigma_e_sq"][1],
                   rate_bits=se["rate_bits"][0], rate_bits_se=se["rate_bits"][1],
                   rate_uncond_bits=se["rate_uncond_bits"][0], rate_uncond_bits_se=se["rate_uncond_bits"][1],
                   cond_entropy_bits=pooled_entropy, cond_entropy_bits_se=se["cond_entropy_bits"][1],
                   escape_fraction=float(np.mean([r.escape_fraction for r in runs])), verdicts=verdicts)

    def to_dict(self):
        out = {k: getattr(self, k) for k in ("sigma_e_sq", "sigma_e_sq_se", "rate_bits", "rate_bits_se",
                                             "rate_uncond_bits", "rate_uncond_bits_se", "cond_entropy_bits",
                                             "cond_entropy_bits_se", "escape_fraction")}
        out["realizations"] = self.realizations
        out["verdicts"] = self.verdicts
        out["runs"] = [r.to_dict() for r in self.runs]
        return out


# ------------------------------------------------------------------ simulation

def _streams(run, zero):
    plant = run.plant
    n = run.horizon
    if zero:
        return np.zeros(plant.n_states), np.zeros((n, plant.n_d)), np.zeros(n)
    noise_ss, x0_ss = np.random.SeedSequence(run.noise_seed).spawn(2)
    d = np.random.default_rng(noise_ss).standard_normal((n, plant.n_d))
    x0 = run.initial_state_std * np.random.default_rng(x0_ss).standard_normal(plant.n_states)
    dither = dither_block(run.ecdq.dither_seed, run.ecdq.delta, n)
    return x0, d, dither


def simulate(run, force_zero=False):
    """Raw closed-loop signals (no bit accounting). Raises DivergenceError."""
    p = run.plant
    x0, d, dither = _streams(run, force_zero)
    n = run.horizon
    bw, aw = _filter_coeffs(run.design.L_w * RationalTF.delay(1))
    by, ay = _filter_coeffs(run.design.L_y)
    bf, af = _filter_coeffs(run.design.F)
    if abs(bw[0]) > 0:
        raise ValueError("L_w z^-1 must be strictly proper for a causal loop")
    y, v, w, u = (np.zeros(n) for _ in range(4))
    e = np.zeros((n, p.n_e))
    idx = np.zeros(n, dtype=np.int64)
    mats = [np.ascontiguousarray(m, dtype=float) for m in (p.A, p.B1, p.B2, p.C1, p.C2, p.D11, p.D12, p.D21)]
    bad = _kernel(*mats, np.ascontiguousarray(x0), np.ascontiguousarray(d), dither, float(run.ecdq.delta),
                  bw, aw, by, ay, bf, af, DIVERGENCE_LIMIT, y, v, w, u, e, idx)
    if bad >= 0:
        raise DivergenceError("closed loop diverged at step %d (noise seed %d)" % (bad, run.noise_seed),
                              [run.noise_seed])
    bins = dither_bin(dither, run.ecdq.delta, run.ecdq.num_dither_bins)
    return Trace(y, v, w, u, e, d, dither, idx, np.atleast_1d(bins), np.zeros(n, dtype=np.int64))


def bit_lengths(codebook, index, bins):
    """Per-step codeword lengths, escape payload included."""
    index = np.asarray(index, dtype=np.int64)
    bins = np.asarray(bins, dtype=np.int64)
    if codebook.num_bins == 1:
        bins = np.zeros_like(bins)
    lo = int(min(index.min(), 0))
    hi = int(max(index.max(), 0))
    table = np.stack([codebook.length_table(b, lo, hi) for b in range(codebook.num_bins)])
    return table[bins, index - lo]


def _verify_bitstream(run, codebook, trace):
    """Encode and decode every step through real bitstreams; checks exactness."""
    writer = BitWriter()
    cfg = run.ecdq if codebook.num_bins == run.ecdq.num_dither_bins else replace(run.ecdq, num_dither_bins=1)
    for v, dh, w in zip(trace.v.tolist(), trace.dither.tolist(), trace.w.tolist()):
        _, w_enc = ecdq_encode_step(v, dh, codebook, cfg, writer)
        if w_enc != w:
            raise AssertionError("encoder reconstruction differs from the simulated loop")
    reader = BitReader(writer.getvalue(), writer.n_bits)
    for k, (dh, w) in enumerate(zip(trace.dither.tolist(), trace.w.tolist())):
        if ecdq_decode_step(reader, dh, codebook, cfg) != w:
            raise AssertionError("decoder mismatch at step %d" % k)
    if reader.remaining:
        raise AssertionError("decoder left %d unread bits" % reader.remaining)
    return writer.n_bits


def run_closed_loop(run, codebook, unconditioned=None, force_zero=False, verify_bitstream=False):
    """Simulate one realization and measure rate, entropy and distortion.

    Returns (trace, report). Statistics use post-warmup samples only.
    ``force_zero`` zeroes disturbance, initial state and dither.
    """
    trace = simulate(run, force_zero)
    trace.bits = bit_lengths(codebook, trace.index, trace.bin)
    if verify_bitstream:
        total = _verify_bitstream(run, codebook, trace)
        if total != int(trace.bits.sum()):
            raise AssertionError("bitstream length %d differs from the counted %d" % (total, trace.bits.sum()))
    s = run.warmup
    n = run.measured
    idx = trace.index[s:]
    bins = trace.bin[s:]
    e = trace.e[s:]
    rate = float(trace.bits[s:].sum()) / n
    rate_u = float("nan")
    if unconditioned is not None:
        rate_u = float(bit_lengths(unconditioned, idx, np.zeros_like(bins)).sum()) / n
    esc = float(np.mean([i not in codebook.tables[b if codebook.num_bins > 1 else 0]
                         for i, b in zip(idx.tolist(), bins.tolist())]))
    verdicts = coding_noise_tests(trace.q[s:], trace.d[s:], run.ecdq.delta)
    verdicts["stationarity"] = stationarity_check(e)
    report = RunReport(noise_seed=run.noise_seed, dither_seed=run.ecdq.dither_seed, samples=n,
                       sigma_e_sq=float(np.mean(np.sum(e ** 2, axis=1))), rate_bits=rate, rate_uncond_bits=rate_u,
                       cond_entropy_bits=conditional_entropy_bits(idx, bins), escape_fraction=esc,
                       verdicts=verdicts, counts=_joint_counts(idx, bins))
    return trace, report


def _joint_counts(idx, bins):
    keys, counts = np.unique(np.column_stack([bins, idx]), axis=0, return_counts=True)
    return {(int(b), int(i)): int(c) for (b, i), c in zip(keys, counts)}


def realization_seeds(master_seed, count):
    """(noise_seed, dither_seed) pairs spawned from one master seed (an int or
    a sequence of ints, as accepted by numpy's SeedSequence)."""
    out = []
    for child in np.random.SeedSequence(master_seed).spawn(count):
        a, b = child.generate_state(2, np.uint64)
        out.append((int(a), int(b)))
    return out


def training_seeds(master_seed):
    """Seeds for the codebook-training run, disjoint from the measurement spawn tree."""
    entropy = list(master_seed) if isinstance(master_seed, (list, tuple)) else [master_seed]
    a, b = np.random.SeedSequence(entropy + [0x7A11]).generate_state(2, np.uint64)
    return int(a), int(b)


def _run_task(args):
    run, codebook, unconditioned = args
    try:
        return run_closed_loop(run, codebook, unconditioned)[1]
    except DivergenceError as err:
        return err


def monte_carlo(template, codebook, realizations, master_seed, unconditioned=None, workers=1):
    """Independent realizations with seeds split off ``master_seed``; pooled report."""
    if realizations < 1:
        raise ValueError("need at least one realization")
    runs = [replace(template, noise_seed=ns, ecdq=replace(template.ecdq, dither_seed=ds))
            for ns, ds in realization_seeds(master_seed, realizations)]
    tasks = [(r, codebook, unconditioned) for r in runs]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_run_task, tasks))
    else:
        results = [_run_task(t) for t in tasks]
    failed = [r for r in results if isinstance(r, DivergenceError)]
    if failed:
        seeds = [s for f in failed for s in f.seeds]
        raise DivergenceError("%d of %d realizations diverged; noise seeds %s" % (len(failed), len(results), seeds),
                              seeds)
    counts = {}
    for r in results:
        for key, c in r.counts.items():
            counts[key] = counts.get(key, 0) + c
    return SimulationReport.pool(results, _entropy_from_counts(counts))


def _entropy_from_counts(counts):
    """H(index | bin) in bits from joint occurrence counts."""
    total = sum(counts.values())
    per_bin = {}
    for (b, _), c in counts.items():
        per_bin[b] = per_bin.get(b, 0) + c
    h = 0.0
    for (b, _), c in counts.items():
        h -= c / total * math.log2(c / per_bin[b])
    return max(h, 0.0)


def train_for_run(run, smoothing=1, max_magnitude=1 << 16):
    """Train conditioned and unconditioned codebooks on a dedicated training run.

    The training run has its own seeds (those of ``run``), a warmup of
    ``run.warmup`` samples and ``run.ecdq.training_samples`` logged samples.
    Codebook support is doubled until fewer than 1% of training samples
    need the escape word. Returns (codebook, unconditioned, ecdq_config).
    """
    cfg = run.ecdq
    train_run = replace(run, horizon=run.warmup + cfg.training_samples)
    trace = simulate(train_run)
    log = trace.symbol_log(run.warmup)
    while True:
        book = train_codebooks(log, cfg, smoothing)
        esc = np.mean([i not in book.tables[b] for i, b in log.tolist()])
        if esc < ESCAPE_TARGET or cfg.max_symbol_magnitude >= max_magnitude:
            break
        cfg = replace(cfg, max_symbol_magnitude=2 * cfg.max_symbol_magnitude)
    flat = np.column_stack([log[:, 0], np.zeros(len(log), dtype=np.int64)])
    uncond = train_codebooks(flat, replace(cfg, num_dither_bins=1), smoothing)
    return book, uncond, cfg


# ------------------------------------------------------------------ statistics

def conditional_entropy_estimate(symbol_log):
    """Plug-in H(index | dither bin) in bits/sample."""
    arr = np.asarray(symbol_log, dtype=np.int64)
    if arr.size == 0:
        raise ValueError("empty symbol log")
    return conditional_entropy_bits(arr[:, 0], arr[:, 1])


def _batch_se(x, batches=10):
    n = len(x) // batches
    means = x[:n * batches].reshape(batches, n).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(batches))


def stationarity_check(trace, threshold=5.0, min_length=2000):
    """Compare mean and mean-square of the two halves of a post-warmup trace.

    Standard errors come from batch means within each half. Passes when
    both differences are below ``threshold`` pooled standard errors.
    """
    x = np.asarray(trace, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) < min_length:
        raise ValueError("stationarity check needs at least %d samples" % min_length)
    half = len(x) // 2
    worst = 0.0
    detail = {}
    for c in range(x.shape[1]):
        for name, series in (("mean", x[:, c]), ("power", x[:, c] ** 2)):
            a, b = series[:half], series[half:2 * half]
            diff = abs(a.mean() - b.mean())
            se = math.hypot(_batch_se(a), _batch_se(b))
            z = 0.0 if diff == 0.0 else (diff / se if se > 0 else float("inf"))
            detail["%s_z_%d" % (name, c)] = z
            worst = max(worst, z)
    return Verdict(bool(worst < threshold), float(worst), threshold, detail)


def _xcorr(a, b, lag):
    """Sample correlation of a(k) with b(k - lag)."""
    if lag > 0:
        a, b = a[lag:], b[:-lag]
    elif lag < 0:
        a, b = a[:lag], b[-lag:]
    return float(np.corrcoef(a, b)[0, 1]) if np.std(a) > 0 and np.std(b) > 0 else 0.0


def coding_noise_tests(q, d, delta, lags=STAT_LAGS, alpha=0.01):
    """KS uniformity, whiteness and independence-from-d checks on w - v."""
    q = np.asarray(q, dtype=float)
    d = np.asarray(d, dtype=float).reshape(len(q), -1)
    n = len(q)
    bound = 4.0 / math.sqrt(n)
    ks = stats.kstest(q, stats.uniform(loc=-delta / 2, scale=delta).cdf)
    auto = max(abs(_xcorr(q, q, k)) for k in range(1, lags + 1))
    cross = max(abs(_xcorr(q, d[:, j], k)) for j in range(d.shape[1]) for k in range(-lags, lags + 1))
    return {"ks": Verdict(bool(ks.pvalue > alpha), float(ks.statistic), alpha, {"pvalue": float(ks.pvalue)}),
            "autocorrelation": Verdict(bool(auto < bound), auto, bound),
            "crosscorrelation": Verdict(bool(cross < bound), cross, bound)}


__all__ = ["SimRun", "SimulationReport", "RunReport", "Trace", "Verdict", "DivergenceError", "make_run",
           "simulate", "run_closed_loop", "monte_carlo", "train_for_run", "conditional_entropy_estimate",
           "stationarity_check", "coding_noise_tests", "realization_seeds", "training_seeds", "bit_lengths",
           "CodeBook"]
