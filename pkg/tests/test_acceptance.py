"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
lines as they complete.  The two end-to-end criteria distribute their trials
over two worker processes; expect roughly 45 minutes for the whole module.
"""

import os
import shutil
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pytest

from dereverb import dsp, operator
from dereverb.acoustics import c50, t60
from dereverb.dsp import StftConfig, Waveform
from dereverb.harness import (
    make_speech_prior,
    make_synthetic_pairs,
    robustness_sweep,
    si_sdr,
)
from dereverb.io_wav import write_wav
from dereverb.operator import (
    apply_vjp_params,
    apply_vjp_x,
    apply_with_tape,
    assemble_rir,
    init_rir_params,
    render_rir,
)
from dereverb.priors import GaussianPrior
from dereverb.rir_opt import noise_regularizer
from dereverb.sampler import DiffusionSchedule, run_informed, zeta
from dereverb.wpe import WpeConfig, wpe_dereverb_array

SMALL = StftConfig(sample_rate=16000, window_ms=4.0, hop_ms=1.0, pad_factor=2.0)
FS = 16000
WORKERS = 2


def report(name: str, ok: bool, detail: str):
    print(f"\n[ACCEPTANCE] {'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# Operator correctness
# ---------------------------------------------------------------------------


class TestOperatorCorrectness:
    def test_adjoints_and_finite_differences(self):
        start = time.monotonic()
        rng = np.random.default_rng(0)
        params = init_rir_params(SMALL, n_frames=8, rng=rng)
        params.weights[:] = rng.uniform(1.5, 4.0, params.layout.n_bands)
        params.decays[:] = rng.uniform(2.0, 9.0, params.layout.n_bands)
        x = rng.standard_normal(4096)
        y, tape = apply_with_tape(params, x, SMALL)
        u = rng.standard_normal(y.size)

        lhs = float(u @ y)
        rhs = float(apply_vjp_x(tape, u) @ x)
        adjoint_err = abs(lhs - rhs) / max(abs(lhs), 1e-12)

        grads = apply_vjp_params(tape, u)
        gx = apply_vjp_x(tape, u)
        worst_fd = 0.0

        def loss(params_q=None, x_q=None):
            yq, _ = apply_with_tape(
                params_q if params_q is not None else params,
                x_q if x_q is not None else x,
                SMALL,
            )
            return float(u @ yq)

        for field, idx in [
            ("weights", 2), ("weights", 17), ("decays", 5), ("decays", 23),
            ("phases", (0, 11)), ("phases", (4, 33)), ("phases", (7, 60)),
        ]:
            base = getattr(params, field)[idx]
            eps = 1e-5 * max(abs(base), 1.0)
            q_up, q_dn = params.copy(), params.copy()
            getattr(q_up, field)[idx] = base + eps
            getattr(q_dn, field)[idx] = base - eps
            fd = (loss(params_q=q_up) - loss(params_q=q_dn)) / (2 * eps)
            rel = abs(fd - grads[field][idx]) / max(abs(fd), 1e-8)
            worst_fd = max(worst_fd, rel)
        for idx in (7, 1033, 4000):
            eps = 1e-5
            x_up, x_dn = x.copy(), x.copy()
            x_up[idx] += eps
            x_dn[idx] -= eps
            fd = (loss(x_q=x_up) - loss(x_q=x_dn)) / (2 * eps)
            rel = abs(fd - gx[idx]) / max(abs(fd), 1e-8)
            worst_fd = max(worst_fd, rel)
        elapsed = time.monotonic() - start
        ok = adjoint_err <= 1e-6 and worst_fd <= 1e-4 and elapsed < 60
        report(
            "operator adjoint/finite-difference",
            ok,
            f"adjoint rel {adjoint_err:.2e}, worst FD rel {worst_fd:.2e}, "
            f"{elapsed:.1f}s",
        )


# ---------------------------------------------------------------------------
# Projection suite
# ---------------------------------------------------------------------------


def _random_phase_counterpart(h, rng):
    n = h.size
    mag = np.abs(np.fft.fft(h))
    ph = rng.uniform(-np.pi, np.pi, n)
    ph[0] = 0.0
    if n % 2 == 0:
        ph[n // 2] = 0.0
        ph[n // 2 + 1 :] = -ph[1 : n // 2][::-1]
    else:
        ph[(n + 1) // 2 :] = -ph[1 : (n + 1) // 2][::-1]
    return np.fft.ifft(mag * np.exp(1j * ph)).real


class TestProjectionSuite:
    def test_minimum_phase_and_assembly(self):
        rng = np.random.default_rng(1)
        worst_mag, worst_energy = 0.0, 0.0
        for _ in range(100):
            n = 2048
            h = np.zeros(n)
            h[0] = 1.0
            h += 0.5 * rng.standard_normal(n) * np.exp(
                -np.arange(n) / rng.uniform(100, 500)
            )
            hm = dsp.minimum_phase_array(h)
            mag_err = np.linalg.norm(
                np.abs(np.fft.fft(hm)) - np.abs(np.fft.fft(h))
            ) / np.linalg.norm(np.abs(np.fft.fft(h)))
            worst_mag = max(worst_mag, mag_err)
            counter = _random_phase_counterpart(h, rng)
            gap = np.cumsum(hm**2) - np.cumsum(counter**2)
            worst_energy = max(worst_energy, -gap.min() / np.sum(h**2))
        onset_err, consistency = 0.0, 0.0
        for seed in range(5):
            params = init_rir_params(
                SMALL, n_frames=8, rng=np.random.default_rng(10 + seed)
            )
            hbar, h_unit = assemble_rir(params, SMALL)
            onset_err = max(onset_err, abs(h_unit.samples[0] - 1.0))
            re = dsp.stft_array(dsp.istft_array(hbar.values, SMALL), SMALL)
            consistency = max(
                consistency,
                np.linalg.norm(re - hbar.values) / np.linalg.norm(hbar.values),
            )
        ok = (
            worst_mag <= 1e-6
            and worst_energy <= 1e-5
            and onset_err <= 1e-9
            and consistency <= 1e-6
        )
        report(
            "projection suite",
            ok,
            f"mag err {worst_mag:.2e}, partial-energy deficit {worst_energy:.2e}, "
            f"onset err {onset_err:.2e}, consistency {consistency:.2e}",
        )


# ---------------------------------------------------------------------------
# Schedule and guidance arithmetic
# ---------------------------------------------------------------------------


class TestScheduleGuidance:
    def test_endpoints_and_zeta_norm(self):
        sigmas = DiffusionSchedule().sigmas()
        endpoints_ok = sigmas[0] == 0.5 and sigmas[-1] == 1e-4
        rng = np.random.default_rng(2)
        norm_err = 0.0
        for n in (1000, 64000):
            g = rng.standard_normal(n)
            z = zeta(float(np.linalg.norm(g)), n, 0.6)
            norm_err = max(
                norm_err, abs(np.linalg.norm(z * g) - np.sqrt(n) * 0.6)
            )
        ok = endpoints_ok and norm_err <= 1e-9
        report(
            "schedule/guidance arithmetic",
            ok,
            f"sigma_0={sigmas[0]}, sigma_last={sigmas[-1]}, "
            f"norm err {norm_err:.2e}",
        )


# ---------------------------------------------------------------------------
# Acoustics oracle
# ---------------------------------------------------------------------------


class TestAcousticsOracle:
    def test_t60_and_c50(self):
        start = time.monotonic()
        worst = 0.0
        for tau in (0.05, 0.1, 0.2, 0.5):
            vals = []
            for seed in (3, 4, 5):
                rng = np.random.default_rng(seed)
                n = int((6 * tau + 0.5) * FS)
                carrier = np.zeros(n)
                from dereverb.acoustics import octave_filter

                carrier = octave_filter(rng.standard_normal(n), 2000.0, FS)
                h = carrier * np.exp(-np.arange(n) / (tau * FS))
                vals.append(t60(h, 2000.0, FS))
            target = 3.0 * np.log(10.0) * tau
            worst = max(worst, abs(np.median(vals) / target - 1.0))
        h = np.zeros(FS)
        h[0] = 1.0
        h[int(0.1 * FS)] = 1.0
        c50_err = max(abs(c50(h, band, FS)) for band in (500.0, 1000.0, 4000.0))
        elapsed = time.monotonic() - start
        ok = worst <= 0.05 and c50_err <= 0.01 and elapsed < 60
        report(
            "acoustics oracle",
            ok,
            f"worst T60 rel err {worst:.3f}, C50 split err {c50_err:.4f} dB, "
            f"{elapsed:.1f}s",
        )


# ---------------------------------------------------------------------------
# Informed robustness trend
# ---------------------------------------------------------------------------


class TestInformedRobustness:
    def test_si_sdr_monotone_in_rir_snr(self):
        start = time.monotonic()
        rng = np.random.default_rng(40)
        length = 2 * FS
        prior = make_speech_prior(
            length=length, rng=rng, n_components=6, tilt_pole=0.3
        )
        pairs = make_synthetic_pairs(
            20, prior, rir_spec_seed=400, rng=rng, rir_length_s=0.25
        )
        schedule = DiffusionSchedule(n_steps=100)
        report_obj = robustness_sweep(
            pairs,
            prior,
            schedule,
            snr_grid_db=(0.0, 10.0, 20.0, 30.0, None),
            seed=41,
            jobs=WORKERS,
        )
        means = [row["si_sdr_db"] for row in report_obj.rows]
        monotone = all(b >= a - 1e-12 for a, b in zip(means, means[1:]))
        spread = means[-1] - means[0]
        elapsed = time.monotonic() - start
        ok = monotone and spread >= 5.0 and elapsed < 30 * 60
        report(
            "informed robustness trend",
            ok,
            f"mean SI-SDR by SNR {[round(m, 2) for m in means]}, "
            f"inf-vs-0dB gap {spread:.2f} dB, {elapsed / 60:.1f} min",
        )


# ---------------------------------------------------------------------------
# Blind end-to-end synthetic inversion
# ---------------------------------------------------------------------------

BLIND_TRIALS = 20
BLIND_LENGTH = 24000
BLIND_BANDS = (125.0, 250.0, 500.0, 1000.0, 2000.0)


def _blind_trial(trial: int) -> dict:
    from dereverb.sampler import run_blind

    cfg = StftConfig()
    rng = np.random.default_rng(1000 + trial)
    prior = make_speech_prior(length=BLIND_LENGTH, rng=rng, n_components=6)
    x = prior.sample(rng)
    target = init_rir_params(cfg, n_frames=100, rng=rng)
    target.weights[:] = rng.uniform(1.0, 3.0, target.layout.n_bands)
    target.decays[:] = rng.uniform(7.0, 14.0, target.layout.n_bands)
    y, _ = apply_with_tape(target, x, cfg)
    result = run_blind(y, prior, DiffusionSchedule(), seed=5000 + trial, cfg=cfg)
    h_ref = render_rir(target, cfg).samples
    h_est = render_rir(result.params, cfg).samples
    t60_rel = {}
    for band in BLIND_BANDS:
        ref = t60(h_ref, band, FS)
        est = t60(h_est, band, FS)
        t60_rel[band] = (
            None if ref is None or est is None else abs(est - ref) / ref
        )
    return {
        "base": si_sdr(y[: x.size], x),
        "out": si_sdr(result.speech, x),
        "t60_rel": t60_rel,
    }


class TestBlindInversion:
    def test_synthetic_inversion(self):
        start = time.monotonic()
        with ProcessPoolExecutor(max_workers=WORKERS) as pool:
            results = list(pool.map(_blind_trial, range(BLIND_TRIALS)))
        improved = sum(1 for r in results if r["out"] > r["base"])
        medians = {}
        for band in BLIND_BANDS:
            vals = [
                r["t60_rel"][band] for r in results if r["t60_rel"][band] is not None
            ]
            medians[band] = float(np.median(vals)) if vals else None
        defined_ok = all(
            sum(r["t60_rel"][band] is not None for r in results) >= 15
            for band in BLIND_BANDS
        )
        t60_ok = all(m is not None and m <= 0.20 for m in medians.values())
        elapsed = time.monotonic() - start
        ok = (
            improved >= int(0.8 * BLIND_TRIALS)
            and t60_ok
            and defined_ok
            and elapsed < 60 * 60
        )
        report(
            "blind synthetic inversion",
            ok,
            f"SI-SDR improved {improved}/{BLIND_TRIALS}, median per-band T60 "
            f"rel err {[round(medians[b], 3) for b in BLIND_BANDS]}, "
            f"{elapsed / 60:.1f} min",
        )


# ---------------------------------------------------------------------------
# Noise-regularizer statistics
# ---------------------------------------------------------------------------


class TestNoiseRegularizerStatistics:
    def test_gradient_mean_and_std_scaling(self):
        # Each half of the first-order analysis is checked in its validity
        # regime.  The zero-mean property needs an operating point without
        # interference nulls (coherent phases): magnitude compression
        # rectifies noise at near-null bins, which biases the gradient at
        # order sigma'^(2/3) and is resolvable at 10^3 draws on a
        # random-phase filter.  Conversely, std-linearity in sigma' needs the
        # generic random-phase point where regular bins dominate the
        # variance.  Both regimes are real operating points of the sampler.
        layout = operator.default_band_layout(SMALL.sample_rate)
        n_frames = 4
        coherent = operator.RirParams(
            np.zeros((n_frames, SMALL.n_bins)),
            np.full(layout.n_bands, 2.0),
            np.full(layout.n_bands, 10.0),
            layout,
            n_frames,
        )
        h_len = operator.rir_length(SMALL, n_frames)
        rng = np.random.default_rng(8)
        n_draws = 1000
        samples = np.empty((n_draws, layout.n_bands))
        for i in range(n_draws):
            _, grads = noise_regularizer(
                coherent, 5e-4, rng.standard_normal(h_len), SMALL
            )
            samples[i] = grads["weights"]
        mean = samples.mean(axis=0)
        se = samples.std(axis=0, ddof=1) / np.sqrt(n_draws)
        max_z = float(np.max(np.abs(mean) / se))
        mean_ok = max_z <= 3.0

        generic = init_rir_params(SMALL, n_frames=4, rng=np.random.default_rng(7))
        stds = []
        for sigma_prime in (1e-4, 2e-4):
            d_rng = np.random.default_rng(9)
            draws = np.empty((300, layout.n_bands))
            for i in range(300):
                _, grads = noise_regularizer(
                    generic, sigma_prime, d_rng.standard_normal(h_len), SMALL
                )
                draws[i] = grads["weights"]
            stds.append(draws.std(axis=0, ddof=1).mean())
        ratio = stds[1] / stds[0]
        ratio_ok = abs(ratio - 2.0) <= 0.2
        ok = mean_ok and ratio_ok
        report(
            "noise-regularizer statistics",
            ok,
            f"mean max |z| {max_z:.2f} (<= 3), std ratio for doubled sigma' "
            f"{ratio:.3f} (target 2 +- 10%)",
        )


# ---------------------------------------------------------------------------
# WPE sanity
# ---------------------------------------------------------------------------


class TestWpeSanity:
    def test_reduces_spectral_distance_to_dry(self):
        cfg = WpeConfig(taps=30, delay=2, iterations=4, stft=SMALL)
        rng = np.random.default_rng(50)
        improved = 0
        trials = 50
        for _ in range(trials):
            e = rng.standard_normal(24000)
            x = np.empty(24000)
            acc = 0.0
            for i in range(24000):
                acc = 0.9 * acc + e[i]
                x[i] = acc
            n = 3200
            h = np.zeros(n)
            h[0] = 1.0
            tail_t = np.arange(1, n) / FS
            alpha = 3.0 * np.log(10.0) / 0.4
            h[1:] = 0.6 * rng.standard_normal(n - 1) * np.exp(-alpha * tail_t)
            y = np.convolve(x, h)[: x.size]
            out = wpe_dereverb_array(y, cfg)
            sx = np.abs(dsp.stft_array(x, SMALL))
            sy = np.abs(dsp.stft_array(y, SMALL))
            so = np.abs(dsp.stft_array(out, SMALL))
            if np.mean(np.abs(so - sx)) < np.mean(np.abs(sy - sx)):
                improved += 1
        ok = improved >= int(0.9 * trials)
        report("WPE sanity", ok, f"improved on {improved}/{trials} trials")


# ---------------------------------------------------------------------------
# Determinism: rerun from manifest is bitwise-identical
# ---------------------------------------------------------------------------


class TestDeterminism:
    def test_manifest_reruns_bitwise(self, tmp_path, monkeypatch):
        from dereverb.cli import main

        monkeypatch.chdir(tmp_path)
        rng = np.random.default_rng(60)
        write_wav("in.wav", Waveform(0.05 * rng.standard_normal(6000)))
        h = np.zeros(300)
        h[0] = 1.0
        h[150] = 0.4
        write_wav("h.wav", Waveform(h))
        write_wav("y.wav", Waveform(np.convolve(0.05 * rng.standard_normal(6000), h)))
        fast = ["--steps", "5", "--wpe-taps", "10", "--wpe-iterations", "2"]
        runs = [
            ["blind", "in.wav", "--out", "b.wav", "--rir-out", "br.wav",
             "--n-frames", "12", "--n-inner", "2", "--seed", "3"] + fast,
            ["informed", "y.wav", "--rir", "h.wav", "--out", "i.wav",
             "--seed", "4"] + fast,
            ["wpe", "in.wav", "--out", "w.wav", "--taps", "10",
             "--iterations", "2"],
            ["sweep", "--out-dir", "rep", "--pairs", "2", "--length-s", "0.2",
             "--rir-length-s", "0.05", "--snr", "10,inf", "--steps", "4"],
        ]
        outputs = [
            ["b.wav", "br.wav", "b.wav.rir.json", "b.wav.trace.ndjson"],
            ["i.wav", "i.wav.trace.ndjson"],
            ["w.wav"],
            [os.path.join("rep", "robustness.csv"), os.path.join("rep", "robustness.json")],
        ]
        manifests = ["b.wav.manifest.json", "i.wav.manifest.json",
                     "w.wav.manifest.json", os.path.join("rep", "robustness.manifest.json")]
        all_ok = True
        details = []
        for argv, outs, manifest in zip(runs, outputs, manifests):
            assert main(argv) == 0, argv
            before = {p: open(p, "rb").read() for p in outs}
            for p in outs:
                os.remove(p)
            assert main(["rerun", manifest]) == 0
            same = all(open(p, "rb").read() == before[p] for p in outs)
            all_ok = all_ok and same
            details.append(f"{argv[0]}:{'ok' if same else 'DIFF'}")
        report("determinism (manifest rerun)", all_ok, ", ".join(details))


# ---------------------------------------------------------------------------
# [SECONDARY] Bridge equivalence
# ---------------------------------------------------------------------------


class TestBridgeEquivalence:
    def test_sampler_matches_over_bridge(self):
        node = shutil.which("node")
        dist = Path(__file__).resolve().parent.parent / "bridge" / "dist" / "main.js"
        if node is None or not dist.exists():
            pytest.skip("score-bridge server not built (run `npm run build` in bridge/)")
        from dereverb.bridge import BridgedScoreModel

        rng = np.random.default_rng(70)
        length = 2000
        y = 0.05 * rng.standard_normal(length + 2)
        h = np.array([1.0, 0.0, 0.4])
        schedule = DiffusionSchedule(n_steps=20)
        proc = subprocess.Popen(
            [node, str(dist), "--mode", "tcp", "--port", "0",
             "--mean", "0", "--variance", "0.0025", "--data-rms", "none"],
            stdout=subprocess.PIPE,
            text=True,
        )
        try:
            port = int(proc.stdout.readline().split()[1])
            local = GaussianPrior(mean=0.0, variance=0.0025, data_rms=None)
            a = run_informed(y, h, local, schedule, seed=71, cfg=SMALL, use_wpe=False)
            with BridgedScoreModel(f"tcp:127.0.0.1:{port}") as remote:
                b = run_informed(y, h, remote, schedule, seed=71, cfg=SMALL, use_wpe=False)
        finally:
            proc.terminate()
            proc.wait(timeout=10)
        diff = float(np.max(np.abs(a.speech - b.speech)))
        ok = diff <= 1e-5
        report("bridge equivalence [secondary]", ok, f"max abs diff {diff:.2e} at N=20")
