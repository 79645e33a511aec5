"""Command-line entry point: dereverberation runs, filter analysis, sweeps.

Configuration precedence is defaults < config file (key = value lines) <
flags.  Every run writes a manifest with the fully resolved configuration;
``dereverb rerun MANIFEST`` reproduces the outputs bit for bit.

Exit codes: 0 success, 2 configuration error, 3 numeric/transport failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from typing import List, Optional

import numpy as np

from . import __version__, acoustics, harness, operator
from .dsp import StftConfig, Waveform, rms
from .errors import BridgeError, ConfigError, DereverbError, NumericError
from .io_wav import read_wav, write_wav
from .priors import GaussianMixturePrior, GaussianPrior
from .rir_opt import AdamConfig
from .sampler import DiffusionSchedule, run_blind, run_informed, trace_to_ndjson
from .wpe import WpeConfig, wpe_dereverb

_SCHEDULE_KEYS = (
    "t_max", "t_min", "rho", "steps", "s_churn", "zeta_scale",
    "reg_sigma_min", "reg_sigma_max",
)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="key = value overrides, lowest precedence")
    p.add_argument("--sample-rate", type=int, default=16000)
    p.add_argument("--downmix", action="store_true", help="average stereo inputs")
    p.add_argument("--manifest-out", help="manifest path (default: OUT.manifest.json)")


def _add_schedule(p: argparse.ArgumentParser):
    d = DiffusionSchedule()
    p.add_argument("--t-max", type=float, default=d.t_max)
    p.add_argument("--t-min", type=float, default=d.t_min)
    p.add_argument("--rho", type=float, default=d.rho)
    p.add_argument("--steps", type=int, default=d.n_steps)
    p.add_argument("--s-churn", type=float, default=d.s_churn)
    p.add_argument("--zeta-scale", type=float, default=d.zeta_scale)
    p.add_argument("--reg-sigma-min", type=float, default=d.reg_sigma_min)
    p.add_argument("--reg-sigma-max", type=float, default=d.reg_sigma_max)


def _add_run_common(p: argparse.ArgumentParser):
    _add_schedule(p)
    p.add_argument("--out", required=True)
    p.add_argument("--trace-out", help="default: OUT.trace.ndjson")
    p.add_argument("--prior", help="JSON file describing an analytic prior")
    p.add_argument(
        "--bridge",
        help="score served out of process: tcp:HOST:PORT or stdio:CMD "
        "(default from DEREVERB_BRIDGE)",
    )
    p.add_argument("--data-rms", type=float, default=0.05)
    p.add_argument("--no-rescale", action="store_true",
                   help="skip matching the output loudness to the input")
    p.add_argument("--no-wpe", action="store_true",
                   help="initialize from the raw measurement instead")
    p.add_argument("--wpe-taps", type=int, default=50)
    p.add_argument("--wpe-delay", type=int, default=2)
    p.add_argument("--wpe-iterations", type=int, default=5)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dereverb",
        description="Blind/informed dereverberation and room-filter analysis",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="mode", required=True)

    b = sub.add_parser("blind", help="joint dereverberation and filter estimation")
    b.add_argument("input")
    _add_common(b)
    _add_run_common(b)
    b.add_argument("--rir-out", help="estimated filter as WAV")
    b.add_argument("--params-out", help="filter parameters as JSON")
    b.add_argument("--snapshot-dir", help="per-step parameter JSON dumps")
    b.add_argument("--n-frames", type=int, default=operator.DEFAULT_N_FRAMES)
    b.add_argument("--n-inner", type=int, default=10)
    b.add_argument("--no-min-phase", action="store_true")
    b.add_argument("--no-regularizer", action="store_true")

    i = sub.add_parser("informed", help="dereverberation with a known filter")
    i.add_argument("input")
    i.add_argument("--rir", required=True, help="filter WAV")
    _add_common(i)
    _add_run_common(i)

    w = sub.add_parser("wpe", help="linear-prediction dereverberation only")
    w.add_argument("input")
    _add_common(w)
    w.add_argument("--out", required=True)
    w.add_argument("--taps", type=int, default=50)
    w.add_argument("--delay", type=int, default=2)
    w.add_argument("--iterations", type=int, default=5)

    a = sub.add_parser("analyze-rir", help="octave-band decay/clarity table")
    a.add_argument("input")
    _add_common(a)
    a.add_argument("--out", help="CSV path (default: stdout)")

    s = sub.add_parser("sweep", help="filter-perturbation robustness sweep")
    _add_common(s)
    _add_schedule(s)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--pairs", type=int, default=20)
    s.add_argument("--length-s", type=float, default=2.0)
    s.add_argument("--rir-length-s", type=float, default=0.25)
    s.add_argument("--snr", default="0,10,20,30,inf",
                   help="comma-separated RIR-error SNRs in dB")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--plot-data", action="store_true",
                   help="also emit per-metric CSVs (SNR vs value)")

    r = sub.add_parser("rerun", help="reproduce a run from its manifest")
    r.add_argument("manifest")
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: List[str]) -> argparse.Namespace:
    # first parse to find --config, then re-parse with file values as defaults
    args = parser.parse_args(argv)
    path = getattr(args, "config", None)
    if not path:
        return args
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    overrides = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            key = key.replace("-", "_")
            try:
                overrides[key] = json.loads(value)
            except json.JSONDecodeError:
                overrides[key] = value
    known = {a.dest for a in parser._subparsers._group_actions[0].choices[args.mode]._actions}
    bad = set(overrides) - known
    if bad:
        raise ConfigError(f"unknown config keys: {sorted(bad)}")
    sub = parser._subparsers._group_actions[0].choices[args.mode]
    sub.set_defaults(**overrides)
    return parser.parse_args(argv)


def _schedule_from(cfg: dict) -> DiffusionSchedule:
    return DiffusionSchedule(
        t_max=cfg["t_max"], t_min=cfg["t_min"], rho=cfg["rho"], n_steps=cfg["steps"],
        s_churn=cfg["s_churn"], zeta_scale=cfg["zeta_scale"],
        reg_sigma_min=cfg["reg_sigma_min"], reg_sigma_max=cfg["reg_sigma_max"],
    )


def _load_prior(cfg: dict):
    if cfg.get("bridge"):
        from .bridge import BridgedScoreModel

        return BridgedScoreModel(cfg["bridge"])
    endpoint = os.environ.get("DEREVERB_BRIDGE")
    if endpoint and not cfg.get("prior"):
        from .bridge import BridgedScoreModel

        return BridgedScoreModel(endpoint)
    if cfg.get("prior"):
        with open(cfg["prior"]) as fh:
            doc = json.load(fh)
        kind = doc.get("type")
        if kind == "gaussian":
            return GaussianPrior(
                mean=float(doc.get("mean", 0.0)),
                variance=float(doc.get("variance", 1.0)),
                data_rms=doc.get("data_rms", cfg["data_rms"]),
            )
        if kind == "gmm":
            return GaussianMixturePrior(
                means=np.asarray(doc["means"], dtype=np.float64),
                variances=np.asarray(doc["variances"], dtype=np.float64),
                weights=(
                    np.asarray(doc["weights"], dtype=np.float64)
                    if "weights" in doc
                    else None
                ),
                data_rms=doc.get("data_rms", cfg["data_rms"]),
            )
        raise ConfigError(f"unknown prior type {kind!r} in {cfg['prior']}")
    # placeholder analytic prior; realistic use serves a trained score model
    # over the bridge
    return GaussianPrior(mean=0.0, variance=cfg["data_rms"] ** 2, data_rms=cfg["data_rms"])


def _wpe_cfg(cfg: dict, stft: StftConfig) -> WpeConfig:
    return WpeConfig(
        taps=cfg.get("wpe_taps", 50),
        delay=cfg.get("wpe_delay", 2),
        iterations=cfg.get("wpe_iterations", 5),
        stft=stft,
    )


def _read_input(cfg: dict, key: str = "input") -> Waveform:
    x = read_wav(cfg[key], downmix=cfg.get("downmix", False))
    if x.sample_rate != cfg["sample_rate"]:
        raise ConfigError(
            f"{cfg[key]} is sampled at {x.sample_rate} Hz; expected "
            f"{cfg['sample_rate']} (pass --sample-rate to override)"
        )
    return x


def _write_manifest(cfg: dict):
    path = cfg.get("manifest_out") or cfg["out"] + ".manifest.json"
    doc = {"version": __version__, "config": cfg}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def _finish_run(cfg: dict, y: Waveform, speech: np.ndarray, trace) -> Waveform:
    out = Waveform(speech, y.sample_rate)
    if not cfg.get("no_rescale") and rms(out) > 0:
        out = Waveform(out.samples * (rms(y) / rms(out)), y.sample_rate)
    write_wav(cfg["out"], out)
    trace_path = cfg.get("trace_out") or cfg["out"] + ".trace.ndjson"
    with open(trace_path, "w") as fh:
        fh.write(trace_to_ndjson(trace))
    return out


def handle_blind(cfg: dict) -> int:
    y = _read_input(cfg)
    stft = StftConfig(sample_rate=y.sample_rate)
    model = _load_prior(cfg)
    schedule = _schedule_from(cfg)
    result = run_blind(
        y.samples,
        model,
        schedule,
        seed=cfg["seed"],
        cfg=stft,
        n_frames=cfg["n_frames"],
        n_inner=cfg["n_inner"],
        adam_cfg=AdamConfig(),
        use_min_phase=not cfg.get("no_min_phase", False),
        use_regularizer=not cfg.get("no_regularizer", False),
        wpe_cfg=_wpe_cfg(cfg, stft),
        use_wpe=not cfg.get("no_wpe", False),
        snapshot_dir=cfg.get("snapshot_dir"),
    )
    _finish_run(cfg, y, result.speech, result.trace)
    params_path = cfg.get("params_out") or cfg["out"] + ".rir.json"
    with open(params_path, "w") as fh:
        fh.write(operator.params_to_json(result.params))
    if cfg.get("rir_out"):
        rir = operator.render_rir(
            result.params, stft, use_min_phase=not cfg.get("no_min_phase", False)
        )
        write_wav(cfg["rir_out"], rir)
    _write_manifest(cfg)
    return 0


def handle_informed(cfg: dict) -> int:
    y = _read_input(cfg)
    h = _read_input({**cfg, "rir": cfg["rir"]}, key="rir")
    stft = StftConfig(sample_rate=y.sample_rate)
    model = _load_prior(cfg)
    schedule = _schedule_from(cfg)
    result = run_informed(
        y.samples,
        h.samples,
        model,
        schedule,
        seed=cfg["seed"],
        cfg=stft,
        wpe_cfg=_wpe_cfg(cfg, stft),
        use_wpe=not cfg.get("no_wpe", False),
    )
    _finish_run(cfg, y, result.speech, result.trace)
    _write_manifest(cfg)
    return 0


def handle_wpe(cfg: dict) -> int:
    y = _read_input(cfg)
    stft = StftConfig(sample_rate=y.sample_rate)
    wcfg = WpeConfig(
        taps=cfg["taps"], delay=cfg["delay"], iterations=cfg["iterations"], stft=stft
    )
    out = wpe_dereverb(y, wcfg)
    write_wav(cfg["out"], out)
    _write_manifest(cfg)
    return 0


def handle_analyze_rir(cfg: dict) -> int:
    h = _read_input(cfg)
    metrics = acoustics.rir_metrics(h.samples, h.sample_rate)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["band_hz", "t60_s", "c50_db", "flags"])
    for band in sorted(metrics.t60_s):
        t = metrics.t60_s[band]
        c = metrics.c50_db[band]
        flags = []
        if t is None:
            flags.append("t60_undefined")
        if abs(c) >= acoustics.C50_CLIP_DB:
            flags.append("c50_clipped")
        writer.writerow(
            [f"{band:g}", "" if t is None else f"{t:.6f}", f"{c:.4f}", "|".join(flags)]
        )
    text = buf.getvalue()
    if cfg.get("out"):
        with open(cfg["out"], "w") as fh:
            fh.write(text)
        cfg_for_manifest = cfg
        _write_manifest(cfg_for_manifest)
    else:
        sys.stdout.write(text)
    return 0


def handle_sweep(cfg: dict) -> int:
    os.makedirs(cfg["out_dir"], exist_ok=True)
    snr_grid = []
    for token in str(cfg["snr"]).split(","):
        token = token.strip().lower()
        snr_grid.append(None if token in ("inf", "none") else float(token))
    rng = np.random.default_rng(np.random.SeedSequence((cfg["seed"], 1)))
    length = int(cfg["length_s"] * cfg["sample_rate"])
    prior = harness.make_speech_prior(length=length, rng=rng)
    pairs = harness.make_synthetic_pairs(
        cfg["pairs"], prior, rir_spec_seed=cfg["seed"], rng=rng,
        rir_length_s=cfg["rir_length_s"], sample_rate=cfg["sample_rate"],
    )
    schedule = _schedule_from(cfg)
    report = harness.robustness_sweep(
        pairs, prior, schedule, snr_grid_db=snr_grid, seed=cfg["seed"],
        cfg=StftConfig(sample_rate=cfg["sample_rate"]), jobs=cfg["jobs"],
    )
    with open(os.path.join(cfg["out_dir"], "robustness.csv"), "w") as fh:
        fh.write(report.to_csv())
    with open(os.path.join(cfg["out_dir"], "robustness.json"), "w") as fh:
        fh.write(report.to_json())
    if cfg.get("plot_data"):
        for metric in ("si_sdr_db", "log_spectral_distance_db"):
            with open(os.path.join(cfg["out_dir"], f"fig_{metric}.csv"), "w") as fh:
                fh.write(report.plot_data(metric))
    cfg_m = dict(cfg)
    cfg_m["out"] = os.path.join(cfg["out_dir"], "robustness")
    _write_manifest(cfg_m)
    return 0


_HANDLERS = {
    "blind": handle_blind,
    "informed": handle_informed,
    "wpe": handle_wpe,
    "analyze-rir": handle_analyze_rir,
    "sweep": handle_sweep,
}


def handle_rerun(manifest_path: str) -> int:
    if not os.path.exists(manifest_path):
        raise ConfigError(f"manifest not found: {manifest_path}")
    with open(manifest_path) as fh:
        doc = json.load(fh)
    cfg = doc.get("config")
    if not isinstance(cfg, dict) or "mode" not in cfg:
        raise ConfigError(f"{manifest_path} is not a run manifest")
    return _HANDLERS[cfg["mode"]](cfg)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = _apply_config_file(parser, list(argv) if argv is not None else sys.argv[1:])
        if args.mode == "rerun":
            return handle_rerun(args.manifest)
        cfg = {k: v for k, v in vars(args).items()}
        return _HANDLERS[args.mode](cfg)
    except BridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DereverbError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
