"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable or
inconsistent input), 3 numeric failure (training diverged).
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .audio import (DEFAULT_FRAME_LEN, DEFAULT_OVERLAP, AudioClip, Frame, WavError, frame_signal,
                    frames_to_array, overlap_add, read_wav, write_wav)
from .bitstream import Bitstream, BitstreamError
from .codec import (TRACE_FIELDS, CheckpointError, TrainingDiverged, band_smr_db, bitstream_indices,
                    decode_clip, degrade,
                    encode_clip, greedy_nmr_allocate, load_checkpoint, optimize_reconstruction,
                    reencode_bitstream, save_checkpoint, train_stack, write_log_csv)
from .loss import PRESETS, LossConfig, noise_to_mask, reference_pam, total_loss
from .pam import analyze_frame, bark
from .quantizer import (Codebook, RateController, entropy_bits, features_per_second,
                        huffman_encode, quantize_vector)
from .spectral import DEFAULT_MEL_BANDS
from .svgplot import line_chart, write_svg

OUT_ENV = "PSYCAL_OUT_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _out_dir(args) -> Path:
    return Path(args.out_dir or os.environ.get(OUT_ENV) or "psycal_out")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _write_json(path: Path | None, obj) -> None:
    text = json.dumps(obj, indent=2)
    if path is None:
        print(text)
    else:
        Path(path).write_text(text + "\n")


def _frames(clip: AudioClip, args) -> np.ndarray:
    return frames_to_array(frame_signal(clip, args.frame_len, args.overlap))


def _f(x: float) -> str:
    return repr(float(x))


# --- commands -------------------------------------------------------------------

def cmd_analyze(args) -> int:
    clip = read_wav(args.wav, downmix=args.downmix)
    frames = _frames(clip, args)
    spectrum, maskers, thresholds = [], [], []
    analyses = []
    for j, fr in enumerate(frames):
        a = analyze_frame(fr, clip.sample_rate)
        analyses.append(a)
        hz = np.arange(a.n_bins) * a.psd.bin_hz
        z = bark(hz)
        for b in range(a.n_bins):
            spectrum.append([j, b, _f(hz[b]), _f(z[b]), _f(a.psd.values[b]), _f(a.ath.q[b]),
                             _f(a.mask.m[b]), _f(a.weights.w[b])])
        for r, m in enumerate(a.maskers.maskers):
            maskers.append([j, r, m.kind, m.bin, _f(m.bin * a.psd.bin_hz), _f(m.bark), _f(m.level)])
        for kind, mat in (("tonal", a.thresholds.u), ("noise", a.thresholds.v)):
            for r in range(mat.shape[1]):
                for b in np.flatnonzero(mat[:, r] > -200.0):
                    thresholds.append([j, kind, r, int(b), _f(mat[b, r])])

    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "spectrum.csv", ["frame", "bin", "hz", "bark", "psd_db", "ath_db", "mask_db", "weight"], spectrum)
    _write_csv(out / "maskers.csv", ["frame", "index", "kind", "bin", "hz", "bark", "level_db"], maskers)
    _write_csv(out / "thresholds.csv", ["frame", "kind", "masker", "bin", "threshold_db"], thresholds)
    if args.svg:
        j = min(max(args.svg_frame, 0), len(analyses) - 1)
        a = analyses[j]
        hz = np.arange(a.n_bins) * a.psd.bin_hz
        marks = []
        for kind in ("tonal", "noise"):
            ms = [m for m in a.maskers.maskers if m.kind == kind]
            marks.append((f"{kind} maskers", [m.bin * a.psd.bin_hz for m in ms], [m.level for m in ms]))
        svg = line_chart([("PSD", hz, a.psd.values), ("threshold in quiet", hz, a.ath.q),
                          ("global mask", hz, a.mask.m)], title=f"Frame {j}", xlabel="Hz",
                         ylabel="dB SPL", markers=marks)
        write_svg(out / f"analysis_frame{j}.svg", svg)
    print(f"analyzed {len(frames)} frames, {len(maskers)} maskers -> {out}")
    return 0


def cmd_loss(args) -> int:
    ref = read_wav(args.ref, downmix=args.downmix)
    test = read_wav(args.test, downmix=args.downmix)
    if ref.sample_rate != test.sample_rate:
        raise ValueError(f"sample rates differ: {ref.sample_rate} vs {test.sample_rate}")
    if len(ref) != len(test):
        raise ValueError(f"lengths differ: {len(ref)} vs {len(test)} samples")
    cfg = LossConfig.preset(args.preset, lam=args.lam, mel_bands=args.mel_bands,
                            sample_rate=float(ref.sample_rate))
    s = _frames(ref, args)
    x = _frames(test, args)
    pam = reference_pam(s, cfg)
    rep = total_loss(s, x[None], cfg, pam)
    result = {"preset": args.preset, "frames": int(s.shape[0]), "used_masking_model": pam is not None}
    result.update(rep.to_dict())
    _write_json(Path(args.out) if args.out else None, result)
    return 0


def cmd_quantize(args) -> int:
    clip = read_wav(args.wav, downmix=args.downmix)
    frames = _frames(clip, args)
    if args.checkpoint:
        stack = load_checkpoint(args.checkpoint)
        if stack.frame_len != args.frame_len:
            raise ValueError(f"checkpoint frame length {stack.frame_len} differs from --frame-len {args.frame_len}")
        z = stack.modules[0].encode(frames)
        rate = features_per_second(clip.sample_rate, args.frame_len - args.overlap, stack.code_len)
    else:
        z = frames
        rate = features_per_second(clip.sample_rate, args.frame_len - args.overlap, args.frame_len)
    lo, hi = float(z.min()), float(z.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    cb = Codebook.uniform(args.k, lo, hi, args.alpha)
    q_soft, asg = quantize_vector(z, cb, "soft")
    soft = entropy_bits(asg, "soft", rate)
    hard = entropy_bits(asg, "hard", rate)
    table, _, nbits = huffman_encode(asg.index.ravel(), k=args.k)
    result = {
        "k": args.k, "alpha": args.alpha, "codes": int(z.size), "feature_rate": rate,
        "entropy_soft_bits": soft.entropy_bits, "entropy_hard_bits": hard.entropy_bits,
        "lower_bound_bps": rate * hard.entropy_bits, "huffman_bits": nbits,
        "huffman_mean_bits": nbits / z.size, "huffman_bps": rate * nbits / z.size,
        "soft_hard_gap": float(np.mean(np.abs(q_soft - asg.hard_value))),
        "quantization_sse": float(np.sum((asg.hard_value - z) ** 2)),
    }
    _write_json(Path(args.out) if args.out else None, result)
    return 0


def cmd_codec(args) -> int:
    stack = load_checkpoint(args.checkpoint)
    out = _out_dir(args)
    if args.mode == "decode":
        bs = Bitstream.from_bytes(Path(args.input).read_bytes())
        clip = decode_clip(bs, stack)
        out.mkdir(parents=True, exist_ok=True)
        target = Path(args.out) if args.out else out / "decoded.wav"
        write_wav(clip, target, "float32")
        print(f"decoded {bs.n_frames} frames -> {target}")
        return 0

    clip = read_wav(args.input, downmix=args.downmix)
    bs = encode_clip(clip, stack, args.overlap)
    data = bs.to_bytes()
    if args.mode == "encode":
        out.mkdir(parents=True, exist_ok=True)
        target = Path(args.out) if args.out else out / "encoded.psyb"
        target.write_bytes(data)
        print(f"{bs.payload_bits} payload bits, {bs.kbps:.3f} kbps -> {target}")
        return 0

    decoded = decode_clip(Bitstream.from_bytes(data), stack)
    cfg = LossConfig.preset(args.preset, sample_rate=float(clip.sample_rate))
    s = _frames(clip, args)
    x = _frames(decoded, args)
    pam = reference_pam(s, LossConfig(sample_rate=float(clip.sample_rate)))
    rep = total_loss(s, x[None], cfg, pam if cfg.needs_pam else None)
    nmr = noise_to_mask(s, x, pam.mask_db, pam.norm_offset)
    hard = entropy_bits(bitstream_indices(bs).ravel(), "hard", k=bs.kernels.shape[1])
    rate = features_per_second(clip.sample_rate, args.frame_len - args.overlap, bs.code_len, bs.n_modules)
    result = {
        "kbps": bs.kbps, "payload_bits": bs.payload_bits, "symbols": bs.n_symbols,
        "entropy_bits": hard.entropy_bits, "lower_bound_kbps": rate * hard.entropy_bits / 1000.0,
        "target_kbps": args.target_kbps, "l1": rep.l1, "l2": rep.l2, "l3": rep.l3, "l4": rep.l4,
        "total": rep.total, "max_nmr": float(nmr.max()), "audible_bins": int(np.sum(nmr > 1.0)),
        "reencode_identical": reencode_bitstream(bs).to_bytes() == data,
    }
    _write_json(Path(args.out) if args.out else None, result)
    return 0


def cmd_train(args) -> int:
    clips = [read_wav(p, downmix=args.downmix) for p in args.wav]
    rates = {c.sample_rate for c in clips}
    if len(rates) != 1:
        raise ValueError(f"training clips mix sample rates {sorted(rates)}")
    frames = np.concatenate([_frames(c, args) for c in clips])
    cfg = LossConfig.preset(args.preset, lam=args.lam, mel_bands=args.mel_bands, sample_rate=float(rates.pop()))
    ctrl = RateController(args.target_kbps * 1000.0) if args.target_kbps else None
    out = _out_dir(args)
    stack, log = train_stack(frames, cfg, ctrl, epochs=args.epochs, lr=args.lr, n_modules=args.modules,
                             k=args.k, alpha=args.alpha, momentum=args.momentum, batch_size=args.batch_size,
                             seed=args.seed, init=args.init, hop=args.frame_len - args.overlap)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(args.out) if args.out else out / "model.psyk"
    save_checkpoint(stack, ckpt)
    write_log_csv(log, Path(args.log) if args.log else out / "train_log.csv")
    print(f"trained {stack.n_modules} modules on {frames.shape[0]} frames -> {ckpt}")
    return 0


def parse_degradation(spec: str) -> dict:
    """``snr:20``, ``bits:8`` or both, comma separated."""
    out = {}
    for part in spec.split(","):
        key, _, val = part.strip().partition(":")
        if key == "snr" and val:
            out["snr_db"] = float(val)
        elif key == "bits" and val:
            out["bits"] = int(val)
        else:
            raise UsageError(f"bad degradation {part!r}; use snr:<dB> and/or bits:<n>")
    return out


def cmd_optimize(args) -> int:
    if args.steps < 0:
        raise UsageError("--steps must be nonnegative")
    deg = parse_degradation(args.degrade)
    clip = read_wav(args.wav, downmix=args.downmix)
    cfg = LossConfig.preset(args.preset, lam=args.lam, mel_bands=args.mel_bands,
                            sample_rate=float(clip.sample_rate))
    rng = np.random.default_rng(args.seed)
    noisy = AudioClip(degrade(clip.samples, rng, **deg), clip.sample_rate)
    ref_frames = frame_signal(clip, args.frame_len, args.overlap)
    deg_frames = frame_signal(noisy, args.frame_len, args.overlap)
    trace = np.zeros((args.steps + 1, 4))
    trace[:, 0] = np.arange(args.steps + 1)
    out_frames = []
    for rf, df in zip(ref_frames, deg_frames):
        res = optimize_reconstruction(rf.samples, df.samples, cfg, args.steps, args.lr, args.momentum)
        trace[:, 1] += res.trace[:, 1]
        trace[:, 2] = np.maximum(trace[:, 2], res.trace[:, 2])
        trace[:, 3] += res.trace[:, 3]
        out_frames.append(Frame(res.frame, rf.start_index, rf.valid_length))
    optimized = overlap_add(out_frames, args.overlap, clip.sample_rate)

    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "trace.csv", TRACE_FIELDS,
               [[int(r[0]), int(r[1]), _f(r[2]), _f(r[3])] for r in trace])
    write_wav(noisy, out / "degraded.wav", "float32")
    write_wav(optimized, out / "optimized.wav", "float32")
    summary = {
        "preset": args.preset, "frames": len(ref_frames), "steps": args.steps, "degradation": deg,
        "before": {"audible_bins": int(trace[0, 1]), "max_nmr": float(trace[0, 2])},
        "after": {"audible_bins": int(trace[-1, 1]), "max_nmr": float(trace[-1, 2])},
    }
    _write_json(out / "summary.json", summary)
    if args.svg:
        write_svg(out / "trace.svg", line_chart([("audible bins", trace[:, 0], trace[:, 1])],
                                                 title=f"{args.preset} audibility", xlabel="step",
                                                 ylabel="bins above mask"))
    print(f"audible bins {summary['before']['audible_bins']} -> {summary['after']['audible_bins']} ({out})")
    return 0


def cmd_allocate(args) -> int:
    if args.budget < 0:
        raise UsageError("--budget must be nonnegative")
    clip = read_wav(args.wav, downmix=args.downmix)
    frames = _frames(clip, args)
    alloc_rows, trace_rows = [], []
    for j, fr in enumerate(frames):
        a = analyze_frame(fr, clip.sample_rate)
        smr = band_smr_db(a.psd, a.mask)
        res = greedy_nmr_allocate(smr, None, args.budget)
        for b in range(smr.shape[0]):
            alloc_rows.append([j, b, _f(smr[b]), int(res.bits_per_band[b]), _f(res.final_nmr_db[b])])
        for i, v in enumerate(res.nmr_trace):
            trace_rows.append([j, i, _f(v)])
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "allocation.csv", ["frame", "band", "smr_db", "bits", "final_nmr_db"], alloc_rows)
    _write_csv(out / "allocation_trace.csv", ["frame", "bits_used", "max_nmr_db"], trace_rows)
    print(f"allocated up to {args.budget} bits in each of {len(frames)} frames -> {out}")
    return 0


# --- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out-dir", help=f"output directory (default ${OUT_ENV} or ./psycal_out)")
    common.add_argument("--frame-len", type=int, default=DEFAULT_FRAME_LEN)
    common.add_argument("--overlap", type=int, default=DEFAULT_OVERLAP)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--downmix", action="store_true", help="average multichannel input to mono")

    loss_opts = _Parser(add_help=False)
    loss_opts.add_argument("--preset", default="model-d", choices=sorted(PRESETS))
    loss_opts.add_argument("--lam", type=float, default=0.1)
    loss_opts.add_argument("--mel-bands", type=int, default=DEFAULT_MEL_BANDS)

    p = _Parser(prog="psycal", description="Psychoacoustic masking, perceptual losses and a toy residual codec.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("analyze", parents=[common], help="masking analysis of every frame")
    a.add_argument("wav")
    a.add_argument("--svg", action="store_true")
    a.add_argument("--svg-frame", type=int, default=0)
    a.set_defaults(func=cmd_analyze)

    lo = sub.add_parser("loss", parents=[common, loss_opts], help="loss report between two WAV files")
    lo.add_argument("ref")
    lo.add_argument("test")
    lo.add_argument("--out", help="JSON path (default stdout)")
    lo.set_defaults(func=cmd_loss)

    q = sub.add_parser("quantize", parents=[common], help="scalar soft/hard quantization statistics")
    q.add_argument("wav")
    q.add_argument("-k", "--k", type=int, default=64)
    q.add_argument("--alpha", type=float, default=300.0)
    q.add_argument("--checkpoint", help="quantize the first module's codes instead of raw samples")
    q.add_argument("--out", help="JSON path (default stdout)")
    q.set_defaults(func=cmd_quantize)

    c = sub.add_parser("codec", parents=[common], help="encode, decode or round-trip with a checkpoint")
    c.add_argument("mode", choices=("encode", "decode", "roundtrip"))
    c.add_argument("input", help="WAV file (encode, roundtrip) or bitstream (decode)")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--out")
    c.add_argument("--preset", default="model-d", choices=sorted(PRESETS))
    c.add_argument("--target-kbps", type=float)
    c.set_defaults(func=cmd_codec)

    t = sub.add_parser("train", parents=[common, loss_opts], help="train a residual linear codec")
    t.add_argument("wav", nargs="+")
    t.add_argument("--out", help="checkpoint path")
    t.add_argument("--log", help="training log CSV path")
    t.add_argument("--modules", type=int, default=2)
    t.add_argument("-k", "--k", type=int, default=64)
    t.add_argument("--alpha", type=float, default=300.0)
    t.add_argument("--epochs", type=int, nargs="+", default=[50, 30])
    t.add_argument("--lr", type=float, nargs="+", default=[2e-4, 2e-5])
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--batch-size", type=int, default=128)
    t.add_argument("--init", choices=("pca", "random"), default="pca")
    t.add_argument("--target-kbps", type=float)
    t.set_defaults(func=cmd_train)

    o = sub.add_parser("optimize", parents=[common, loss_opts], help="push reconstruction noise under the mask")
    o.add_argument("wav")
    o.add_argument("--degrade", default="snr:20", help="snr:<dB> and/or bits:<n>, comma separated")
    o.add_argument("--steps", type=int, default=2000)
    o.add_argument("--lr", type=float, default=1e-3)
    o.add_argument("--momentum", type=float, default=0.5)
    o.add_argument("--svg", action="store_true")
    o.set_defaults(func=cmd_optimize)

    al = sub.add_parser("allocate", parents=[common], help="greedy NMR bit allocation per frame")
    al.add_argument("wav")
    al.add_argument("--budget", type=int, default=64)
    al.set_defaults(func=cmd_allocate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (WavError, BitstreamError, CheckpointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
