"""Command-line front end.

Subcommands cover the full pipeline: synthetic data generation, per-clip
optimization fitting, regressor training and inference, evaluation, audio
spectrograms, occlusion, gradient checking, and report rendering. Every
command that takes --seed is bit-reproducible, and every command writes its
artifacts under --out together with a manifest.json recording the artifact
list and a hash of the effective configuration.
"""

import argparse
import csv
import hashlib
import json
import os
import sys

import numpy as np

from . import audio as au
from . import camera as cm
from . import data as dt
from . import fitting as ft
from . import fusion as fu
from . import losses as ls
from . import metrics as mt
from . import model as md
from . import render as rd
from . import report as rp
from . import tape as tp
from . import toy

VARIANT_NAMES = {"image": "image_only", "early": "early_fusion", "model": "model_fusion"}


def _threads():
    try:
        return max(1, int(os.environ.get("QUADFIT_THREADS", "1")))
    except ValueError:
        return 1


def _load_model(name):
    if name == "toy":
        return toy.toy_model()
    return md.load_model(name)


def _parse_kv(text, what):
    out = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ValueError(f"config error: expected key=value in {what}: {part!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out

def _parse_weights(text):
    w = ls.LossWeights()
    if not text:
        return w
    fields = dict(w.__dict__)
    for k, v in _parse_kv(text, "--weights").items():
        if k not in fields:
            raise ValueError(f"config error: unknown weight {k}")
        fields[k] = float(v)
    return ls.LossWeights(**fields)


def _parse_occluder(text):
    kv = _parse_kv(text, "--occlude")
    kwargs = {}
    if "kind" in kv:
        kwargs["kind"] = kv.pop("kind")
    if "anchor" in kv:
        kwargs["anchor"] = kv.pop("anchor")
    if "frac" in kv:
        kwargs["frac"] = float(kv.pop("frac"))
    if "seed" in kv:
        kwargs["seed"] = int(kv.pop("seed"))
    if "inputs_only" in kv:
        kwargs["inputs_only"] = kv.pop("inputs_only").lower() in ("1", "true", "yes")
    if kv:
        raise ValueError(f"config error: unknown occluder field {sorted(kv)[0]}")
    return dt.OccluderSpec(**kwargs)


def _write_manifest(out, command, config, artifacts):
    blob = json.dumps(config, sort_keys=True, default=str)
    manifest = {
        "command": command,
        "config": config,
        "config_hash": hashlib.sha256(blob.encode()).hexdigest(),
        "artifacts": sorted(artifacts),
    }
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True, default=str)


def _walk_artifacts(out):
    arts = []
    for root, _, files in os.walk(out):
        for f in files:
            if f == "manifest.json":
                continue
            arts.append(os.path.relpath(os.path.join(root, f), out))
    return arts


def _dataset_arg(args):
    root = args.dataset_flag if args.dataset_flag else args.dataset
    if not root:
        raise ValueError("config error: no dataset given")
    return root


def _sequence_dirs(root):
    """A dataset root is either one sequence dir or a dir of them."""
    if os.path.isfile(os.path.join(root, "meta.json")):
        return [root]
    if not os.path.isdir(root):
        raise ValueError(f"corrupt dataset: {root}")
    subs = sorted(
        os.path.join(root, d)
        for d in os.listdir(root)
        if os.path.isfile(os.path.join(root, d, "meta.json"))
    )
    if not subs:
        raise ValueError(f"corrupt dataset: {root}")
    return subs


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    model = _load_model(args.model)
    seq = dt.synth_sequence(model, args.gait, args.frames, fps=args.fps,
                            seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    dt.save_sequence(args.out, seq)
    config = {"gait": args.gait, "frames": args.frames, "fps": args.fps,
              "seed": args.seed, "model": args.model}
    _write_manifest(args.out, "synth", config, _walk_artifacts(args.out))
    print(f"wrote {args.frames}-frame {args.gait} sequence to {args.out}")
    return 0


def _fit_one(payload):
    clip, model, weights, iters, sil_res, lr = payload
    init = ft.init_pose(clip, model)
    return ft.fit_sequence(clip, model, init, weights, iters, lr=lr,
                           sil_res=sil_res)


def cmd_fit(args):
    root = _dataset_arg(args)
    model = _load_model(args.model)
    weights = _parse_weights(args.weights)
    clips = dt.load_dataset(root, T=args.window)
    if args.jitter > 0:
        clips = [dt.color_jitter(c, args.jitter, seed=args.seed + i)
                 for i, c in enumerate(clips)]
    out = args.out if args.out else os.path.join(root, "fit")
    os.makedirs(out, exist_ok=True)

    payloads = [(c, model, weights, args.iters, args.sil_res, args.lr)
                for c in clips]
    n_workers = min(_threads(), len(payloads))
    if n_workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_fit_one, payloads))
    else:
        results = [_fit_one(p) for p in payloads]

    for i, (pose, trace) in enumerate(results):
        md.save_pose(os.path.join(out, f"pose_{i:04d}.json"), pose)
        ls.write_trace_csv(os.path.join(out, f"trace_{i:04d}.csv"), trace)
        print(f"clip {i}: loss {trace[0].total:.6g} -> {trace[-1].total:.6g}")
    config = {"dataset": root, "model": args.model, "iters": args.iters,
              "sil_res": args.sil_res, "lr": args.lr, "window": args.window,
              "jitter": args.jitter, "seed": args.seed,
              "weights": vars(_parse_weights(args.weights))}
    _write_manifest(out, "fit", config, _walk_artifacts(out))
    print(f"fit {len(clips)} clips -> {out}")
    return 0


def cmd_train(args):
    root = _dataset_arg(args)
    model = _load_model(args.model)
    weights = _parse_weights(args.weights)
    variant = VARIANT_NAMES[args.variant]
    clips = dt.load_dataset(root, T=args.window)
    if args.jitter > 0:
        clips = [dt.color_jitter(c, args.jitter, seed=args.seed + i)
                 for i, c in enumerate(clips)]
    kw = {"T": args.window, "visual_dim": 3 * clips[0].K}
    aw = clips[0].audio_window
    if aw is not None:
        kw.update(audio_bins=aw.shape[0], audio_frames=aw.shape[1],
                  audio_dim=int(aw.shape[0] * aw.shape[1]))
    cfg = fu.EncoderConfig(**kw)
    net, trace = fu.train(clips, model, variant, weights, epochs=args.epochs,
                          seed=args.seed, lr=args.lr, cfg=cfg)
    os.makedirs(args.out, exist_ok=True)
    fu.save_net(os.path.join(args.out, "net.json"), net)
    ls.write_trace_csv(os.path.join(args.out, "trace.csv"), trace)
    config = {"dataset": root, "model": args.model, "variant": variant,
              "epochs": args.epochs, "seed": args.seed, "lr": args.lr,
              "window": args.window, "jitter": args.jitter,
              "weights": vars(weights)}
    _write_manifest(args.out, "train", config, _walk_artifacts(args.out))
    print(f"{variant}: loss {trace[0].total:.6g} -> {trace[-1].total:.6g} "
          f"({args.epochs} epochs, {len(clips)} clips) -> {args.out}")
    return 0


def cmd_infer(args):
    root = _dataset_arg(args)
    model = _load_model(args.model)
    net = fu.load_net(args.net)
    os.makedirs(args.out, exist_ok=True)
    for d in _sequence_dirs(root):
        name = os.path.basename(os.path.normpath(d))
        clips = dt.load_sequence(d, T=net.cfg.T)
        res = fu.infer_sequence(clips, net, model)
        with open(os.path.join(args.out, f"infer_{name}.csv"), "w",
                  newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["frame", "k", "x", "y", "z"])
            for f, kp in zip(res["frames"], res["keypoints3d"]):
                for k in range(kp.shape[0]):
                    wr.writerow([int(f), k] + [f"{v:.17g}" for v in kp[k]])
        pose = md.PoseState(
            beta=res["beta"],
            theta_global=res["theta_global"],
            theta_joints=res["theta_joints"],
            cam_weak=res["cam_weak"],
        )
        md.save_pose(os.path.join(args.out, f"pose_{name}.json"), pose)
        print(f"{name}: {len(res['frames'])} frames inferred")
    config = {"dataset": root, "net": args.net, "model": args.model}
    _write_manifest(args.out, "infer", config, _walk_artifacts(args.out))
    return 0


def _load_pred_kp3d(path):
    with open(path) as fh:
        rdr = csv.reader(fh)
        header = next(rdr, None)
        if header != ["frame", "k", "x", "y", "z"]:
            raise ValueError(f"corrupt dataset: {path}")
        rows = [[float(x) for x in r] for r in rdr]
    frames = sorted({int(r[0]) for r in rows})
    K = int(max(r[1] for r in rows)) + 1
    kp = {f: np.zeros((K, 3)) for f in frames}
    for r in rows:
        kp[int(r[0])][int(r[1])] = r[2:5]
    return kp


def cmd_eval(args):
    root = _dataset_arg(args)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    mpjpe_vals, pck_vals, iou_vals = [], [], []
    for d in _sequence_dirs(root):
        name = os.path.basename(os.path.normpath(d))
        n = json.load(open(os.path.join(d, "meta.json")))["n_frames"]
        clip = dt.load_sequence(d, T=int(n))[0]
        if args.pred:
            pred = _load_pred_kp3d(os.path.join(args.pred, f"infer_{name}.csv"))
            frames = [f for f in pred if f < clip.T]
            if not frames:
                raise ValueError("no supervision")
            pk = np.stack([pred[f] for f in frames])
            gk = clip.gt_keypoints3d[frames]
            errs, mean, _ = mt.p_mpjpe(pk, gk)
            for f, e in zip(frames, errs):
                rows.append((name, f, "p_mpjpe", float(e)))
            mpjpe_vals.append(mean)
        else:
            # gt against itself: a pipeline smoke check with known answers
            _, mean, _ = mt.p_mpjpe(clip.gt_keypoints3d, clip.gt_keypoints3d)
            mpjpe_vals.append(mean)
            diag = np.array([bb.b * np.sqrt(2.0) for bb in clip.bboxes])
            pck_vals.append(mt.pck(clip.keypoints2d, clip.keypoints2d,
                                   clip.conf, alpha=args.alpha, norm=diag,
                                   conf_thresh=args.conf_thresh))
            ious = [mt.iou_masks(m, m) for m in clip.masks if m is not None]
            if ious:
                iou_vals.append(float(np.mean(ious)))
            rows.append((name, "", "p_mpjpe", mean))
            if pck_vals:
                rows.append((name, "", "pck", pck_vals[-1]))
            if ious:
                rows.append((name, "", "iou", iou_vals[-1]))

    summary = {"p_mpjpe": rp.fmt_mean_std(mpjpe_vals)}
    line = f"P-MPJPE {np.mean(mpjpe_vals):.4f}"
    if pck_vals:
        summary["pck"] = rp.fmt_mean_std(pck_vals)
        line += f", PCK {np.mean(pck_vals):.4f}"
    if iou_vals:
        summary["iou"] = rp.fmt_mean_std(iou_vals)
        line += f", IoU {np.mean(iou_vals):.4f}"
    mt.write_metrics_csv(os.path.join(args.out, "metrics.csv"), rows,
                         summary=summary)
    config = {"dataset": root, "pred": args.pred, "alpha": args.alpha,
              "conf_thresh": args.conf_thresh}
    _write_manifest(args.out, "eval", config, _walk_artifacts(args.out))
    print(line)
    return 0


def cmd_spectrogram(args):
    path = args.input
    if os.path.isdir(path):
        path = os.path.join(path, "audio.wav")
    track = au.load_wav(path)
    spec = au.log_mel(track, n_fft=args.n_fft, hop=args.hop, n_mels=args.n_mels)
    os.makedirs(args.out, exist_ok=True)
    au.save_spectrogram(os.path.join(args.out, "spectrogram.csv"), spec)
    config = {"input": args.input, "n_fft": args.n_fft, "hop": args.hop,
              "n_mels": args.n_mels}
    _write_manifest(args.out, "spectrogram", config, _walk_artifacts(args.out))
    print(f"{spec.values.shape[0]} mel bands x {spec.values.shape[1]} frames "
          f"-> {args.out}")
    return 0


def cmd_occlude(args):
    root = _dataset_arg(args)
    spec = _parse_occluder(args.occlude)
    os.makedirs(args.out, exist_ok=True)
    for d in _sequence_dirs(root):
        name = os.path.basename(os.path.normpath(d))
        dst = args.out if len(_sequence_dirs(root)) == 1 else os.path.join(
            args.out, name)
        dt.occlude_sequence_dir(d, dst, spec)
        print(f"occluded {name} -> {dst}")
    config = {"dataset": root, "occlude": args.occlude}
    _write_manifest(args.out, "occlude", config, _walk_artifacts(args.out))
    return 0


def _gradcheck_battery(seed):
    """Small end-to-end gradient checks; returns (name, report) pairs."""
    model = toy.toy_model()
    rng = np.random.default_rng(seed)
    T, S, J, K = 3, model.n_shape, model.n_joints, model.n_keypoints
    n_pose = S + 3 * T + 3 * (J - 1) * T
    target2d = rng.normal(0.0, 20.0, (T, K, 2)) + 112.0
    conf = np.ones((T, K))
    f = 5000.0

    def pose_chain(x):
        beta = x[:S]
        tg = tp.reshape(x[S : S + 3 * T], (T, 3))
        tj = tp.reshape(x[S + 3 * T :], (T, J - 1, 3))
        posed = md.pose_sequence(model, beta, tg, tj)
        kp3 = md.regress_keypoints3d(posed, model)
        kp3 = kp3 + np.array([0.0, 0.0, 18.0])
        pred = f * kp3[..., :2] / kp3[..., 2:3] + 112.0
        l_kp = ls.keypoint_loss(pred, target2d, conf, 0.001)
        l_sm = ls.smoothness_loss(tp.reshape(kp3, (T, -1)), 1.0)
        l_pr = sum(
            ls.prior_loss(beta, tj[t], model, 1.0, 0.01) for t in range(T)
        ) * (1.0 / T)
        return l_kp + l_sm + l_pr

    x0 = rng.normal(0.0, 0.1, n_pose)
    checks = [("pose chain", tp.check_gradient(pose_chain, x0, tol=1e-4,
                                               probes=10, seed=seed))]

    verts = rng.normal(0.0, 0.4, (12, 3))
    faces = rng.integers(0, 12, (16, 3))
    target = rng.uniform(0.0, 1.0, (16, 16))
    gamma = np.array([[0.0, 0.0, 30.0]])
    cam = cm.CameraPair(f_full=800.0, gamma_crop=gamma, gamma_full=gamma)

    def raster_chain(x):
        m = rd.rasterize_soft(tp.reshape(x, (12, 3)), faces, cam, 0, res=16)
        d = m.values - target
        return tp.mean(d * d)

    checks.append(("soft rasterizer", tp.check_gradient(
        raster_chain, verts.ravel(), tol=1e-3, probes=8, seed=seed)))

    cfg = fu.EncoderConfig(d=8, hidden=(12, 10), T=T, visual_dim=3 * K,
                           audio_dim=24, audio_bins=4, audio_frames=6)
    net = fu.init_net(model, "image_only", seed=seed, cfg=cfg)
    names = [k for k in sorted(net.weights) if k.startswith("enc")]
    sizes = {k: net.weights[k].size for k in names}
    xin = rng.normal(0.0, 1.0, (T, cfg.visual_dim))

    def enc_chain(x):
        w = {}
        off = 0
        for k in names:
            w[k] = tp.reshape(x[off : off + sizes[k]], net.weights[k].shape)
            off += sizes[k]
        h = fu._encoder3(xin, w, "enc")
        return tp.mean(h * h)

    x0 = np.concatenate([net.weights[k].ravel() for k in names])
    checks.append(("encoder", tp.check_gradient(enc_chain, x0, tol=1e-4,
                                                probes=8, seed=seed)))
    return checks


def cmd_gradcheck(args):
    checks = _gradcheck_battery(args.seed)
    worst = 0.0
    ok = True
    for name, rep in checks:
        print(f"{name}: max rel err {rep.max_rel_err:.3e} "
              f"({'ok' if rep.passed else 'FAIL'})")
        worst = max(worst, rep.max_rel_err)
        ok = ok and rep.passed
    print(f"max rel err {worst:.3e}")
    return 0 if ok else 1


def cmd_report(args):
    traces = {}
    metric_vals = {}
    for run in args.runs:
        name = os.path.basename(os.path.normpath(run))
        tr = os.path.join(run, "trace.csv")
        if os.path.isfile(tr):
            traces[name] = ls.read_trace_csv(tr)
        me = os.path.join(run, "metrics.csv")
        if os.path.isfile(me):
            with open(me) as fh:
                rdr = csv.reader(fh)
                next(rdr, None)
                for row in rdr:
                    if len(row) == 4 and row[0] != "summary":
                        metric_vals.setdefault(row[2], []).append(float(row[3]))
    if not traces and not metric_vals:
        raise ValueError("no data")

    os.makedirs(args.out, exist_ok=True)
    arts = []
    if metric_vals:
        table = rp.metrics_table(sorted(metric_vals.items()))
        rp.write_summary_csv(os.path.join(args.out, "summary.csv"),
                             ["metric", "mean_std"], table)
        labels = sorted(metric_vals)
        means = [float(np.mean(metric_vals[k])) for k in labels]
        stds = [float(np.std(metric_vals[k])) for k in labels]
        rp.svg_bar_plot(os.path.join(args.out, "metrics.svg"), labels, means,
                        errors=stds, title="metric summary", ylabel="value")
        arts += ["summary.csv", "metrics.svg"]
    if traces:
        rp.trace_curves_svg(os.path.join(args.out, "loss_curves.svg"), traces)
        arts.append("loss_curves.svg")
    config = {"runs": list(args.runs)}
    _write_manifest(args.out, "report", config, arts)
    print(f"report: {', '.join(sorted(arts))} -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    ap = argparse.ArgumentParser(
        prog="quadfit",
        description="Audio-visual quadruped motion capture pipeline.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    def add_common(p, dataset=True):
        if dataset:
            p.add_argument("dataset", nargs="?", help="dataset directory")
            p.add_argument("--dataset", dest="dataset_flag", default=None,
                           help="dataset directory (alternative to positional)")
        p.add_argument("--model", default="toy",
                       help="'toy' or a model JSON path")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic gait sequence")
    add_common(p, dataset=False)
    p.add_argument("--gait", default="walk", choices=toy.GAITS)
    p.add_argument("--frames", type=int, default=7)
    p.add_argument("--fps", type=float, default=25.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit poses to clips by direct optimization")
    add_common(p)
    p.add_argument("--iters", type=int, default=150)
    p.add_argument("--lr", type=float, default=ft.FIT_LR)
    p.add_argument("--sil-res", type=int, default=32)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--weights", default=None, help="loss overrides k=v,...")
    p.add_argument("--jitter", type=float, default=0.0)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("train", help="train a fusion regressor")
    add_common(p)
    p.add_argument("--variant", default="image",
                   choices=sorted(VARIANT_NAMES))
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=fu.TRAIN_LR)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--weights", default=None, help="loss overrides k=v,...")
    p.add_argument("--jitter", type=float, default=0.0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run a trained regressor over sequences")
    add_common(p)
    p.add_argument("--net", required=True, help="trained net JSON path")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions (or gt-vs-gt) on a dataset")
    add_common(p)
    p.add_argument("--pred", default=None,
                   help="directory of infer outputs; omitted: gt against gt")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--conf-thresh", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("spectrogram", help="log-mel spectrogram of a wav/sequence")
    p.add_argument("input", help="wav file or sequence directory")
    p.add_argument("--n-fft", type=int, default=1024)
    p.add_argument("--hop", type=int, default=441)
    p.add_argument("--n-mels", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_spectrogram)

    p = sub.add_parser("occlude", help="write an occluded copy of a dataset")
    add_common(p)
    p.add_argument("--occlude", required=True,
                   help="occluder spec kind=...,anchor=...,frac=...,seed=...")
    p.set_defaults(func=cmd_occlude)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="summarize runs into CSV tables and SVG plots")
    p.add_argument("runs", nargs="+", help="run directories (train/eval outputs)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return ap


def main(argv=None):
    if argv is None:
        argv = sys.argv[1:]
    t = str(_threads())
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, t)
    args = build_parser().parse_args(argv)
    if getattr(args, "out", None) is None and args.command not in ("fit", "gradcheck"):
        print("error: --out is required", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
