"""Command-line entry point: ``cirpose <subcommand> ...``.

Exit status is 0 on success, 1 when an input fails validation (or a check
such as ``gradcheck`` fails) and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import logging
import re
import sys
import time

import numpy as np

from . import io as cio
from .core import GridGeometry, PoseError
from .decoder import DEFAULT_NMS_THRESHOLD, DEFAULT_SCORE_THRESHOLD, DEFAULT_TOP_K, decode
from .evaluator import UnknownImageId, summarize
from .oks import pairwise_oks
from .synth import TOY_KEYPOINT_NAMES, synth_scene, toy_falloff
from .targets import (
    DEFAULT_GAMMA,
    assign_regions,
    build_offset_target,
    build_weight_map,
    discrete_label,
    gaussian_label,
    ideal_prediction,
)
from .trainer import (
    INSTANCE_LABELS,
    NonFiniteLoss,
    TrainConfig,
    eval_scenes,
    evaluate_model,
    finite_diff_check,
    predict,
    train,
    with_overrides,
)

GRADCHECK_TOLERANCE = 1e-3
log = logging.getLogger("cirpose")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _grid(text):
    m = re.match(r"^(\d+)[x,](\d+)$", text)
    if not m:
        raise argparse.ArgumentTypeError("expected HxW, e.g. 64x64")
    return int(m.group(1)), int(m.group(2))


def _image_key(image_id) -> str:
    return f"img/{image_id}/"


def _parse_image_key(name):
    m = re.match(r"^img/(.+)/([a-z_]+)$", name)
    return (m.group(1), m.group(2)) if m else (None, None)


def _restore_id(text, known=None):
    if known is not None:
        for k in known:
            if str(k) == text:
                return k
    return int(text) if re.fullmatch(r"-?\d+", text) else text


# ------------------------------------------------------------------ encode


def cmd_encode(args):
    if args.annotations:
        dataset = cio.load_annotations(args.annotations, args.stride)
    else:
        geom = GridGeometry(args.grid[0], args.grid[1], args.stride)
        scenes = [synth_scene(args.seed + j, geom) for j in range(args.synthetic)]
        dataset = cio.dataset_from_scenes(scenes, toy_falloff(), TOY_KEYPOINT_NAMES)
    tensors = {"meta/falloff": dataset.falloff.k, "meta/stride": np.array([float(dataset.stride)])}
    dtypes = {"meta/falloff": "f64", "meta/stride": "f64"}
    for info in dataset.images:
        geom = info.geometry(dataset.stride)
        anns = dataset.annotations[info.id]
        assignment = assign_regions(anns, geom, args.gamma)
        off = build_offset_target(anns, assignment, geom)
        if args.instance_label == "gaussian":
            score = gaussian_label(anns, assignment)
        else:
            # without a network the CIR target assumes exact predictions: 1 on every region
            score = discrete_label(assignment)
        key = _image_key(info.id)
        tensors[key + "region"] = assignment.index
        tensors[key + "weight"] = build_weight_map(assignment)
        tensors[key + "score_target"] = score
        tensors[key + "offsets"] = off.offsets
        tensors[key + "offset_mask"] = off.mask
        if args.ideal:
            pred_score, pred_off = ideal_prediction(anns, geom, args.gamma)
            tensors[key + "pred_score"] = pred_score
            tensors[key + "pred_offsets"] = pred_off
    cio.write_tensors(args.out, tensors, dtypes)
    if args.write_annotations:
        cio.write_annotations(dataset, args.write_annotations)
    print(f"encoded {len(dataset.images)} images, {dataset.num_instances()} instances -> {args.out}")
    return 0


# ------------------------------------------------------------------ decode


def _predictions(tensors):
    preds = {}
    for name, arr in tensors.items():
        img, what = _parse_image_key(name)
        if what in ("pred_score", "pred_offsets"):
            preds.setdefault(img, {})[what] = arr.astype(np.float64)
    for img, d in preds.items():
        if len(d) != 2:
            raise cio.ParseError(f"image {img!r}: needs both pred_score and pred_offsets")
    return preds


def cmd_decode(args):
    tensors = cio.read_tensors(args.predictions)
    preds = _predictions(tensors)
    if not preds:
        raise cio.ParseError(f"{args.predictions}: no pred_score/pred_offsets tensors")
    dataset = cio.load_annotations(args.gt, args.stride) if args.gt else None
    if dataset is not None:
        kc = dataset.falloff
    elif "meta/falloff" in tensors:
        kc = cio.FalloffConstants(tensors["meta/falloff"].astype(np.float64))
    else:
        raise cio.MissingField("meta/falloff")
    stride = int(tensors["meta/stride"][0]) if "meta/stride" in tensors else args.stride
    known = [i.id for i in dataset.images] if dataset else None
    results, rows = {}, []
    for img, d in preds.items():
        image_id = _restore_id(img, known)
        cands = decode(d["pred_score"], d["pred_offsets"], kc, args.score_threshold, args.top_k, args.nms_threshold)
        results[image_id] = cands
        if args.emit_scatter:
            gts = dataset.annotations.get(image_id, []) if dataset else []
            if dataset is not None and image_id not in dataset.annotations:
                raise UnknownImageId(f"image {image_id!r} not in ground truth")
            sims = pairwise_oks([c.pose for c in cands], gts, kc)
            for c, row in zip(cands, sims):
                best = float(np.nanmax(row)) if row.size and not np.all(np.isnan(row)) else 0.0
                rows.append(cio.ScatterRow(image_id, c.source_cell[0], c.source_cell[1], c.score, best))
    cio.write_results(results, args.out, stride)
    if args.emit_scatter:
        cio.write_scatter(args.emit_scatter, rows)
    total = sum(len(v) for v in results.values())
    print(f"decoded {total} poses from {len(results)} images -> {args.out}")
    return 0


# -------------------------------------------------------------------- eval


def cmd_eval(args):
    dataset = cio.load_annotations(args.gt, args.stride)
    dets = cio.read_results(args.results, args.stride, dataset.num_keypoints)
    result = summarize(dets, dataset.annotations, dataset.falloff, stride=args.stride)
    print(cio.report_text(result))
    if args.out:
        cio.write_report(args.out, result)
    return 0


# --------------------------------------------------------------- gradcheck


def _config(args):
    config = cio.load_train_config(args.config) if args.config else TrainConfig()
    return with_overrides(config, steps=getattr(args, "steps", None), seed=getattr(args, "seed", None))


def cmd_gradcheck(args):
    from .model import TinyModel

    config = _config(args)
    model = TinyModel.create(config.model_shape(), config.seed)
    scene = synth_scene(config.seed, config.geom)
    worst, details, skipped = finite_diff_check(model, scene, args.eps, config, args.num_params,
                                                config.seed, return_details=True)
    print(f"max_rel_error {worst:.6e}")
    print(f"compared {len(details)} skipped {skipped}")
    if worst > GRADCHECK_TOLERANCE:
        print(f"FAIL: above tolerance {GRADCHECK_TOLERANCE:g}", file=sys.stderr)
        return 1
    return 0


# --------------------------------------------------------------- train-toy


def cmd_train_toy(args):
    config = _config(args)

    def progress(step, loss, _diags, _model):
        if step == 0 or (step + 1) % args.log_every == 0:
            print(f"step {step + 1} loss {loss.value:.6f}", flush=True)

    result = train(config, callback=progress)
    print(f"first_loss {result.losses[0]:.6f}" if result.losses else "first_loss nan")
    print(f"final_loss {result.losses[-1]:.6f}" if result.losses else "final_loss nan")
    if args.checkpoint:
        cio.save_checkpoint(args.checkpoint, result.model)
    if args.eval_scenes > 0:
        scenes = eval_scenes(args.eval_scenes, config.geom)
        ev = evaluate_model(result.model, scenes)
        print(cio.report_text(ev))
        if args.predictions:
            kc = toy_falloff()
            tensors = {"meta/falloff": kc.k, "meta/stride": np.array([float(config.stride)])}
            dtypes = {"meta/falloff": "f64", "meta/stride": "f64"}
            for j, scene in enumerate(scenes):
                score, offsets = predict(result.model, scene)
                tensors[_image_key(j) + "pred_score"] = score
                tensors[_image_key(j) + "pred_offsets"] = offsets
            cio.write_tensors(args.predictions, tensors, dtypes)
        if args.gt_out:
            cio.write_annotations(cio.dataset_from_scenes(scenes, toy_falloff(), TOY_KEYPOINT_NAMES), args.gt_out)
    return 0


# ------------------------------------------------------------------- bench


def _rate(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        n = fn()
        best = min(best, (time.perf_counter() - t) / max(n, 1))
    return 1.0 / best


def cmd_bench(args):
    geom = GridGeometry(args.grid[0], args.grid[1], args.stride)
    scenes = [synth_scene(args.seed + j, geom) for j in range(args.scenes)]
    kc = toy_falloff()
    ideal = [ideal_prediction(s.annotations, geom) for s in scenes]

    def encode_all():
        for s in scenes:
            a = assign_regions(s.annotations, geom)
            build_weight_map(a)
            build_offset_target(s.annotations, a, geom)
        return len(scenes)

    def decode_all():
        for score, off in ideal:
            decode(score, off, kc)
        return len(scenes)

    dets = {j: [c.pose for c in decode(sc, off, kc)] for j, (sc, off) in enumerate(ideal)}
    gts = {j: list(s.annotations) for j, s in enumerate(scenes)}

    def eval_all():
        summarize(dets, gts, kc, stride=geom.stride)
        return len(scenes)

    for name, fn in (("encode", encode_all), ("decode", decode_all), ("evaluate", eval_all)):
        print(f"{name} {_rate(fn, args.repeat):.1f} images/sec")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cirpose", description="Consistent-instance-representation pose toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    e = sub.add_parser("encode", help="dump training targets as a tensor container")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--annotations", help="COCO-style keypoint annotation JSON")
    src.add_argument("--synthetic", type=int, metavar="N", help="encode N synthetic toy scenes instead")
    e.add_argument("--out", required=True)
    e.add_argument("--stride", type=int, default=4)
    e.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    e.add_argument("--instance-label", choices=INSTANCE_LABELS, default="cir")
    e.add_argument("--ideal", action="store_true", help="also dump the score/offsets of a perfect network")
    e.add_argument("--seed", type=int, default=0, help="first synthetic scene seed")
    e.add_argument("--grid", type=_grid, default=(64, 64))
    e.add_argument("--write-annotations", metavar="PATH", help="write the encoded dataset as annotation JSON")
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="turn a score/offset dump into a results file")
    d.add_argument("predictions", help="tensor container with img/<id>/pred_score and pred_offsets")
    d.add_argument("--out", required=True)
    d.add_argument("--gt", help="annotation JSON; supplies falloff constants and enables --emit-scatter")
    d.add_argument("--stride", type=int, default=4)
    d.add_argument("--score-threshold", type=float, default=DEFAULT_SCORE_THRESHOLD)
    d.add_argument("--top-k", type=int, default=DEFAULT_TOP_K)
    d.add_argument("--nms-threshold", type=float, default=DEFAULT_NMS_THRESHOLD)
    d.add_argument("--emit-scatter", metavar="CSV", help="write (score, OKS) per kept candidate; needs --gt")
    d.set_defaults(func=cmd_decode)

    v = sub.add_parser("eval", help="score a results file against ground truth")
    v.add_argument("--gt", required=True)
    v.add_argument("--results", required=True)
    v.add_argument("--out", help="report file")
    v.add_argument("--stride", type=int, default=4)
    v.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="compare model gradients with finite differences")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--eps", type=float, default=1e-4)
    g.add_argument("--num-params", type=int, default=128)
    g.set_defaults(func=cmd_gradcheck)

    t = sub.add_parser("train-toy", help="train the tiny model on synthetic scenes")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint", metavar="PATH")
    t.add_argument("--eval-scenes", type=int, default=20)
    t.add_argument("--predictions", metavar="PATH", help="dump held-out predictions for decode")
    t.add_argument("--gt-out", metavar="PATH", help="write held-out annotations as JSON")
    t.add_argument("--log-every", type=int, default=250)
    t.set_defaults(func=cmd_train_toy)

    b = sub.add_parser("bench", help="time codec, decoder and evaluator throughput")
    b.add_argument("--scenes", type=int, default=50)
    b.add_argument("--repeat", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--grid", type=_grid, default=(64, 64))
    b.add_argument("--stride", type=int, default=4)
    b.set_defaults(func=cmd_bench)
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "decode" and args.emit_scatter and not args.gt:
        print("cirpose decode: error: --emit-scatter needs --gt", file=sys.stderr)
        return 2
    if getattr(args, "log_every", 1) < 1:
        print("cirpose train-toy: error: --log-every must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (cio.IoFormatError, cio.IoError, PoseError, UnknownImageId, NonFiniteLoss, ValueError) as exc:
        print(f"cirpose {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
