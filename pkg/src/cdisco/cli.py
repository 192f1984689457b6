"""Command-line front end for the concept discovery pipeline.

One subcommand per pipeline stage; every output lands under --out.
Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import disentangle, evaluate, experiments, explore, interpret, mininn
from .discovery import discover, orient_toward_class, rank_and_select
from .errors import (CdiscoError, FormatError, NumericalError, ShapeError,
                     UsageError, ValidationError)
from .store import load_dump, save_dump
from .tensor import (DenseTensor, LabeledBatch, read_tensor, write_pgm,
                     write_tensor)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict) -> None:
    path.write_bytes(experiments.report_bytes(payload))


def _load_batch(dir_path) -> tuple[LabeledBatch, DenseTensor | None]:
    root = Path(dir_path)
    manifest = json.loads((root / "dataset.json").read_text())
    features = read_tensor(root / manifest["files"]["features"])
    labels = json.loads((root / manifest["files"]["labels"]).read_text())
    masks = None
    if "masks" in manifest["files"]:
        masks = read_tensor(root / manifest["files"]["masks"])
    batch = LabeledBatch(features=features, labels=tuple(labels),
                         class_count=int(manifest["class_count"]))
    return batch, masks


def _save_batch(batch: LabeledBatch, masks, root: Path) -> None:
    root.mkdir(parents=True, exist_ok=True)
    files = {"features": "features.cdad", "labels": "labels.json"}
    write_tensor(batch.features, root / files["features"])
    (root / files["labels"]).write_text(json.dumps(list(batch.labels)))
    if masks is not None:
        files["masks"] = "masks.cdad"
        write_tensor(masks, root / files["masks"])
    manifest = {"class_count": batch.class_count, "n": batch.n, "files": files}
    (root / "dataset.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _refine_config(args, batch=None) -> disentangle.RefineConfig:
    cfg = disentangle.RefineConfig(
        top_count=args.top_count,
        threshold_frac=args.threshold_frac,
        min_cluster_size=args.min_cluster_size,
        seed=args.seed,
    )
    if batch is not None and getattr(args, "batch_cut", True):
        cfg = replace(cfg, cut_height=disentangle.reference_cut_height(
            batch, cfg))
    return cfg


def _cmd_synth(args) -> int:
    out = _out_dir(args)
    superposition = None
    if args.superpose:
        first, second = args.superpose.split(",")
        superposition = {0: (first, second)}
    spec = mininn.SyntheticSpec(
        classes=tuple(args.classes.split(",")),
        noise_std=args.noise_std,
        decoy_amplitude=args.decoy_amplitude,
        superposition=superposition,
    )
    batch, masks, kinds = mininn.gen_images(spec, args.n_per_class, args.seed)
    _save_batch(batch, masks, out)
    (out / "kinds.json").write_text(json.dumps(list(kinds)))
    print(f"wrote {batch.n} samples to {out}")
    return 0


def _cmd_train(args) -> int:
    out = _out_dir(args)
    batch, _ = _load_batch(args.data)
    shape = batch.features.shape
    if batch.features.rank == 4:
        model = mininn.ConvModel(shape[1:], tuple(
            int(c) for c in args.channels.split(",")), batch.class_count,
            seed=args.seed, layer_name=args.layer)
    else:
        hidden = tuple(int(c) for c in args.channels.split(","))
        model = mininn.MlpModel((shape[1], *hidden, batch.class_count),
                                seed=args.seed)
    history = mininn.train(model, batch, args.epochs, args.lr, seed=args.seed)
    mininn.save_model(model, out)
    _write_json(out / "training.json",
                {"accuracy_history": history, "final_accuracy": history[-1]})
    print(f"final train accuracy {history[-1]:.4f}; checkpoint at {out}")
    return 0


def _cmd_dump(args) -> int:
    out = _out_dir(args)
    batch, _ = _load_batch(args.data)
    model = mininn.load_model(args.model)
    tracked = [int(c) for c in args.classes.split(",")] if args.classes else \
        list(range(batch.class_count))
    dump = mininn.make_dump(model, batch, tracked,
                            include_spatial=not args.no_spatial)
    save_dump(dump, out)
    print(f"dump with {dump.n} samples, d={dump.latent_dim} at {out}")
    return 0


def _cmd_discover(args) -> int:
    out = _out_dir(args)
    dump = load_dump(args.dump)
    basis, batch = discover(dump)
    classes = [args.cls] if args.cls is not None else \
        list(dump.tracked_classes)
    payload = {"layer_name": basis.layer_name,
               "singular_values": list(basis.sigma), "classes": {}}
    for cls in classes:
        vectors = rank_and_select(basis, cls, args.m)
        entries = []
        for vec in vectors:
            oriented = orient_toward_class(vec, batch, cls)
            index = int(vec.source.split(":")[1])
            name = f"concept_c{cls}_r{vec.rank}.cdad"
            write_tensor(oriented.direction, out / name)
            entries.append({
                "source": vec.source,
                "rank": vec.rank,
                "z_score": float(basis.z_scores.array[
                    basis.class_index(cls), index]),
                "file": name,
            })
        payload["classes"][str(cls)] = entries
    _write_json(out / "report.json", payload)
    print(f"report for classes {classes} at {out / 'report.json'}")
    return 0


def _cmd_refine(args) -> int:
    out = _out_dir(args)
    dump = load_dump(args.dump)
    basis, batch = discover(dump)
    cfg = _refine_config(args, batch)
    top = rank_and_select(basis, args.cls, 1)[0]
    oriented = orient_toward_class(top, batch, args.cls)
    vectors = disentangle.refine_direction(
        batch, oriented.direction, cfg,
        source_index=int(top.source.split(":")[1]), class_id=args.cls)
    entries = []
    for vec in vectors:
        name = f"refined_c{args.cls}_{vec.rank}.cdad"
        write_tensor(vec.direction, out / name)
        entries.append({"source": vec.source, "rank": vec.rank,
                        "members": len(vec.member_samples), "file": name})
    _write_json(out / "refined.json", {"class": args.cls, "concepts": entries})
    print(f"{len(vectors)} concept vector(s) at {out}")
    return 0


def _cmd_maps(args) -> int:
    out = _out_dir(args)
    dump = load_dump(args.dump)
    if dump.spatial is None:
        raise ValidationError("dump has no spatial activations")
    direction = read_tensor(args.concept)
    try:
        row = dump.sample_ids.index(args.sample)
    except ValueError:
        raise ValidationError(f"sample {args.sample!r} not in dump") from None
    spatial = DenseTensor.from_array(dump.spatial.array[row])
    cmap = interpret.concept_map(spatial, direction, sample_id=args.sample)
    path = out / f"map_{args.sample}.pgm"
    write_pgm(cmap.values, path, symmetric=True)
    _write_json(out / f"map_{args.sample}.json", {
        "sample": args.sample,
        "threshold": interpret.mask_threshold(cmap),
        "min": float(cmap.values.array.min()),
        "max": float(cmap.values.array.max()),
    })
    print(f"concept map at {path}")
    return 0


def _cmd_masks(args) -> int:
    out = _out_dir(args)
    dump = load_dump(args.dump)
    batch, _ = _load_batch(args.data)
    if dump.spatial is None:
        raise ValidationError("dump has no spatial activations")
    direction = read_tensor(args.concept)
    try:
        row = dump.sample_ids.index(args.sample)
    except ValueError:
        raise ValidationError(f"sample {args.sample!r} not in dump") from None
    spatial = DenseTensor.from_array(dump.spatial.array[row])
    cmap = interpret.concept_map(spatial, direction, sample_id=args.sample)
    image = DenseTensor.from_array(batch.features.array[row])
    masked = interpret.segmentation_mask(cmap, image)
    path = out / f"mask_{args.sample}.pgm"
    write_pgm(DenseTensor.from_array(masked.array[:, :, 0]), path)
    print(f"segmentation mask at {path}")
    return 0


def _cmd_ablate_occlude(args) -> int:
    out = _out_dir(args)
    dump = load_dump(args.dump)
    batch, _ = _load_batch(args.data)
    model = mininn.load_model(args.model)
    basis, rotated = discover(dump)
    cfg = _refine_config(args, rotated)
    concepts = experiments.top_refined_concepts(basis, rotated, args.cls,
                                                m=args.m, config=cfg)
    report = evaluate.sdc(model, batch.features, batch.labels, concepts,
                          class_id=args.cls, fill=args.fill)
    _write_json(out / f"sdc_c{args.cls}.json", {
        "class": args.cls,
        "concepts": list(report.concepts_removed),
        "degraded_fraction": list(report.degraded_fraction),
        "sdc": report.sdc,
    })
    print(f"SDC for class {args.cls}: {report.sdc}")
    return 0


def _cmd_ablate_weights(args) -> int:
    out = _out_dir(args)
    dump = load_dump(args.dump)
    model = mininn.load_model(args.model)
    basis, rotated = discover(dump)
    cfg = _refine_config(args, rotated)
    concepts = experiments.top_refined_concepts(basis, rotated, args.cls,
                                                m=args.m, config=cfg)
    report = evaluate.ablation_with_control(
        dump.pooled, dump.labels,
        DenseTensor.from_array(model.head_weights), model.head_bias,
        concepts, class_id=args.cls, keep_frac=args.keep_frac, seed=args.seed)
    _write_json(out / f"ablation_c{args.cls}.json", {
        "class": args.cls,
        "accuracy_before": report.accuracy_before,
        "accuracy_after": list(report.accuracy_after),
        "control_accuracy": [list(c) for c in report.control_accuracy],
        "class_accuracy_before": report.per_class_accuracy_before,
        "class_accuracy_after": list(report.per_class_accuracy_after),
    })
    print(f"ablation report at {out}")
    return 0


def _cmd_census(args) -> int:
    out = _out_dir(args)
    dump = load_dump(args.dump)
    basis, batch = discover(dump)
    cfg = _refine_config(args, batch)
    u = basis.u.array
    singular = disentangle.polysemanticity_census(
        batch, [u[:, j] for j in range(basis.rank)], cfg)
    eye = np.eye(dump.latent_dim)
    neurons = disentangle.polysemanticity_census(
        batch, [eye[:, j] for j in range(dump.latent_dim)], cfg)
    _write_json(out / "census.json", {
        "singular": {str(k): v for k, v in singular.items()},
        "neurons": {str(k): v for k, v in neurons.items()},
    })
    print(f"census at {out / 'census.json'}")
    return 0


def _cmd_outliers(args) -> int:
    out = _out_dir(args)
    dump = load_dump(args.dump)
    basis, batch = discover(dump)
    if args.directions:
        directions = [int(j) for j in args.directions.split(",")]
    else:
        directions = []
        for k in range(len(dump.tracked_classes)):
            for j in basis.ranking[k][:2]:
                if j not in directions:
                    directions.append(j)
    report = explore.flag_outliers(batch, directions,
                                   target_frac=args.target_frac)
    coords = explore.project_2d(batch, directions[0],
                                directions[1] if len(directions) > 1 else
                                (directions[0] + 1) % batch.rank)
    explore.write_projection_csv(batch, coords, out / "projection.csv",
                                 flagged_ids=report.flagged_ids)
    _write_json(out / "outliers.json", {
        "directions": [int(j) for j in directions],
        "flagged": [
            {"sample_id": f.sample_id, "violations": f.violations,
             "distance": f.distance} for f in report.flagged],
        "fraction_flagged": report.fraction_flagged,
        "bounds": {str(j): list(b)
                   for j, b in report.per_direction_bounds.items()},
    })
    print(f"flagged {len(report.flagged)} sample(s); outputs at {out}")
    return 0


def _cmd_faithfulness(args) -> int:
    out = _out_dir(args)
    dump = load_dump(args.dump)
    batch, _ = _load_batch(args.data)
    model = mininn.load_model(args.model)
    if not isinstance(model, mininn.MlpModel):
        raise ValidationError("faithfulness evaluation needs a dense model")
    basis, rotated = discover(dump)
    top = rank_and_select(basis, args.cls, 1)[0]
    x = batch.features.array.astype(np.float64)
    scores = interpret.tabular_importance(top.direction,
                                          model.input_jacobian(x))
    explanations = np.tile(scores.array, (x.shape[0], 1))
    pgi, pgu = evaluate.pgi_pgu(model.predict_proba, x, explanations,
                                top_frac=args.top_frac,
                                noise_std=args.noise_std,
                                n_perturb=args.n_perturb, seed=args.seed)
    _write_json(out / "faithfulness.json", {
        "class": args.cls,
        "importance_scores": [float(v) for v in scores.array],
        "pgi": pgi, "pgu": pgu,
    })
    print(f"PGI={pgi:.6f} PGU={pgu:.6f}")
    return 0


def _cmd_repro(args) -> int:
    out = _out_dir(args)
    report, _ = experiments.run_all(seed=args.seed)
    (out / "report.json").write_bytes(experiments.report_bytes(report))
    print(f"acceptance experiment report at {out / 'report.json'}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="cdisco",
                     description="concept discovery in latent spaces")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(fn=fn)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        return p

    p = add("synth", _cmd_synth, "generate a planted-pattern image dataset")
    p.add_argument("--classes", default="h_stripes,dots,checkerboard")
    p.add_argument("--n-per-class", type=int, default=300)
    p.add_argument("--noise-std", type=float, default=0.1)
    p.add_argument("--decoy-amplitude", type=float, default=0.55)
    p.add_argument("--superpose", default="",
                   help="pattern pair for class 0, e.g. h_stripes,dots")

    p = add("train", _cmd_train, "train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--channels", default="8,16",
                   help="conv channels or MLP hidden sizes")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--lr", type=float, default=0.08)
    p.add_argument("--layer", default="conv_last")

    p = add("dump", _cmd_dump, "extract an activation dump")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--classes", default="", help="tracked classes (default all)")
    p.add_argument("--no-spatial", action="store_true")

    p = add("discover", _cmd_discover, "rank singular directions per class")
    p.add_argument("--dump", required=True)
    p.add_argument("--class", dest="cls", type=int, default=None,
                   help="single class id (default: all tracked)")
    p.add_argument("--m", type=int, default=1)

    def add_refine_flags(p):
        p.add_argument("--top-count", type=int, default=None)
        p.add_argument("--threshold-frac", type=float, default=0.6)
        p.add_argument("--min-cluster-size", type=int, default=5)

    p = add("refine", _cmd_refine, "split a class's top direction into concepts")
    p.add_argument("--dump", required=True)
    p.add_argument("--class", dest="cls", type=int, required=True)
    add_refine_flags(p)

    p = add("maps", _cmd_maps, "concept activation map for one sample")
    p.add_argument("--dump", required=True)
    p.add_argument("--concept", required=True, help="concept vector CDAD file")
    p.add_argument("--sample", required=True)

    p = add("masks", _cmd_masks, "concept segmentation mask for one sample")
    p.add_argument("--dump", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--concept", required=True)
    p.add_argument("--sample", required=True)

    p = add("ablate-occlude", _cmd_ablate_occlude,
            "occlusion SDC scan for one class")
    p.add_argument("--dump", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--class", dest="cls", type=int, required=True)
    p.add_argument("--m", type=int, default=2)
    p.add_argument("--fill", default="mean", choices=("mean", "gray", "zero"))
    add_refine_flags(p)

    p = add("ablate-weights", _cmd_ablate_weights,
            "weight annihilation with random controls")
    p.add_argument("--dump", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--class", dest="cls", type=int, required=True)
    p.add_argument("--m", type=int, default=1)
    p.add_argument("--keep-frac", type=float, default=0.8)
    add_refine_flags(p)

    p = add("census", _cmd_census, "polysemanticity census")
    p.add_argument("--dump", required=True)
    add_refine_flags(p)

    p = add("outliers", _cmd_outliers, "flag coefficient outliers")
    p.add_argument("--dump", required=True)
    p.add_argument("--directions", default="")
    p.add_argument("--target-frac", type=float, default=0.10)

    p = add("faithfulness", _cmd_faithfulness, "PGI/PGU for a dense model")
    p.add_argument("--dump", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--class", dest="cls", type=int, default=1)
    p.add_argument("--top-frac", type=float, default=1 / 3)
    p.add_argument("--noise-std", type=float, default=0.3)
    p.add_argument("--n-perturb", type=int, default=1000)

    add("repro", _cmd_repro, "run the full acceptance experiment suite")
    return parser


def main(argv=None) -> int:
    # worker cap honored by construction: every stage runs single-threaded
    os.environ.setdefault("CDISCO_THREADS", "1")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ValidationError, ShapeError, FormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except CdiscoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
