"""Command-line entry point: fit banks, predict, explain, attribute,
evaluate, render.

All commands are deterministic functions of their flags plus the files on
disk; rerunning with unchanged inputs overwrites byte-identical outputs.
Artifacts land under ``--out`` in ``banks/``, ``maps/``, ``attr/``,
``render/`` and ``reports/``.  ``PROTOEXPLAIN_THREADS`` caps the number
of worker threads used for per-record work.

Exit codes: 0 ok, 2 validation failure, 3 missing prerequisite artifact,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import attribution, encoder_explainer, eval_report, kmex, render, sem_core, tensor_store
from .bank import PrototypeBank, load_bank, save_bank
from .errors import ConfigurationError, FormatError, ProtoExplainError, ValidationError
from .kmex import KmexModel

SUBDIRS = ("banks", "maps", "attr", "render", "reports")


def thread_count() -> int:
    env = os.environ.get("PROTOEXPLAIN_THREADS")
    if env is not None:
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


def _pmap(fn, items):
    items = list(items)
    workers = min(thread_count(), max(1, len(items)))
    if workers == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _out_dirs(out: Path) -> None:
    for sub in SUBDIRS:
        (out / sub).mkdir(parents=True, exist_ok=True)


def _bank_stem(out: Path, depth: int | None) -> Path:
    return out / "banks" / ("kmex" if depth is None else f"composite_b{depth}")


def _require_bank(out: Path, depth: int | None) -> PrototypeBank:
    stem = _bank_stem(out, depth)
    if not stem.with_suffix(".npy").exists():
        what = "KMEx bank" if depth is None else f"composite bank for depth {depth}"
        raise ConfigurationError(
            f"{what} not found at {stem}.npy; run `protoexplain fit` first"
        )
    return load_bank(stem)


def _fitted_depths(out: Path) -> list[int]:
    return sorted(
        int(p.stem.removeprefix("composite_b"))
        for p in (out / "banks").glob("composite_b*.npy")
    )


def _model_name(manifest, depth: int) -> str:
    included = [b for b in manifest.block_ids if b >= depth]
    return "b" + "".join(str(b) for b in included)


def _load_clf(manifest) -> sem_core.LinearClassifier:
    return sem_core.LinearClassifier(tensor_store.load_classifier_matrix(manifest))


def cmd_fit(args) -> None:
    manifest = tensor_store.load_manifest(args.manifest)
    out = Path(args.out)
    _out_dirs(out)
    train_ids = manifest.sample_ids("train")
    embeddings = tensor_store.load_embeddings(manifest)[train_ids]
    labels = manifest.labels[train_ids]

    model = kmex.fit_kmex(
        embeddings, labels,
        num_classes=manifest.num_classes,
        k_per_class=args.k_per_class,
        seed=args.seed,
    )
    save_bank(model.bank, _bank_stem(out, None))

    deepest = manifest.block_ids[-1]
    depths = [d for d in manifest.block_ids if d >= args.depth_from]
    for depth in depths:
        bank = encoder_explainer.fit_composite_bank(
            tensor_store.iter_records(manifest, split="train", depth_from=depth),
            depth_from=depth,
            num_classes=manifest.num_classes,
            k_per_class=args.k_per_class,
            seed=args.seed,
        )
        save_bank(bank, _bank_stem(out, depth))
        print(f"fitted composite bank b{depth} "
              f"({bank.num_prototypes} prototypes, dim {bank.dim})")
    info = {
        "dataset": manifest.dataset,
        "seed": args.seed,
        "k_per_class": args.k_per_class,
        "depth_from": args.depth_from,
        "composite_depths": depths,
        "deepest_block": deepest,
    }
    (out / "banks" / "fit_info.json").write_text(json.dumps(info, indent=2) + "\n")
    print(f"fitted KMEx bank ({model.bank.num_prototypes} prototypes); artifacts in {out}/banks")


def cmd_predict(args) -> None:
    manifest = tensor_store.load_manifest(args.manifest)
    out = Path(args.out)
    _out_dirs(out)
    clf = _load_clf(manifest)
    kmex_model = KmexModel(bank=_require_bank(out, None))
    depths = _fitted_depths(out)
    if not depths:
        raise ConfigurationError("no composite banks found; run `protoexplain fit` first")
    banks = {d: _require_bank(out, d) for d in depths}

    ids = manifest.sample_ids(args.split)
    embeddings = tensor_store.load_embeddings(manifest)[ids]
    labels = manifest.labels[ids]
    cnn_pred = np.argmax(sem_core.classify(embeddings, clf), axis=1)
    kmex_pred = kmex.predict_batch(embeddings, kmex_model)

    columns = ["sample_id", "label", "cnn", "kmex"] + [
        _model_name(manifest, d) for d in depths
    ]
    table = np.zeros((len(ids), len(columns)), dtype=np.int64)
    table[:, 0] = ids
    table[:, 1] = labels
    table[:, 2] = cnn_pred
    table[:, 3] = kmex_pred
    for j, depth in enumerate(depths):
        records = list(tensor_store.iter_records(manifest, split=args.split, depth_from=depth))
        preds = _pmap(
            lambda rec, b=banks[depth]: encoder_explainer.predict_counts(
                encoder_explainer.explain(rec, b)).class_id,
            records,
        )
        table[:, 4 + j] = preds

    tensor_store.write_tensor(table, out / "reports" / "predictions.npy")
    summary = {
        "split": args.split,
        "columns": columns,
        "accuracy": {
            name: eval_report.accuracy(table[:, 2 + i], labels)
            for i, name in enumerate(columns[2:])
        },
    }
    (out / "reports" / "predictions.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary["accuracy"], indent=2))


def cmd_explain(args) -> None:
    manifest = tensor_store.load_manifest(args.manifest)
    out = Path(args.out)
    _out_dirs(out)
    bank = _require_bank(out, args.depth_from)
    bank_path = _bank_stem(out, args.depth_from).with_suffix(".npy")

    def work(record):
        emap = encoder_explainer.explain(record, bank)
        stem = out / "maps" / f"sample_{record.sample_id:05d}_b{args.depth_from}"
        encoder_explainer.save_map(emap, stem, bank_path=bank_path)
        return stem

    stems = _pmap(work, tensor_store.iter_records(manifest, split=args.split,
                                                  depth_from=args.depth_from))
    print(f"wrote {len(stems)} explanation maps to {out}/maps")


def _cascade_banks(out: Path, manifest, depth_from: int) -> dict[int, PrototypeBank]:
    deepest = manifest.block_ids[-1]
    return {d: _require_bank(out, d) for d in manifest.block_ids
            if depth_from <= d < deepest}


def cmd_attribute(args) -> None:
    manifest = tensor_store.load_manifest(args.manifest)
    out = Path(args.out)
    _out_dirs(out)
    clf = _load_clf(manifest)
    banks = _cascade_banks(out, manifest, args.depth_from)

    def work(record):
        class_id = args.class_id
        if class_id is None:
            class_id = int(np.argmax(sem_core.classify(record.embedding, clf)))
        maps = attribution.attribution_cascade(
            record, clf, banks, class_id=class_id, depth_from=args.depth_from
        )
        for att in maps:
            stem = out / "attr" / f"sample_{record.sample_id:05d}_b{att.depth}_c{att.class_id}"
            attribution.save_attribution(att, stem)
        return len(maps)

    counts = _pmap(work, tensor_store.iter_records(manifest, split=args.split,
                                                   depth_from=args.depth_from))
    print(f"wrote {sum(counts)} attribution maps to {out}/attr")


def cmd_eval(args) -> None:
    manifest = tensor_store.load_manifest(args.manifest)
    out = Path(args.out)
    _out_dirs(out)
    clf = _load_clf(manifest)
    kmex_bank = _require_bank(out, None)
    eval_report.check_fit_split(kmex_bank, "kmex")
    depths = _fitted_depths(out)
    banks = {d: _require_bank(out, d) for d in depths}
    for d, bank in banks.items():
        eval_report.check_fit_split(bank, _model_name(manifest, d))

    train_ids = manifest.sample_ids("train")
    embeddings = tensor_store.load_embeddings(manifest)
    train_embeddings = embeddings[train_ids]
    train_labels = manifest.labels[train_ids]

    clf_bank = sem_core.classifier_as_bank(clf)
    alignment = eval_report.AlignmentReport(
        dataset=manifest.dataset,
        k_per_class=kmex_bank.k_per_class,
        rows=(
            eval_report.cosine_alignment(clf_bank, train_embeddings, train_labels, "cnn"),
            eval_report.cosine_alignment(kmex_bank, train_embeddings, train_labels, "kmex"),
        ),
    )
    (out / "reports" / "alignment.json").write_text(eval_report.alignment_report_json(alignment))
    (out / "reports" / "alignment.txt").write_text(eval_report.alignment_report_text(alignment))

    kmex_model = KmexModel(bank=kmex_bank)
    acc: dict[str, dict[str, float]] = {}
    for split in ("train", "test"):
        ids = manifest.sample_ids(split)
        labels = manifest.labels[ids]
        z = embeddings[ids]
        acc.setdefault("cnn", {})[split] = eval_report.accuracy(
            np.argmax(sem_core.classify(z, clf), axis=1), labels)
        acc.setdefault("kmex", {})[split] = eval_report.accuracy(
            kmex.predict_batch(z, kmex_model), labels)
        for depth in depths:
            records = tensor_store.iter_records(manifest, split=split, depth_from=depth)
            preds = _pmap(
                lambda rec, b=banks[depth]: encoder_explainer.predict_counts(
                    encoder_explainer.explain(rec, b)).class_id,
                records,
            )
            acc.setdefault(_model_name(manifest, depth), {})[split] = eval_report.accuracy(
                np.asarray(preds), labels)

    accuracy = eval_report.AccuracyReport(
        dataset=manifest.dataset,
        seed=kmex_bank.seed or 0,
        rows=tuple(
            eval_report.AccuracyRow(model_id=m, train_acc=v["train"], test_acc=v["test"])
            for m, v in acc.items()
        ),
    )
    (out / "reports" / "accuracy.json").write_text(eval_report.accuracy_report_json(accuracy))
    (out / "reports" / "accuracy.txt").write_text(eval_report.accuracy_report_text(accuracy))

    eval_report.emit_projection_csv(
        train_embeddings, train_labels,
        banks={"cnn": clf_bank, "kmex": kmex_bank},
        path=out / "reports" / "projection.csv",
    )
    print((out / "reports" / "accuracy.txt").read_text(), end="")
    print((out / "reports" / "alignment.txt").read_text(), end="")


def cmd_render(args) -> None:
    manifest = tensor_store.load_manifest(args.manifest)
    if manifest.images_dir is None:
        raise ValidationError(
            "manifest declares no 'images' directory; rendering needs the raw input images"
        )
    out = Path(args.out)
    _out_dirs(out)
    clf = _load_clf(manifest)
    bank = _require_bank(out, args.depth_from)
    cascade_banks = _cascade_banks(out, manifest, args.depth_from)

    wanted = set(args.sample) if args.sample else None

    def work(record):
        if wanted is not None and record.sample_id not in wanted:
            return None
        image = render.load_image(manifest.image_path(record.sample_id))
        emap = encoder_explainer.explain(record, bank)
        class_id = args.class_id
        if class_id is None:
            class_id = int(np.argmax(sem_core.classify(record.embedding, clf)))
        maps = attribution.attribution_cascade(
            record, clf, cascade_banks, class_id=class_id, depth_from=args.depth_from
        )
        prefix = out / "render" / f"sample_{record.sample_id:05d}"
        render.explanation_overlay(image, emap, alpha=args.alpha).save(f"{prefix}_map.png")
        render.attribution_overlay(image, maps[-1], alpha=args.alpha).save(f"{prefix}_attr.png")
        present = sorted(int(p) for p in np.unique(emap.assignments))
        render.prototype_gallery(manifest, bank, present, emap.grid).save(f"{prefix}_gallery.png")
        return record.sample_id

    done = [s for s in _pmap(work, tensor_store.iter_records(
        manifest, split=args.split, depth_from=args.depth_from)) if s is not None]
    print(f"rendered {len(done)} samples to {out}/render "
          "(files: sample_<id>_map.png, _attr.png, _gallery.png)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protoexplain",
        description="Prototype-based post-hoc explanations for frozen CNN classifiers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, split_default="test"):
        p.add_argument("--manifest", required=True, help="dataset manifest JSON")
        p.add_argument("--out", required=True, help="artifact output directory")
        p.add_argument("--split", choices=["train", "test"], default=split_default)

    p_fit = sub.add_parser("fit", help="fit KMEx and composite prototype banks")
    common(p_fit, split_default="train")
    p_fit.add_argument("--depth-from", type=int, choices=[2, 3, 4], default=4)
    p_fit.add_argument("--k-per-class", type=int, default=5)
    p_fit.add_argument("--seed", type=int, default=0)
    p_fit.set_defaults(func=cmd_fit)

    p_predict = sub.add_parser("predict", help="predictions for every fitted model")
    common(p_predict)
    p_predict.set_defaults(func=cmd_predict)

    p_explain = sub.add_parser("explain", help="write explanation maps")
    common(p_explain)
    p_explain.add_argument("--depth-from", type=int, choices=[2, 3, 4], default=4)
    p_explain.set_defaults(func=cmd_explain)

    p_attr = sub.add_parser("attribute", help="write attribution map cascades")
    common(p_attr)
    p_attr.add_argument("--depth-from", type=int, choices=[2, 3, 4], default=4)
    p_attr.add_argument("--class", dest="class_id", type=int, default=None,
                        help="class to attribute (default: the backbone's prediction)")
    p_attr.set_defaults(func=cmd_attribute)

    p_eval = sub.add_parser("eval", help="alignment + accuracy reports, projection CSV")
    common(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_render = sub.add_parser("render", help="PNG overlays and prototype galleries")
    common(p_render)
    p_render.add_argument("--depth-from", type=int, choices=[2, 3, 4], default=4)
    p_render.add_argument("--class", dest="class_id", type=int, default=None)
    p_render.add_argument("--alpha", type=float, default=0.5)
    p_render.add_argument("--sample", type=int, action="append",
                          help="render only these sample ids (repeatable)")
    p_render.set_defaults(func=cmd_render)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ValidationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ProtoExplainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
