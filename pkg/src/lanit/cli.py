"""Command-line entry point: ``lanit {label|train|translate|evaluate|select-domains|make-toy}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from lanit.config import load_config
from lanit.errors import ConfigError, InputError, LanitError

log = logging.getLogger("lanit")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("UsageError", message, code=2)


def _fail(kind: str, message: str, code: int = 1):
    sys.stderr.write(json.dumps({"error": kind, "message": str(message)}) + "\n")
    sys.exit(code)


def _parse_value(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def _load_run_config(args, extra: dict | None = None):
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = _parse_value(val)
    if args.seed is not None:
        overrides.setdefault("train.seed", args.seed)
    for k, v in (extra or {}).items():
        if v is not None:
            overrides[k] = v
    return load_config(args.config, overrides)


def _backend(cfg, extra_concepts=()):
    from lanit.embedding import make_backend

    emb = cfg.embedder
    if emb.kind == "mock" and not emb.concepts:
        # Without an explicit concept list the mock probes everything it is asked to label.
        emb.concepts = list(cfg.labeling.domains) + list(extra_concepts)
    return make_backend(emb)


def _image_paths(items) -> list[Path]:
    from lanit.data import IMAGE_EXTS

    out = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            out += sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_EXTS)
        elif p.is_file():
            out.append(p)
        else:
            raise InputError(f"image not found: {p}")
    if not out:
        raise InputError("no input images")
    return out


def _read(path, size):
    from lanit.data import read_image

    try:
        return read_image(path, size)
    except (OSError, ValueError) as e:
        raise InputError(f"cannot read image {path}: {e}") from None


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


# -- subcommands ----------------------------------------------------------------


def cmd_make_toy(args):
    from lanit.data import ToyDatasetSpec, load_toy_spec, make_toy_dataset

    spec = load_toy_spec(args.spec) if args.spec else ToyDatasetSpec()
    if args.seed is not None:
        spec.seed = args.seed
    if args.n_images is not None:
        spec.n_images = args.n_images
    out = make_toy_dataset(spec, args.out)
    print(json.dumps({"out": str(out), "n_images": spec.n_images, "domains": spec.attributes}))


def _domains_from_data(cfg, data_dir):
    if not Path(data_dir).is_dir():
        raise InputError(f"dataset directory not found: {data_dir}")
    if not cfg.labeling.domains:
        f = Path(data_dir) / "domains.json"
        if f.exists():
            cfg.labeling.domains = json.loads(f.read_text())
    if not cfg.labeling.domains:
        raise ConfigError("no candidate domains: set labeling.domains (or --domains)")


def cmd_label(args):
    from lanit.data import load_dataset, write_jsonl
    from lanit.labeling import build_prompts, compute_similarities, label
    from lanit.metrics import accuracy, f1_multihot

    cfg = _load_run_config(args, {"labeling.domains": args.domains, "labeling.template": args.template})
    _domains_from_data(cfg, args.data)
    backend = _backend(cfg)
    lab = cfg.labeling
    man = load_dataset(args.data, args.image_size)
    prompts = build_prompts(lab.template, lab.domains, backend, lab)
    rows = []
    for i, name in enumerate(man.files):
        sim = compute_similarities(man.image01(i), prompts, backend, lab)
        d = label(sim, lab)
        rows.append({"file": name, "d": d.tolist(), "f": sim.f.tolist(), "base_sim": sim.base_sim})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(out, rows)
    summary = {"out": str(out), "n": len(rows), "skipped": man.skipped, "domains": lab.domains}
    if man.gt is not None:
        gt = [man.gt[r["file"]] for r in rows if r["file"] in man.gt]
        sel = [r for r in rows if r["file"] in man.gt]
        if gt and "attrs" in gt[0]:
            summary["f1"] = f1_multihot([r["d"] for r in sel], [g["attrs"] for g in gt])
            summary["acc_any"] = accuracy([r["f"] for r in sel], [g["attrs"] for g in gt], any_match=True)
        elif gt:
            summary["acc"] = accuracy([r["f"] for r in sel], [g["class"] for g in gt])
    print(json.dumps(summary))


def cmd_train(args):
    from lanit.data import load_dataset
    from lanit.training import init_state, load_checkpoint, run_training

    cfg = _load_run_config(args, {"train.iterations": args.iterations})
    _domains_from_data(cfg, args.data)
    backend = _backend(cfg)
    man = load_dataset(args.data, cfg.arch.image_size)
    if args.resume:
        state = load_checkpoint(args.resume, backend, cfg)
    else:
        state = init_state(cfg, backend)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))

    def report(r):
        if r.iter % cfg.train.log_interval == 0:
            log.info("iter %d %s", r.iter, r.log_record())

    state = run_training(state, backend, man, out, iterations=cfg.train.iterations, on_report=report)
    print(json.dumps({"out": str(out), "iteration": state.iteration, "checkpoint": str(out / "latest.lanit")}))


def _load_for_inference(args):
    from lanit.config import config_from_dict
    from lanit.training import checkpoint_config, load_checkpoint

    cfg = checkpoint_config(args.checkpoint)
    if args.config:
        # Only the embedder section of a user config applies at inference time.
        user = _load_run_config(args)
        cfg = config_from_dict({**cfg.to_dict(), "embedder": user.to_dict()["embedder"]})
    backend = _backend(cfg)
    state = load_checkpoint(args.checkpoint, backend)
    return state, backend


def _to_model(img01):
    return torch.from_numpy(np.ascontiguousarray(img01.transpose(2, 0, 1) * 2 - 1)).float()[None]


def _parse_target(text, prompts) -> np.ndarray:
    """Domain names ("a,b") or an explicit multi-hot ("1,0,1")."""
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ConfigError("target domain list is empty (at least one active domain is required)")
    if all(p in ("0", "1") for p in parts) and len(parts) == prompts.N:
        d = np.array([int(p) for p in parts])
    else:
        d = np.zeros(prompts.N, dtype=np.int64)
        for p in parts:
            d[prompts.domain_index(p)] = 1
    if d.sum() == 0:
        raise ConfigError("target label has no active domain")
    return d


def cmd_translate(args):
    from lanit.data import write_image
    from lanit.labeling import similarity_batch
    from lanit.training import compute_labels, to_hwc01, translate_latent, translate_reference

    if (args.style is None) == (args.domains is None):
        raise ConfigError("give exactly one of --style (reference-guided) or --domains (latent-guided)")
    state, backend = _load_for_inference(args)
    mods = state.ema_model().eval()
    size = state.config.arch.image_size
    names = state.prompts.domain_names
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    contents = _image_paths(args.content)
    written = []
    if args.style is not None:
        style_path = Path(args.style)
        y = _to_model(_read(style_path, size))
        d_y = compute_labels(state, backend, y)
        with torch.no_grad():
            f, base = similarity_batch((y + 1) / 2, state.prompts, backend, state.config.labeling.augment)
        for cp in contents:
            x = _to_model(_read(cp, size))
            img = translate_reference(mods, x, y, d_y)[0]
            name = f"{cp.stem}__{style_path.stem}.png"
            write_image(out / name, to_hwc01(img))
            _write_json(out / (name[:-4] + ".json"), {
                "file": name,
                "mode": "reference",
                "content": cp.name,
                "style": style_path.name,
                "domains": names,
                "d": [int(v) for v in d_y[0].tolist()],
                "f": f[0].double().tolist(),
                "base_sim": None if base is None else float(base[0]),
            })
            written.append(name)
    else:
        d = _parse_target(args.domains, state.prompts)
        seed = state.config.train.seed if args.seed is None else args.seed
        gen = torch.Generator().manual_seed(seed)
        d_t = torch.as_tensor(d, dtype=torch.float32)[None]
        for cp in contents:
            x = _to_model(_read(cp, size))
            for k in range(args.n_samples):
                z = torch.randn(1, state.config.arch.latent_dim, generator=gen)
                img = translate_latent(mods, x, z, d_t)[0]
                name = f"{cp.stem}__latent{k}.png"
                write_image(out / name, to_hwc01(img))
                meta = {
                    "file": name,
                    "mode": "latent",
                    "content": cp.name,
                    "domains": names,
                    "d": d.tolist(),
                    "seed": seed,
                    "sample": k,
                }
                if d.sum() == 1:
                    meta["target_class"] = int(d.argmax())
                _write_json(out / (name[:-4] + ".json"), meta)
                written.append(name)
    print(json.dumps({"out": str(out), "files": written}))


def _class_of(row):
    if "class" in row:
        return int(row["class"])
    attrs = row.get("attrs")
    if attrs is not None and sum(attrs) == 1:
        return int(np.argmax(attrs))
    return None


def cmd_evaluate(args):
    from lanit.data import IMAGE_EXTS, load_gt, read_jsonl
    from lanit.metrics import (
        EmbedderFeatures,
        InceptionFeatures,
        MetricReport,
        accuracy,
        density_coverage,
        f1_multihot,
        mfid,
    )

    gt = load_gt(args.gt) if args.gt else {}
    report = MetricReport()
    if args.labels:
        rows = [r for r in read_jsonl(args.labels) if r["file"] in gt]
        if not rows:
            raise InputError("no label rows match the ground-truth files")
        g = [gt[r["file"]] for r in rows]
        if "attrs" in g[0]:
            report.f1 = f1_multihot([r["d"] for r in rows], [x["attrs"] for x in g])
            if args.any_match:
                report.acc = accuracy([r["f"] for r in rows], [x["attrs"] for x in g], any_match=True)
            elif all(_class_of(x) is not None for x in g):
                report.acc = accuracy([r["f"] for r in rows], [_class_of(x) for x in g])
        else:
            n = len(rows[0]["d"])
            report.acc = accuracy([r["f"] for r in rows], [x["class"] for x in g])
            report.f1 = f1_multihot([r["d"] for r in rows], [np.eye(n, dtype=int)[x["class"]] for x in g])

    if args.real and args.fake:
        if args.features == "inception":
            if not args.inception_weights:
                raise ConfigError("--features inception requires --inception-weights")
            extract = InceptionFeatures(args.inception_weights)
            size = 299
        else:
            cfg = _load_run_config(args)
            extract = EmbedderFeatures(_backend(cfg))
            size = args.image_size
        real_files = sorted(p for p in Path(args.real).iterdir() if p.suffix.lower() in IMAGE_EXTS)
        fake_files = sorted(p for p in Path(args.fake).iterdir() if p.suffix.lower() in IMAGE_EXTS)
        if not real_files or not fake_files:
            raise InputError("real and fake directories must both contain images")
        real = extract([_read(p, size) for p in real_files]).features
        fake = extract([_read(p, size) for p in fake_files]).features
        report.extractor = extract.identity
        report.density, report.coverage = density_coverage(real, fake, args.k)

        real_cls = np.array([_class_of(gt[p.name]) if p.name in gt else None for p in real_files], dtype=object)
        fake_cls = []
        for p in fake_files:
            side = p.with_suffix(".json")
            c = None
            if side.exists():
                meta = json.loads(side.read_text())
                c = meta.get("target_class")
                if c is None and meta.get("style") in gt:
                    c = _class_of(gt[meta["style"]])
            fake_cls.append(c)
        fake_cls = np.array(fake_cls, dtype=object)
        classes = sorted({c for c in real_cls if c is not None} & {c for c in fake_cls if c is not None})
        classes = [c for c in classes if (real_cls == c).sum() >= 2 and (fake_cls == c).sum() >= 2]
        if classes:
            report.mfid, report.fid_per_class = mfid(
                [fake[fake_cls == c] for c in classes], [real[real_cls == c] for c in classes]
            )
            report.classes = classes
    _write_json(args.out, report.to_dict())
    print(json.dumps(report.to_dict()))


def cmd_select_domains(args):
    from lanit.data import load_dataset
    from lanit.labeling import select_domains_from_dictionary

    text = Path(args.dictionary).read_text()
    dictionary = [line.strip() for line in text.splitlines() if line.strip() and not line.startswith("#")]
    if not dictionary:
        raise InputError(f"dictionary {args.dictionary} is empty")
    cfg = _load_run_config(args, {"labeling.template": args.template})
    backend = _backend(cfg, dictionary)
    man = load_dataset(args.data, args.image_size)
    images = [man.image01(i) for i in range(len(man))]
    sel = select_domains_from_dictionary(images, dictionary, args.n, backend, cfg.labeling.template, args.scope)
    if args.out:
        _write_json(args.out, {"selected": sel})
    print(json.dumps({"selected": sel}))


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="seed override")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted)")
    common.add_argument("--log-level", default="WARNING")

    p = _Parser(prog="lanit", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-toy", parents=[common], help="write the synthetic shape/colour dataset")
    s.add_argument("--spec", help="YAML toy dataset spec")
    s.add_argument("--n-images", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_toy)

    s = sub.add_parser("label", parents=[common], help="pseudo-label a folder of images")
    s.add_argument("--data", required=True)
    s.add_argument("--domains", help="comma-separated candidate domains")
    s.add_argument("--template")
    s.add_argument("--image-size", type=int, default=None, help="resize before embedding")
    s.add_argument("--out", required=True, help="labels.jsonl")
    s.set_defaults(func=cmd_label)

    s = sub.add_parser("train", parents=[common], help="train a translation model")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--iterations", type=int)
    s.add_argument("--resume", help="checkpoint to resume from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("translate", parents=[common], help="reference- or latent-guided translation")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--content", required=True, nargs="+", help="content images or directories")
    s.add_argument("--style", help="style reference image")
    s.add_argument("--domains", help="target domains (names or multi-hot) for latent-guided mode")
    s.add_argument("--n-samples", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_translate)

    s = sub.add_parser("evaluate", parents=[common], help="mFID, density/coverage, accuracy, F1")
    s.add_argument("--real")
    s.add_argument("--fake")
    s.add_argument("--labels")
    s.add_argument("--gt")
    s.add_argument("--features", choices=["embedder", "inception"], default="embedder")
    s.add_argument("--inception-weights")
    s.add_argument("--image-size", type=int, default=None)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--any-match", action="store_true")
    s.add_argument("--out", required=True, help="report.json")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("select-domains", parents=[common], help="pick domains from a dictionary file")
    s.add_argument("--data", required=True)
    s.add_argument("--dictionary", required=True, help="one candidate domain per line")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--template")
    s.add_argument("--scope", choices=["assigned", "all"], default="assigned")
    s.add_argument("--image-size", type=int, default=None)
    s.add_argument("--out")
    s.set_defaults(func=cmd_select_domains)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), stream=sys.stderr)
    if args.seed is not None:
        torch.manual_seed(args.seed)
        np.random.seed(args.seed)
    try:
        args.func(args)
    except LanitError as e:
        _fail(type(e).__name__, e, code=2 if isinstance(e, (ConfigError, InputError)) else 1)
    except FileNotFoundError as e:
        _fail("InputError", e, code=2)
    return 0


if __name__ == "__main__":
    main()
