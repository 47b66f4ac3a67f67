"""Pipeline orchestration: each stage reads the previous stage's files from
one run directory and writes its own outputs atomically, together with a
manifest (config snapshot plus input/output content hashes). A lock file
keeps two stages from writing the same run directory at once.

Stage order for a full run:

    synth -> ingest -> pretrain -> neighbors -> cluster -> kmeans
          -> centroids -> [serve / rate] -> propagate -> evaluate
          -> sweep-k -> trends
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .annotate import (
    attach_event_payloads,
    cluster_majority_labels,
    create_session,
    export_propagated_csv,
    propagate,
    reannotate_events,
    select_centroids,
    AnnotationSession,
)
from .corpus import (
    SplitPlan,
    Vocabulary,
    WindowSet,
    build_vocabulary,
    drop_temperature_events,
    make_windows,
    parse_event_file,
    read_events_csv,
    sample_windows,
    split_by_days,
    window_truth_labels,
    write_events_csv,
)
from .encoder import EncoderConfig, embed_all, load_params, save_loss_trace, save_params, train_mlm
from .evaluation import (
    ClusterLabelEntry,
    LloydKMeans,
    OTHER_LABEL,
    bootstrap_ci,
    cohens_kappa,
    default_hierarchy,
    f1_scores,
    fleiss_kappa,
    majority_vote_mapping,
    unify_truth_labels,
)
from .scan import AssignmentSet, ClusterHead, ScanConfig, assign_all, fine_tune_scan
from .synth import SyntheticConfig, generate_events, write_raw_log
from .trends import period_distribution, write_trend_report

_SEED_OFFSETS = {"sample": 0, "split": 1, "mlm": 2, "scan": 3, "kmeans": 4, "session": 5, "bootstrap": 6}

DEFAULT_SWEEP_KS = (10, 15, 20, 30, 40, 50, 60, 100)


@dataclass
class PipelineConfig:
    dataset: str = ""
    dataset_name: str = "synthetic"
    out: str = "run"
    seed: int = 7
    length: int = 20
    stride: int = 1
    sample_fraction: float = 0.10
    train_ratio: float = 0.8
    temperature_bin_width: float = 1.0
    drop_temperature: bool = False
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    mask_fraction: float = 0.15
    mlm_learning_rate: float = 0.5
    mlm_epochs: int = 20
    mlm_batch_size: int = 64
    momentum: float = 0.0
    h: int = 20
    k: int = 20
    entropy_weight: float = 2.0
    scan_learning_rate: float = 0.1
    scan_epochs: int = 20
    scan_batch_size: int = 64
    scan_momentum: float = 0.9
    scan_restarts: int = 4
    scan_warmup_epochs: int = 2
    neighbors_per_anchor: int = 1
    m: int = 5
    raters_per_sample: int = 2
    kmeans_max_iters: int = 100
    bootstrap_replicates: int = 1000
    exclude_no_label: bool = False

    def seed_for(self, stage: str) -> int:
        return self.seed + _SEED_OFFSETS[stage]


def _coerce(value: str, target_type):
    if target_type is bool:
        return value.strip().lower() in ("1", "true", "yes", "on")
    return target_type(value)


def load_config_file(path) -> dict[str, str]:
    """Flat key-value file: `key = value` lines, `#` comments."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SystemExit(f"{path}:{line_no}: expected key = value, got {raw.rstrip()!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def build_config(args: argparse.Namespace) -> PipelineConfig:
    """Defaults <- config file <- explicit command-line flags."""
    cfg = PipelineConfig()
    fields = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}
    types = {name: type(getattr(cfg, name)) for name in fields}
    if getattr(args, "config", None):
        for key, value in load_config_file(args.config).items():
            if key not in fields:
                raise SystemExit(f"unknown config key: {key}")
            setattr(cfg, key, _coerce(value, types[key]))
    for key in fields:
        flag = getattr(args, key, None)
        if flag is not None:
            setattr(cfg, key, flag)
    return cfg


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@contextlib.contextmanager
def stage_lock(out_dir: Path):
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise SystemExit(f"run directory is locked by another stage: {lock}") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


@contextlib.contextmanager
def atomic_path(path: Path):
    """Yield a temp path, moved over the target only on success."""
    tmp = path.with_name(path.name + ".tmp")
    yield tmp
    os.replace(tmp, path)


def write_manifest(out_dir: Path, stage: str, cfg: PipelineConfig, inputs, outputs) -> Path:
    manifest_dir = out_dir / "manifests"
    manifest_dir.mkdir(parents=True, exist_ok=True)
    blob = {
        "stage": stage,
        "pdlkit_version": __version__,
        "config": dataclasses.asdict(cfg),
        "inputs": {Path(p).name: sha256_file(p) for p in inputs},
        "outputs": {Path(p).name: sha256_file(p) for p in outputs},
    }
    path = manifest_dir / f"{stage}.json"
    with atomic_path(path) as tmp:
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(blob, fh, indent=2, sort_keys=True)
    return path


def _require(out_dir: Path, *names: str) -> list[Path]:
    paths = [out_dir / n for n in names]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise SystemExit(f"missing input artifacts: {', '.join(missing)}")
    return paths


def _rows_for_ids(windows: WindowSet, ids) -> np.ndarray:
    row_of = {int(w): i for i, w in enumerate(windows.window_id)}
    return np.array([row_of[int(i)] for i in ids], dtype=np.int64)


def _load_ids(out_dir: Path) -> dict:
    with open(out_dir / "sampled_ids.json", "r", encoding="utf-8") as fh:
        return json.load(fh)


def _encoder_config(cfg: PipelineConfig, vocab_size: int) -> EncoderConfig:
    return EncoderConfig(
        vocab_size=vocab_size,
        embed_dim=cfg.embed_dim,
        num_layers=cfg.num_layers,
        num_heads=cfg.num_heads,
        max_seq_len=cfg.length + 1,
        mask_fraction=cfg.mask_fraction,
        learning_rate=cfg.mlm_learning_rate,
        epochs=cfg.mlm_epochs,
        batch_size=cfg.mlm_batch_size,
        momentum=cfg.momentum,
        seed=cfg.seed_for("mlm"),
    )


# ---------------------------------------------------------------- stages


def cmd_synth(cfg: PipelineConfig, args) -> None:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with stage_lock(out):
        synth_cfg = SyntheticConfig(
            days=args.days,
            events_per_day=args.events_per_day,
            seed=cfg.seed,
            total_events=args.total_events,
        )
        events = generate_events(synth_cfg)
        raw = out / "synthetic.txt"
        with atomic_path(raw) as tmp:
            write_raw_log(tmp, events)
        layouts = out / "layouts"
        layouts.mkdir(exist_ok=True)
        ref = resources.files("pdlkit.data").joinpath("layouts/synthetic.json")
        (layouts / "synthetic.json").write_text(ref.read_text(encoding="utf-8"), encoding="utf-8")
        write_manifest(out, "synth", cfg, [], [raw, layouts / "synthetic.json"])
        print(f"synth: wrote {len(events)} events to {raw}")


def cmd_ingest(cfg: PipelineConfig, args) -> None:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    raw_path = Path(cfg.dataset) if cfg.dataset else out / "synthetic.txt"
    if not raw_path.exists():
        raise SystemExit(f"missing input artifacts: {raw_path}")
    with stage_lock(out):
        events, report = parse_event_file(raw_path)
        if cfg.drop_temperature:
            events = drop_temperature_events(events)
        if not events:
            raise SystemExit(f"no events parsed from {raw_path}")
        vocab = build_vocabulary(events, cfg.temperature_bin_width)
        windows = make_windows(events, vocab, cfg.length, cfg.stride)
        events_csv = out / "events.csv"
        with atomic_path(events_csv) as tmp:
            write_events_csv(tmp, events)
        vocab_json = out / "vocab.json"
        with atomic_path(vocab_json) as tmp:
            vocab.save(tmp)
        windows_jsonl = out / "windows.jsonl"
        with atomic_path(windows_jsonl) as tmp:
            windows.to_jsonl(tmp)
        report_json = out / "parse_report.json"
        with atomic_path(report_json) as tmp:
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump(
                    {
                        "total_lines": report.total_lines,
                        "parsed": report.parsed,
                        "skips": report.skips,
                        "warnings": report.warnings,
                    },
                    fh,
                    indent=2,
                )
        write_manifest(
            out, "ingest", cfg, [raw_path], [events_csv, vocab_json, windows_jsonl, report_json]
        )
        print(
            f"ingest: {report.parsed} events, {len(vocab)} tokens, "
            f"{len(windows)} windows ({len(report.skips)} skipped lines)"
        )


def cmd_pretrain(cfg: PipelineConfig, args) -> None:
    out = Path(cfg.out)
    inputs = _require(out, "windows.jsonl", "vocab.json")
    with stage_lock(out):
        windows = WindowSet.from_jsonl(out / "windows.jsonl")
        vocab = Vocabulary.load(out / "vocab.json")
        sampled = sample_windows(windows, cfg.sample_fraction, cfg.seed_for("sample"))
        plan = split_by_days(sampled, cfg.train_ratio, cfg.seed_for("split"))
        train_ws, test_ws = plan.assign(sampled)
        enc_cfg = _encoder_config(cfg, len(vocab))
        params, trace = train_mlm(train_ws.token_ids, enc_cfg)

        encoder_bin = out / "encoder.bin"
        with atomic_path(encoder_bin) as tmp:
            save_params(tmp, params, enc_cfg)
        trace_csv = out / "loss_trace.csv"
        with atomic_path(trace_csv) as tmp:
            save_loss_trace(tmp, trace)
        split_json = out / "split.json"
        with atomic_path(split_json) as tmp:
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump(plan.to_json(), fh, indent=2, sort_keys=True)
        ids_json = out / "sampled_ids.json"
        with atomic_path(ids_json) as tmp:
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump(
                    {
                        "sampled": [int(i) for i in sampled.window_id],
                        "train": [int(i) for i in train_ws.window_id],
                        "test": [int(i) for i in test_ws.window_id],
                    },
                    fh,
                )
        write_manifest(out, "pretrain", cfg, inputs, [encoder_bin, trace_csv, split_json, ids_json])
        first, last = (trace[0], trace[-1]) if trace else (float("nan"),) * 2
        print(
            f"pretrain: {len(train_ws)} train / {len(test_ws)} test windows, "
            f"loss {first:.4f} -> {last:.4f}"
        )


def cmd_neighbors(cfg: PipelineConfig, args) -> None:
    from .neighbors import build_knn

    out = Path(cfg.out)
    inputs = _require(out, "encoder.bin", "windows.jsonl", "sampled_ids.json")
    with stage_lock(out):
        params, enc_cfg = load_params(out / "encoder.bin")
        windows = WindowSet.from_jsonl(out / "windows.jsonl")
        ids = _load_ids(out)
        train_rows = _rows_for_ids(windows, ids["train"])
        train_tokens = windows.token_ids[train_rows]
        embeddings = embed_all(params, enc_cfg, train_tokens)
        emb_npy = out / "embeddings.npy"
        with atomic_path(emb_npy) as tmp:
            with open(tmp, "wb") as fh:
                np.save(fh, embeddings)
        graph = build_knn(embeddings, cfg.h, window_ids=np.array(ids["train"], dtype=np.int64))
        graph_jsonl = out / "graph.jsonl"
        with atomic_path(graph_jsonl) as tmp:
            graph.to_jsonl(tmp)
        write_manifest(out, "neighbors", cfg, inputs, [emb_npy, graph_jsonl])
        print(f"neighbors: {len(graph)} nodes, h={graph.h}")


def cmd_cluster(cfg: PipelineConfig, args) -> None:
    from .neighbors import NeighborGraph

    out = Path(cfg.out)
    inputs = _require(out, "encoder.bin", "graph.jsonl", "windows.jsonl", "sampled_ids.json")
    with stage_lock(out):
        params, enc_cfg = load_params(out / "encoder.bin")
        windows = WindowSet.from_jsonl(out / "windows.jsonl")
        graph = NeighborGraph.from_jsonl(out / "graph.jsonl")
        ids = _load_ids(out)
        train_rows = _rows_for_ids(windows, graph.window_ids)
        train_tokens = windows.token_ids[train_rows]
        scan_cfg = ScanConfig(
            entropy_weight=cfg.entropy_weight,
            epochs=cfg.scan_epochs,
            learning_rate=cfg.scan_learning_rate,
            batch_size=cfg.scan_batch_size,
            neighbors_per_anchor=cfg.neighbors_per_anchor,
            momentum=cfg.scan_momentum,
            restarts=cfg.scan_restarts,
            warmup_epochs=cfg.scan_warmup_epochs,
            seed=cfg.seed_for("scan"),
        )
        tuned, head, _ = fine_tune_scan(
            params, enc_cfg, train_tokens, graph.indices, cfg.k, scan_cfg
        )
        assignments = assign_all(tuned, enc_cfg, head, windows.token_ids, windows.window_id)

        scan_bin = out / "scan_encoder.bin"
        with atomic_path(scan_bin) as tmp:
            save_params(tmp, tuned, enc_cfg)
        head_json = out / "cluster_head.json"
        with atomic_path(head_json) as tmp:
            head.save(tmp)
        asg_jsonl = out / "assignments.jsonl"
        with atomic_path(asg_jsonl) as tmp:
            assignments.to_jsonl(tmp)
        proj_npy = out / "projection_embeddings.npy"
        with atomic_path(proj_npy) as tmp:
            with open(tmp, "wb") as fh:
                np.save(fh, embed_all(tuned, enc_cfg, windows.token_ids))
        write_manifest(
            out, "cluster", cfg, inputs, [scan_bin, head_json, asg_jsonl, proj_npy]
        )
        sizes = np.bincount(assignments.cluster_ids, minlength=cfg.k)
        print(f"cluster: k={cfg.k}, sizes min/median/max = "
              f"{sizes.min()}/{int(np.median(sizes))}/{sizes.max()}")


def cmd_kmeans(cfg: PipelineConfig, args) -> None:
    out = Path(cfg.out)
    inputs = _require(out, "encoder.bin", "embeddings.npy", "windows.jsonl", "sampled_ids.json")
    with stage_lock(out):
        params, enc_cfg = load_params(out / "encoder.bin")
        windows = WindowSet.from_jsonl(out / "windows.jsonl")
        embeddings = np.load(out / "embeddings.npy")
        model = LloydKMeans(n_clusters=cfg.k, seed=cfg.seed_for("kmeans"), max_iters=cfg.kmeans_max_iters)
        model.fit(embeddings)
        all_embeddings = embed_all(params, enc_cfg, windows.token_ids)
        labels = model.predict(all_embeddings)
        probs = np.zeros((len(labels), cfg.k))
        probs[np.arange(len(labels)), labels] = 1.0
        assignments = AssignmentSet(windows.window_id, probs)
        asg_jsonl = out / "kmeans_assignments.jsonl"
        with atomic_path(asg_jsonl) as tmp:
            assignments.to_jsonl(tmp)
        write_manifest(out, "kmeans", cfg, inputs, [asg_jsonl])
        print(f"kmeans: k={cfg.k}, converged in {model.n_iter_} iterations")


def cmd_centroids(cfg: PipelineConfig, args) -> None:
    out = Path(cfg.out)
    inputs = _require(out, "assignments.jsonl", "windows.jsonl", "events.csv")
    with stage_lock(out):
        assignments = AssignmentSet.from_jsonl(out / "assignments.jsonl")
        windows = WindowSet.from_jsonl(out / "windows.jsonl")
        events = read_events_csv(out / "events.csv")
        samples = select_centroids(assignments, cfg.m)
        attach_event_payloads(samples, windows, events)
        session = create_session(
            samples,
            cfg.raters_per_sample,
            cfg.seed_for("session"),
            session_id=args.session_id,
            dataset_id=cfg.dataset_name,
        )
        sessions_dir = out / "sessions"
        sessions_dir.mkdir(exist_ok=True)
        path = sessions_dir / f"{session.session_id}.json"
        session.save(path)
        write_manifest(out, "centroids", cfg, inputs, [path])
        print(
            f"centroids: {len(samples)} samples ({cfg.m} per cluster), "
            f"{session.schedule_size} scheduled ratings -> {path}"
        )


def cmd_serve(cfg: PipelineConfig, args) -> None:
    import uvicorn

    from .server import create_app

    app = create_app(Path(cfg.out))
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")


def _auto_rate(session: AnnotationSession, windows, events, hierarchy) -> None:
    """Simulated raters that answer with the window's majority truth label.

    Lets the pipeline run end-to-end without humans; labels outside the
    hierarchy degrade to "Other".
    """
    truth = window_truth_labels(windows, events)
    row_of = {int(w): i for i, w in enumerate(windows.window_id)}
    for rater in ("auto_1", "auto_2")[: session.raters_per_sample]:
        while True:
            sample = session.next_for(rater)
            if sample is None:
                break
            label = truth[row_of[sample.window_id]]
            if label != OTHER_LABEL and label not in hierarchy:
                label = OTHER_LABEL
            session.record(sample.window_id, rater, label, hierarchy)


def cmd_rate(cfg: PipelineConfig, args) -> None:
    out = Path(cfg.out)
    _require(out, "windows.jsonl", "events.csv")
    session_path = out / "sessions" / f"{args.session_id}.json"
    if not session_path.exists():
        raise SystemExit(f"missing input artifacts: {session_path}")
    with stage_lock(out):
        session = AnnotationSession.load(session_path)
        windows = WindowSet.from_jsonl(out / "windows.jsonl")
        events = read_events_csv(out / "events.csv")
        hierarchy = default_hierarchy()
        _auto_rate(session, windows, events, hierarchy)
        session.save(session_path)
        print(f"rate: session {args.session_id} now {session.progress()}")


def cmd_propagate(cfg: PipelineConfig, args) -> None:
    out = Path(cfg.out)
    inputs = _require(out, "assignments.jsonl", "windows.jsonl", "events.csv")
    session_path = out / "sessions" / f"{args.session_id}.json"
    if not session_path.exists():
        raise SystemExit(f"missing input artifacts: {session_path}")
    with stage_lock(out):
        session = AnnotationSession.load(session_path)
        assignments = AssignmentSet.from_jsonl(out / "assignments.jsonl")
        windows = WindowSet.from_jsonl(out / "windows.jsonl")
        events = read_events_csv(out / "events.csv")
        hierarchy = default_hierarchy()
        label_map = cluster_majority_labels(session, hierarchy)
        for c in {int(x) for x in assignments.cluster_ids}:
            if c not in label_map.entries:
                label_map.entries[c] = ClusterLabelEntry(OTHER_LABEL, 0, 0)
        propagated = propagate(label_map, assignments)
        event_labels = reannotate_events(propagated, windows, events)

        map_json = out / "cluster_labels.json"
        with atomic_path(map_json) as tmp:
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump(label_map.to_json(), fh, indent=2, sort_keys=True)
        prop_csv = out / "propagated_windows.csv"
        with atomic_path(prop_csv) as tmp:
            with open(tmp, "w", encoding="utf-8", newline="") as fh:
                import csv as _csv

                writer = _csv.writer(fh)
                writer.writerow(["window_id", "day", "label", "confidence"])
                row_of = {int(w): i for i, w in enumerate(windows.window_id)}
                for wid, lab, conf in zip(
                    propagated.window_ids, propagated.labels, propagated.confidences
                ):
                    writer.writerow([int(wid), str(windows.day[row_of[int(wid)]]), lab, repr(float(conf))])
        events_csv = out / "reannotated_events.csv"
        with atomic_path(events_csv) as tmp:
            export_propagated_csv(tmp, events, event_labels)
        write_manifest(
            out, "propagate", cfg, inputs + [session_path], [map_json, prop_csv, events_csv]
        )
        covered = sum(1 for lab in event_labels if lab != "No Label")
        print(
            f"propagate: {len(propagated)} windows labeled, "
            f"{covered}/{len(events)} events labeled"
        )


def _split_days(out: Path) -> tuple[set, set]:
    with open(out / "split.json", "r", encoding="utf-8") as fh:
        plan = SplitPlan.from_json(json.load(fh))
    return plan.train_days, plan.test_days


def _evaluate_clustering(cfg, windows, truth, assignments, train_ids, test_ids):
    """Majority-vote map from train-day windows, scored on test-day windows."""
    row_of = {int(w): i for i, w in enumerate(windows.window_id)}
    asg_of = {int(w): i for i, w in enumerate(assignments.window_ids)}
    train_rows = [row_of[i] for i in train_ids]
    test_rows = [row_of[i] for i in test_ids]
    train_clusters = np.array([assignments.cluster_ids[asg_of[int(i)]] for i in train_ids])
    test_clusters = np.array([assignments.cluster_ids[asg_of[int(i)]] for i in test_ids])
    train_truth = [truth[r] for r in train_rows]
    test_truth = [truth[r] for r in test_rows]
    if cfg.exclude_no_label:
        keep_train = [i for i, t in enumerate(train_truth) if t != "No Label"]
        keep_test = [i for i, t in enumerate(test_truth) if t != "No Label"]
        train_clusters = train_clusters[keep_train]
        train_truth = [train_truth[i] for i in keep_train]
        test_clusters = test_clusters[keep_test]
        test_truth = [test_truth[i] for i in keep_test]
        test_rows = [test_rows[i] for i in keep_test]
    label_map = majority_vote_mapping(train_clusters, train_truth, n_clusters=assignments.k)
    predicted = [label_map.label_of(c) for c in test_clusters]
    test_days = [str(windows.day[r]) for r in test_rows]

    def per_day_macro(days):
        chosen = set(days)
        idx = [i for i, d in enumerate(test_days) if d in chosen]
        return f1_scores([predicted[i] for i in idx], [test_truth[i] for i in idx], "macro")

    mean, lo, hi = bootstrap_ci(
        per_day_macro,
        sorted(set(test_days)),
        replicates=cfg.bootstrap_replicates,
        seed=cfg.seed_for("bootstrap"),
    )
    return {
        "weighted_f1": f1_scores(predicted, test_truth, "weighted"),
        "macro_f1": f1_scores(predicted, test_truth, "macro"),
        "macro_f1_bootstrap": {"mean": mean, "lower95": lo, "upper95": hi},
        "n_test_windows": len(test_truth),
        "cluster_label_map": label_map.to_json(),
    }


def _rating_agreement(session: AnnotationSession, hierarchy) -> dict | None:
    """Cohen's kappa over double-rated samples and Fleiss per-cluster matrix,
    at both the original and leveled-up granularity."""
    pairs, pairs_up = [], []
    for s in session.samples:
        ratings = sorted(session.ratings_for(s.window_id).items())
        if len(ratings) >= 2:
            a, b = ratings[0][1], ratings[1][1]
            pairs.append((a, b))
            up = lambda lab: hierarchy.level_up(lab) if lab in hierarchy else lab
            pairs_up.append((up(a), up(b)))
    if not pairs:
        return None

    def fleiss_over_clusters(level_up: bool) -> float | None:
        by_cluster: dict[int, list[str]] = {}
        for s in session.samples:
            labs = list(session.ratings_for(s.window_id).values())
            if level_up:
                labs = [hierarchy.level_up(l) if l in hierarchy else l for l in labs]
            by_cluster.setdefault(s.cluster_id, []).extend(labs)
        counts = [labs for labs in by_cluster.values() if labs]
        sizes = {len(labs) for labs in counts}
        if len(sizes) != 1 or sizes == {1}:
            return None  # partial session: unequal rating counts per cluster
        categories = sorted({lab for labs in counts for lab in labs})
        table = np.zeros((len(counts), len(categories)), dtype=np.int64)
        for i, labs in enumerate(counts):
            for lab in labs:
                table[i, categories.index(lab)] += 1
        return fleiss_kappa(table)

    out = {
        "cohens_kappa": cohens_kappa(pairs),
        "cohens_kappa_level_up": cohens_kappa(pairs_up),
        "n_double_rated": len(pairs),
    }
    fk = fleiss_over_clusters(False)
    fk_up = fleiss_over_clusters(True)
    if fk is not None:
        out["fleiss_kappa"] = fk
        out["fleiss_kappa_level_up"] = fk_up
    return out


def cmd_evaluate(cfg: PipelineConfig, args) -> None:
    out = Path(cfg.out)
    inputs = _require(
        out, "assignments.jsonl", "windows.jsonl", "events.csv", "split.json", "sampled_ids.json"
    )
    with stage_lock(out):
        assignments = AssignmentSet.from_jsonl(out / "assignments.jsonl")
        windows = WindowSet.from_jsonl(out / "windows.jsonl")
        events = read_events_csv(out / "events.csv")
        ids = _load_ids(out)
        truth = unify_truth_labels(window_truth_labels(windows, events), cfg.dataset_name)
        metrics = {
            "dataset": cfg.dataset_name,
            "k": assignments.k,
            "scan": _evaluate_clustering(
                cfg, windows, truth, assignments, ids["train"], ids["test"]
            ),
        }
        kmeans_path = out / "kmeans_assignments.jsonl"
        if kmeans_path.exists():
            kmeans_assignments = AssignmentSet.from_jsonl(kmeans_path)
            metrics["kmeans"] = _evaluate_clustering(
                cfg, windows, truth, kmeans_assignments, ids["train"], ids["test"]
            )
            inputs = inputs + [kmeans_path]
        session_path = out / "sessions" / f"{args.session_id}.json"
        if session_path.exists():
            session = AnnotationSession.load(session_path)
            agreement = _rating_agreement(session, default_hierarchy())
            if agreement:
                metrics["rating_agreement"] = agreement
                inputs = inputs + [session_path]

        metrics_json = out / "metrics.json"
        with atomic_path(metrics_json) as tmp:
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump(metrics, fh, indent=2, sort_keys=True)
        metrics_csv = out / "metrics.csv"
        with atomic_path(metrics_csv) as tmp:
            with open(tmp, "w", encoding="utf-8", newline="") as fh:
                fh.write("metric,value\n")
                for method in ("scan", "kmeans"):
                    if method in metrics:
                        fh.write(f"{method}_weighted_f1,{metrics[method]['weighted_f1']!r}\n")
                        fh.write(f"{method}_macro_f1,{metrics[method]['macro_f1']!r}\n")
        write_manifest(out, "evaluate", cfg, inputs, [metrics_json, metrics_csv])
        line = f"evaluate: scan weighted F1 {metrics['scan']['weighted_f1']:.3f}"
        if "kmeans" in metrics:
            line += f", kmeans weighted F1 {metrics['kmeans']['weighted_f1']:.3f}"
        print(line)


def cmd_sweep_k(cfg: PipelineConfig, args) -> None:
    from .neighbors import NeighborGraph

    out = Path(cfg.out)
    inputs = _require(
        out, "encoder.bin", "graph.jsonl", "windows.jsonl", "events.csv",
        "split.json", "sampled_ids.json",
    )
    ks = [int(x) for x in args.ks.split(",")] if args.ks else list(DEFAULT_SWEEP_KS)
    with stage_lock(out):
        params, enc_cfg = load_params(out / "encoder.bin")
        windows = WindowSet.from_jsonl(out / "windows.jsonl")
        graph = NeighborGraph.from_jsonl(out / "graph.jsonl")
        events = read_events_csv(out / "events.csv")
        ids = _load_ids(out)
        truth = unify_truth_labels(window_truth_labels(windows, events), cfg.dataset_name)
        train_rows = _rows_for_ids(windows, graph.window_ids)
        train_tokens = windows.token_ids[train_rows]
        nbr_indices = graph.indices
        sampled_tokens_rows = _rows_for_ids(windows, ids["sampled"])

        rows = []
        for k in ks:
            scan_cfg = ScanConfig(
                entropy_weight=cfg.entropy_weight,
                epochs=cfg.scan_epochs,
                learning_rate=cfg.scan_learning_rate,
                batch_size=cfg.scan_batch_size,
                neighbors_per_anchor=cfg.neighbors_per_anchor,
                seed=cfg.seed_for("scan"),
            )
            tuned, head, _ = fine_tune_scan(
                params, enc_cfg, train_tokens, nbr_indices, k, scan_cfg
            )
            assignments = assign_all(
                tuned, enc_cfg, head,
                windows.token_ids[sampled_tokens_rows],
                windows.window_id[sampled_tokens_rows],
            )
            result = _evaluate_clustering(
                cfg, windows, truth, assignments, ids["train"], ids["test"]
            )
            ci = result["macro_f1_bootstrap"]
            rows.append((k, result["macro_f1"], ci["lower95"], ci["upper95"]))
            print(f"sweep-k: k={k} macro F1 {result['macro_f1']:.3f} "
                  f"[{ci['lower95']:.3f}, {ci['upper95']:.3f}]")
        sweep_csv = out / "sweep_k.csv"
        with atomic_path(sweep_csv) as tmp:
            with open(tmp, "w", encoding="utf-8", newline="") as fh:
                fh.write("k,macro_f1,ci_low,ci_high\n")
                for k, f1, lo, hi in rows:
                    fh.write(f"{k},{f1!r},{lo!r},{hi!r}\n")
        write_manifest(out, "sweep-k", cfg, inputs, [sweep_csv])


def _parse_period(text: str) -> tuple:
    import datetime as dt

    try:
        start_s, end_s = text.split(":")
        return dt.date.fromisoformat(start_s), dt.date.fromisoformat(end_s)
    except ValueError:
        raise SystemExit(f"bad period {text!r}; expected YYYY-MM-DD:YYYY-MM-DD") from None


def cmd_trends(cfg: PipelineConfig, args) -> None:
    out = Path(cfg.out)
    inputs = _require(out, "propagated_windows.csv", "windows.jsonl", "events.csv")
    p1 = _parse_period(args.period1)
    p2 = _parse_period(args.period2)
    with stage_lock(out):
        import csv as _csv

        discovered = []
        with open(out / "propagated_windows.csv", "r", encoding="utf-8", newline="") as fh:
            reader = _csv.reader(fh)
            next(reader)
            for row in reader:
                discovered.append((row[1], row[2]))
        windows = WindowSet.from_jsonl(out / "windows.jsonl")
        events = read_events_csv(out / "events.csv")
        truth = unify_truth_labels(window_truth_labels(windows, events), cfg.dataset_name)
        truth_pairs = [(str(d), t) for d, t in zip(windows.day, truth)]

        outputs = []
        for name, pairs in (("discovered", discovered), ("truth", truth_pairs)):
            d1 = period_distribution(pairs, *p1)
            d2 = period_distribution(pairs, *p2)
            delta = write_trend_report(out / f"trends_{name}", d1, d2)
            outputs += [out / f"trends_{name}.csv", out / f"trends_{name}.json"]
            top = delta.sorted_rows()[:3]
            print(f"trends ({name}): " + ", ".join(f"{lab} {d:+.1f}pp" for lab, d in top))
        write_manifest(out, "trends", cfg, inputs, outputs)


# ---------------------------------------------------------------- parser


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value configuration file")
    parser.add_argument("--out", help="run directory (default: run)")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--dataset", help="raw event log path (ingest input)")
    parser.add_argument("--dataset-name", dest="dataset_name", help="label-map key, e.g. milan")


_CONFIG_FLAGS = [
    ("--length", "length", int),
    ("--stride", "stride", int),
    ("--sample-fraction", "sample_fraction", float),
    ("--train-ratio", "train_ratio", float),
    ("--temperature-bin-width", "temperature_bin_width", float),
    ("--embed-dim", "embed_dim", int),
    ("--num-layers", "num_layers", int),
    ("--num-heads", "num_heads", int),
    ("--mask-fraction", "mask_fraction", float),
    ("--mlm-learning-rate", "mlm_learning_rate", float),
    ("--mlm-epochs", "mlm_epochs", int),
    ("--mlm-batch-size", "mlm_batch_size", int),
    ("--momentum", "momentum", float),
    ("--h", "h", int),
    ("--k", "k", int),
    ("--entropy-weight", "entropy_weight", float),
    ("--scan-learning-rate", "scan_learning_rate", float),
    ("--scan-epochs", "scan_epochs", int),
    ("--scan-batch-size", "scan_batch_size", int),
    ("--scan-momentum", "scan_momentum", float),
    ("--scan-restarts", "scan_restarts", int),
    ("--scan-warmup-epochs", "scan_warmup_epochs", int),
    ("--neighbors-per-anchor", "neighbors_per_anchor", int),
    ("--m", "m", int),
    ("--raters-per-sample", "raters_per_sample", int),
    ("--kmeans-max-iters", "kmeans_max_iters", int),
    ("--bootstrap-replicates", "bootstrap_replicates", int),
]


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for flag, dest, typ in _CONFIG_FLAGS:
        parser.add_argument(flag, dest=dest, type=typ)
    parser.add_argument("--drop-temperature", dest="drop_temperature", action="store_const", const=True)
    parser.add_argument("--exclude-no-label", dest="exclude_no_label", action="store_const", const=True)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pdlkit", description="Discover patterns of daily living in sensor logs"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    commands = {}

    def register(name, fn, extra=None):
        p = sub.add_parser(name)
        _add_common(p)
        _add_config_flags(p)
        if extra:
            extra(p)
        commands[name] = fn
        return p

    def synth_extra(p):
        p.add_argument("--days", type=int, default=10)
        p.add_argument("--events-per-day", dest="events_per_day", type=int, default=500)
        p.add_argument("--total-events", dest="total_events", type=int, default=None)

    def session_extra(p):
        p.add_argument("--session-id", dest="session_id", default="session")

    def serve_extra(p):
        p.add_argument("--host", default="127.0.0.1")
        p.add_argument("--port", type=int, default=8000)

    def sweep_extra(p):
        p.add_argument("--ks", help="comma-separated cluster counts")

    def trends_extra(p):
        p.add_argument("--period1", required=True, help="YYYY-MM-DD:YYYY-MM-DD")
        p.add_argument("--period2", required=True, help="YYYY-MM-DD:YYYY-MM-DD")

    register("synth", cmd_synth, synth_extra)
    register("ingest", cmd_ingest)
    register("pretrain", cmd_pretrain)
    register("neighbors", cmd_neighbors)
    register("cluster", cmd_cluster)
    register("kmeans", cmd_kmeans)
    register("centroids", cmd_centroids, session_extra)
    register("serve", cmd_serve, serve_extra)
    register("rate", cmd_rate, session_extra)
    register("propagate", cmd_propagate, session_extra)
    register("evaluate", cmd_evaluate, session_extra)
    register("sweep-k", cmd_sweep_k, sweep_extra)
    register("trends", cmd_trends, trends_extra)

    args = parser.parse_args(argv)
    cfg = build_config(args)
    commands[args.command](cfg, args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
