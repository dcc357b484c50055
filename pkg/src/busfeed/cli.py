"""Command line: simulate, clean, train, evaluate, predict, export and validate."""

from __future__ import annotations

import argparse
import csv
import hashlib
import sys
from dataclasses import fields, replace
from datetime import datetime
from pathlib import Path
from typing import Optional, Sequence

from . import geo, gtfs, ingest, neuralnet, predictor, simulator, transitgraph
from .config import PipelineConfig, load_config, scenario_from
from .domain import BusStop, FeatureTuple


class StageError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, cfg: PipelineConfig,
                    inputs: Sequence[Path], outputs: Sequence[Path]) -> Path:
    lines = [f"command={command}"]
    for field in sorted(fields(cfg), key=lambda f: f.name):
        value = getattr(cfg, field.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"config.{field.name}={value}")
    for path in inputs:
        lines.append(f"input {path.name} sha256={_sha256(path)}")
    for path in outputs:
        lines.append(f"output {path.name} sha256={_sha256(path)}")
    lines.append(f"wall_clock={datetime.now().isoformat(timespec='seconds')}")
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def _read_stops_csv(path: Path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for column in ("stop_id", "name", "latitude", "longitude"):
            if column not in (reader.fieldnames or []):
                raise ValueError(f"{path} is missing column {column}")
        return [BusStop(stop_id=row["stop_id"], name=row["name"],
                        latitude=float(row["latitude"]),
                        longitude=float(row["longitude"]))
                for row in reader]


def _ratios(cfg: PipelineConfig) -> ingest.SplitRatios:
    return ingest.SplitRatios(train=cfg.train_ratio, validation=cfg.val_ratio,
                              test=cfg.test_ratio)


def _train_config(cfg: PipelineConfig) -> neuralnet.TrainConfig:
    return neuralnet.TrainConfig(batch_size=cfg.batch_size,
                                 hidden_size=cfg.hidden_size,
                                 learning_rate=cfg.learning_rate,
                                 epochs=cfg.epochs, seed=cfg.seed,
                                 mode=cfg.mode, k=cfg.k)


def _blocks(cfg: PipelineConfig, records, stops=None) -> list:
    window_cfg = ingest.WindowConfig(k=cfg.k, stride=cfg.stride,
                                     max_gap=cfg.max_gap_s)
    if cfg.mode == "stop":
        if stops is None:
            raise ValueError("stop mode needs a stops file (--stops)")
        pairs = ingest.inject_stop_labels(records, stops,
                                          radius_m=cfg.stop_label_radius_m)
        return ingest.window(pairs, window_cfg)
    return ingest.window(records, window_cfg)


# ---------------------------------------------------------------------------
# Stages. Each returns the list of files it wrote.

def _stage_simulate(cfg: PipelineConfig, out: Path) -> list:
    scenario = scenario_from(cfg)
    records, truth = simulator.simulate(scenario)
    records_path = out / "records.csv"
    with records_path.open("w", encoding="utf-8", newline="") as fh:
        ingest.write_records_csv(fh, records)
    stops_path = out / "truth_stops.csv"
    with stops_path.open("w", encoding="utf-8", newline="") as fh:
        simulator.write_truth_stops(fh, truth.stops)
    trips_path = out / "truth_trips.csv"
    with trips_path.open("w", encoding="utf-8", newline="") as fh:
        simulator.write_truth_trips(fh, truth.trips)
    tags_path = out / "tags.csv"
    tags_path.write_text("tag\n" + "".join(t + "\n" for t in truth.tags),
                         encoding="utf-8")
    print(f"simulated {len(records)} records from "
          f"{sum(scenario.buses_per_route)} buses")
    return [records_path, stops_path, trips_path, tags_path]


def _stage_clean(cfg: PipelineConfig, records_path: Path, out: Path) -> list:
    records, _ = ingest.parse_csv(str(records_path))
    kept, report = ingest.clean(records)
    cleaned_path = out / "cleaned.csv"
    with cleaned_path.open("w", encoding="utf-8", newline="") as fh:
        ingest.write_records_csv(fh, kept)
    report_path = out / "cleaning_report.txt"
    report_path.write_text(report.to_text(), encoding="utf-8")
    print(report.to_text(), end="")
    return [cleaned_path, report_path]


def _tuples_of(blocks) -> list:
    tuples = []
    for block in blocks:
        tuples.extend(block.features)
        tuples.append(block.label_tuple)
    return tuples


def _stage_train(cfg: PipelineConfig, records_path: Path,
                 stops_path: Optional[Path], out: Path) -> list:
    records, _ = ingest.parse_csv(str(records_path))
    stops = _read_stops_csv(stops_path) if stops_path else None
    blocks = _blocks(cfg, records, stops)
    train_blocks, val_blocks, _ = ingest.split(blocks, _ratios(cfg), cfg.seed)
    scaler = ingest.fit_scaler(_tuples_of(train_blocks))
    scaled_train = [ingest.scale_block(b, scaler) for b in train_blocks]
    scaled_val = [ingest.scale_block(b, scaler) for b in val_blocks]
    params, trace = neuralnet.train(scaled_train, scaled_val, _train_config(cfg))
    model = predictor.Model(params=params, scaler=scaler,
                            config=_train_config(cfg))
    model_path = out / "model.bin"
    model_path.write_bytes(model.to_bytes())
    trace_path = out / "loss_trace.csv"
    with trace_path.open("w", encoding="utf-8", newline="") as fh:
        trace.write_csv(fh)
    if trace.train_losses:
        print(f"trained {cfg.epochs} epochs on {len(scaled_train)} blocks, "
              f"final val loss {trace.val_losses[-1]:.3e}")
    return [model_path, trace_path]


def _declared_stop_predictions(test_blocks, model) -> list:
    windows = [block.features for block in test_blocks]
    return [(point, p) for point, p in predictor.predict_stops(windows, model)
            if p > 0.5]


def _write_stop_errors(stream, declared, stops) -> None:
    stream.write("pred_lat,pred_lon,p_stop,nearest_stop_id,true_lat,true_lon,"
                 "error_m\n")
    for point, p in declared:
        nearest = min(stops, key=lambda s: geo.distance_m(
            point.lat, point.lon, s.latitude, s.longitude))
        error = geo.distance_m(point.lat, point.lon,
                               nearest.latitude, nearest.longitude)
        stream.write(f"{point.lat!r},{point.lon!r},{p!r},{nearest.stop_id},"
                     f"{nearest.latitude!r},{nearest.longitude!r},{error!r}\n")


def _stage_evaluate(cfg: PipelineConfig, records_path: Path, model_path: Path,
                    stops_path: Optional[Path], out: Path) -> list:
    model = predictor.Model.from_bytes(Path(model_path).read_bytes())
    records, _ = ingest.parse_csv(str(records_path))
    stops = _read_stops_csv(stops_path) if stops_path else None
    mode = "stop" if model.stop_mode else "regression"
    blocks = _blocks(replace(cfg, k=model.config.k, mode=mode), records, stops)
    _, _, test_blocks = ingest.split(blocks, _ratios(cfg), cfg.seed)
    report = predictor.evaluate(test_blocks, model)

    # The latency line is a wall-clock measurement, so it goes to stdout
    # only; files must be byte-identical across reruns.
    full_text = report.to_text()
    stable = "".join(line + "\n" for line in full_text.splitlines()
                     if not line.startswith("mean_latency_s"))
    report_path = out / "eval_report.txt"
    report_path.write_text(stable, encoding="utf-8")
    pv_path = out / "pred_vs_real.csv"
    with pv_path.open("w", encoding="utf-8", newline="") as fh:
        report.write_pred_vs_real(fh)
    print(full_text, end="")
    outputs = [report_path, pv_path]
    if model.stop_mode and stops:
        se_path = out / "stop_errors.csv"
        with se_path.open("w", encoding="utf-8", newline="") as fh:
            _write_stop_errors(fh, _declared_stop_predictions(test_blocks, model),
                               stops)
        outputs.append(se_path)
    return outputs


def _stage_predict(cfg: PipelineConfig, records_path: Path, model_path: Path,
                   steps: int, out: Path) -> list:
    model = predictor.Model.from_bytes(Path(model_path).read_bytes())
    records, _ = ingest.parse_csv(str(records_path))
    if not records:
        raise ValueError("no records to seed the rollout")
    records.sort(key=lambda r: (r.unit_id, r.timestamp))
    unit_id = records[0].unit_id
    trace = [r for r in records if r.unit_id == unit_id]
    if len(trace) < model.window_length:
        raise ValueError(f"unit {unit_id} has {len(trace)} records, need "
                         f"{model.window_length} to seed a window")
    window = tuple(FeatureTuple.from_record(r)
                   for r in trace[-model.window_length:])
    request = predictor.PredictionRequest(window, steps_ahead=steps)
    points = predictor.rollout(request, model)
    rollout_path = out / "rollout.csv"
    with rollout_path.open("w", encoding="utf-8", newline="") as fh:
        fh.write("step,lat,lon,speed\n")
        for i, point in enumerate(points, 1):
            fh.write(f"{i},{point.lat!r},{point.lon!r},{point.sp!r}\n")
    print(f"rolled out {steps} steps for unit {unit_id}")
    return [rollout_path]


def _stage_export(cfg: PipelineConfig, records_path: Path, out: Path) -> list:
    records, _ = ingest.parse_csv(str(records_path))
    graph = transitgraph.build_transit_graph(
        records,
        cluster_radius_m=cfg.cluster_radius_m,
        min_cluster_size=cfg.min_cluster_size,
        dwell_threshold_s=cfg.dwell_threshold_s,
        stop_radius_m=cfg.stop_radius_m,
        max_gap_s=cfg.max_gap_s,
        min_route_share=cfg.min_route_share)
    feed = gtfs.build_feed(graph)
    zip_path = out / "gtfs.zip"
    zip_path.write_bytes(gtfs.package(feed))
    print(f"exported {len(graph.routes)} routes, {len(graph.trips)} trips, "
          f"{len(graph.stops)} stops")
    return [zip_path]


def _stage_validate(feed_path: Path, out: Path) -> tuple:
    feed = gtfs.parse_feed(feed_path)
    report = gtfs.validate(feed)
    text = report.to_text()
    validation_path = out / "validation.txt"
    validation_path.write_text(text, encoding="utf-8")
    print(text, end="")
    return report, [validation_path]


# ---------------------------------------------------------------------------
# Command plumbing.

def _effective_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    overrides = {}
    for flag, field in (("seed", "seed"), ("mode", "mode"), ("k", "k"),
                        ("stride", "stride"), ("epochs", "epochs"),
                        ("lr", "learning_rate"), ("batch", "batch_size"),
                        ("hidden", "hidden_size")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field] = value
    return replace(cfg, **overrides)


def _run_stage(name: str, fn, *args):
    try:
        return fn(*args)
    except Exception as exc:
        raise StageError(f"stage {name} failed: {exc}") from exc


def _cmd_simulate(args, cfg, out):
    outputs = _run_stage("simulate", _stage_simulate, cfg, out)
    _write_manifest(out, "simulate", cfg, [], outputs)
    return 0


def _cmd_clean(args, cfg, out):
    outputs = _run_stage("clean", _stage_clean, cfg, args.records, out)
    _write_manifest(out, "clean", cfg, [args.records], outputs)
    return 0


def _cmd_train(args, cfg, out):
    outputs = _run_stage("train", _stage_train, cfg, args.records, args.stops, out)
    inputs = [args.records] + ([args.stops] if args.stops else [])
    _write_manifest(out, "train", cfg, inputs, outputs)
    return 0


def _cmd_evaluate(args, cfg, out):
    outputs = _run_stage("evaluate", _stage_evaluate, cfg, args.records,
                         args.model, args.stops, out)
    inputs = [args.records, args.model] + ([args.stops] if args.stops else [])
    _write_manifest(out, "evaluate", cfg, inputs, outputs)
    return 0


def _cmd_predict(args, cfg, out):
    outputs = _run_stage("predict", _stage_predict, cfg, args.records,
                         args.model, args.steps, out)
    _write_manifest(out, "predict", cfg, [args.records, args.model], outputs)
    return 0


def _cmd_export(args, cfg, out):
    outputs = _run_stage("export-gtfs", _stage_export, cfg, args.records, out)
    _write_manifest(out, "export-gtfs", cfg, [args.records], outputs)
    return 0


def _cmd_validate(args, cfg, out):
    report, outputs = _run_stage("validate-gtfs", _stage_validate, args.feed, out)
    _write_manifest(out, "validate-gtfs", cfg, [args.feed], outputs)
    return 0 if report.is_valid else 1


def _cmd_pipeline(args, cfg, out):
    outputs = _run_stage("simulate", _stage_simulate, cfg, out)
    records_path = out / "records.csv"
    truth_stops = out / "truth_stops.csv"
    outputs += _run_stage("clean", _stage_clean, cfg, records_path, out)
    cleaned = out / "cleaned.csv"
    stops_path = truth_stops if cfg.mode == "stop" else None
    outputs += _run_stage("train", _stage_train, cfg, cleaned, stops_path, out)
    model_path = out / "model.bin"
    outputs += _run_stage("evaluate", _stage_evaluate, cfg, cleaned, model_path,
                          stops_path, out)
    outputs += _run_stage("predict", _stage_predict, cfg, cleaned, model_path,
                          args.steps, out)
    outputs += _run_stage("export-gtfs", _stage_export, cfg, cleaned, out)
    report, validation_outputs = _run_stage("validate-gtfs", _stage_validate,
                                            out / "gtfs.zip", out)
    outputs += validation_outputs
    _write_manifest(out, "pipeline", cfg, [], outputs)
    if not report.is_valid:
        raise StageError(f"stage validate-gtfs failed: "
                         f"{len(report.errors)} validation errors")
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "clean": _cmd_clean,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "predict": _cmd_predict,
    "export-gtfs": _cmd_export,
    "validate-gtfs": _cmd_validate,
    "pipeline": _cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="busfeed",
        description="Reconstruct GTFS transit feeds from raw bus GPS traces.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--mode", choices=("regression", "stop"))
        p.add_argument("--k", type=int, help="block length (k-1 inputs + label)")
        p.add_argument("--stride", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float, dest="lr")
        p.add_argument("--batch", type=int)
        p.add_argument("--hidden", type=int)
        p.add_argument("--out", type=Path, default=Path("out"))

    common(sub.add_parser("simulate", help="generate a synthetic fleet trace"))

    p = sub.add_parser("clean", help="drop duplicate and glitched rows")
    common(p)
    p.add_argument("--records", type=Path, required=True)

    p = sub.add_parser("train", help="train the prediction network")
    common(p)
    p.add_argument("--records", type=Path, required=True)
    p.add_argument("--stops", type=Path, help="stops CSV for stop-mode labels")

    p = sub.add_parser("evaluate", help="held-out accuracy and latency")
    common(p)
    p.add_argument("--records", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--stops", type=Path)

    p = sub.add_parser("predict", help="multi-step rollout from the last window")
    common(p)
    p.add_argument("--records", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--steps", type=int, default=20)

    p = sub.add_parser("export-gtfs", help="infer the network and write gtfs.zip")
    common(p)
    p.add_argument("--records", type=Path, required=True)

    p = sub.add_parser("validate-gtfs", help="structural checks on a feed")
    common(p)
    p.add_argument("feed", type=Path)

    p = sub.add_parser("pipeline", help="all stages in order")
    common(p)
    p.add_argument("--steps", type=int, default=20)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _effective_config(args)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](args, cfg, out)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
