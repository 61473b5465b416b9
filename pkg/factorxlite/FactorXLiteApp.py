######################################################################################################
# FactorXLite - A factorization-centralization toolkit for rehearsal-free continual learning
# Copyright (C) 2025 FactorXLite contributors
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE. See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program. If not, see <https://www.gnu.org/licenses/>.
######################################################################################################


import argparse
import json
import os
import sys
from collections import Counter

from .config import INFO
from .LearningAPI.p000_utility import (
    CheckpointFormatError, ConfigError, SuiteMismatchError, atomic_write_text, factorx_log,
)
from .LearningAPI.p006_evaluation import RunReport, merge_reports, published_reference_note, transfer_scores
from .LearningAPI.p008_continual import ContinualExperiment
from .LearningAPI.p008_continual.p008_04_experiment_io import load_report, report_csv_text, write_json
from .UtilityAPI.RunConfigAPI import METHODS, load_run_config
from .UtilityCode.GraphPlotter import create_factorx_report_plots


EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING_CHECKPOINT = 3
EXIT_SUITE_MISMATCH = 4

KB_FILENAME = "knowledge_base.clkb"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="factorxlite",
        description=f"{INFO['name']} {INFO['version']}: factorization-centralization continual learning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    pretrain = sub.add_parser("pretrain", help="Pretrain the knowledge base on the monolingual mixture")
    pretrain.add_argument("--config", help="JSON run configuration (defaults when omitted)")
    pretrain.add_argument("--output", help=f"Checkpoint path (default <output_dir>/{KB_FILENAME})")

    stream = sub.add_parser("stream", help="Run a continual-learning method over the stream")
    stream.add_argument("--config", help="JSON run configuration (defaults when omitted)")
    stream.add_argument("--checkpoint", help=f"Pretrained knowledge base (default <output_dir>/{KB_FILENAME})")
    stream.add_argument("--method", choices=METHODS, help="Method to run (default from the configuration)")
    stream.add_argument("--k", type=int, dest="K", help="Centralization period")
    stream.add_argument("--merge-base", choices=("current", "original"), help="Knowledge base the average is merged into")
    stream.add_argument("--run-dir", help="Output directory of this run")
    stream.add_argument("--resume", action="store_true", help="Continue an interrupted centralized run")

    report = sub.add_parser("report", help="Compare completed runs")
    report.add_argument("run_dirs", nargs="+", help="Run directories (or report.json files)")
    report.add_argument("--output", help="Directory for comparison tables and plots (default: first run dir)")
    report.add_argument("--no-plots", action="store_true", help="Skip image output")
    return parser


def cmd_pretrain(args) -> int:
    config = load_run_config(args.config)
    experiment = ContinualExperiment(config)
    output = args.output or os.path.join(experiment.output_dir, KB_FILENAME)
    _, record, row = experiment.pretrain(checkpoint_path=output)
    write_json(os.path.splitext(output)[0] + "_eval.json", {
        "backward": row,
        "training": record.to_dict(),
        "suite_fingerprint": experiment.suite.fingerprint(),
    })
    return EXIT_OK


def cmd_stream(args) -> int:
    config = load_run_config(args.config)
    experiment = ContinualExperiment(config)
    checkpoint = args.checkpoint or os.path.join(experiment.output_dir, KB_FILENAME)
    if not os.path.exists(checkpoint):
        factorx_log(f"Knowledge base checkpoint '{checkpoint}' not found; run 'factorxlite pretrain' first", 'error')
        return EXIT_MISSING_CHECKPOINT
    experiment.load_knowledge_base(checkpoint)
    report = experiment.run(method=args.method, K=args.K, merge_base=args.merge_base,
                            run_dir=args.run_dir, resume=args.resume)
    final = report.forward.rows[-1]
    factorx_log(f"Finished '{report.method}': final row '{final}', forward AVG {report.forward.avg(final):.4f}, "
                f"backward AVG {report.backward.avg(final):.4f}")
    return EXIT_OK


def _labels(reports: list[RunReport]) -> list[str]:
    counts = Counter(r.method for r in reports)
    seen = Counter()
    labels = []
    for r in reports:
        seen[r.method] += 1
        labels.append(r.method if counts[r.method] == 1 else f"{r.method}-{seen[r.method]}")
    return labels


def cmd_report(args) -> int:
    reports = [load_report(path) for path in args.run_dirs]
    labels = _labels(reports)
    forward, backward = merge_reports(reports, labels)

    ceiling = next((r for r in reports if r.method == "ceiling"), None)
    scores = {label: transfer_scores(r, ceiling=ceiling if r is not ceiling else None)
              for label, r in zip(labels, reports)}
    note = published_reference_note()

    first = args.run_dirs[0]
    output = args.output or (first if os.path.isdir(first) else os.path.dirname(os.path.abspath(first)))
    os.makedirs(output, exist_ok=True)
    write_json(os.path.join(output, "comparison.json"), {
        "runs": labels,
        "forward": forward.to_dict(),
        "backward": backward.to_dict(),
        "transfer_scores": scores,
        "notes": [note],
    })
    merged = RunReport("comparison", {}, forward, backward)
    atomic_write_text(os.path.join(output, "comparison.csv"), report_csv_text(merged))
    if not args.no_plots:
        create_factorx_report_plots(list(zip(labels, reports)), os.path.join(output, "plots"))

    for label in labels:
        s = scores[label]
        improvement = "undefined" if s["relative_improvement"] is None else f"{s['relative_improvement'] * 100:.1f}%"
        transfer = "undefined" if s["backward_transfer"] is None else f"{s['backward_transfer'] * 100:.1f}%"
        print(f"{label:>16} | forward AVG {s['forward_avg']['model']:.4f} | backward AVG {s['backward_avg']['model']:.4f}"
              f" | relative improvement {improvement} | backward transfer {transfer}")
    print(note)
    return EXIT_OK


COMMANDS = {"pretrain": cmd_pretrain, "stream": cmd_stream, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, json.JSONDecodeError) as error:
        factorx_log(f"Configuration error: {error}", 'error')
        return EXIT_CONFIG
    except CheckpointFormatError as error:
        factorx_log(f"Checkpoint error: {error}", 'error')
        return EXIT_MISSING_CHECKPOINT
    except SuiteMismatchError as error:
        factorx_log(f"Incompatible runs: {error}", 'error')
        return EXIT_SUITE_MISMATCH
    except FileNotFoundError as error:
        factorx_log(f"File not found: {error}", 'error')
        return EXIT_CONFIG
    except Exception as error:
        factorx_log(f"{type(error).__name__}: {error}", 'error')
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
