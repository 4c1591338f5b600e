"""A run of every CLI command on a small synthetic data set."""

from __future__ import annotations

from pathlib import Path

from riskpipe.cli import main


def commands(out: Path, threads: int) -> list[list[str]]:
    s = out / "synth"
    j, d = str(s / "journeys.csv"), str(s / "drivers.csv")
    small = ["--drivers", "150", "--mean-journeys", "6", "--claim-rate", "0.2"]
    run = ["--seed", "3", "--threads", str(threads), "--log-level", "ERROR"]
    return [
        ["synth", *small, "--out", str(s), *run],
        ["widen", "--input", j, "--out", str(out / "wide.csv"), *run],
        ["sample", "--input", d, "--out", str(out / "sampled.csv"), *run],
        ["train", "--task", "driver", "--pipeline", "stack", "--drivers-csv", d, "--out", str(out / "stack.json"),
         *run],
        ["train", "--task", "driver", "--pipeline", "logistic", *small, "--out", str(out / "logistic.json"), *run],
        ["train", "--task", "journey", "--pipeline", "combined", "--journeys", j, "--drivers-csv", d,
         "--inner-k", "2", "--out", str(out / "combined.json"), *run],
        ["cv", "--task", "driver", "--pipeline", "stack", "--k", "5", "--drivers-csv", d,
         "--out", str(out / "cv_driver"), *run],
        ["cv", "--task", "journey", "--pipeline", "combined", "--k", "3", "--inner-k", "2", "--journeys", j,
         "--drivers-csv", d, "--out", str(out / "cv_combined"), *run],
        ["select-features", "--journeys", j, "--top", "10", "--out", str(out / "features.json"), *run],
        ["demo-imbalance", "--n", "300", "--out", str(out / "demo"), *run],
    ]


def run_all(out: Path, threads: int) -> dict[str, bytes]:
    """Run every command into ``out``; return the bytes of each written file by relative path."""
    for argv in commands(out, threads):
        code = main(argv)
        if code != 0:
            raise AssertionError(f"exit {code}: {' '.join(argv)}")
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
