import csv
from collections import defaultdict

import numpy as np
import pytest
from matplotlib import image as mpimg

from protolang.errors import ConfigurationError
from protolang.report import emit_report, format_table, sweep_series
from protolang.training import MetricsReport


def _report(name, seed, n=30, param=None, value=None, rng=None):
    rng = rng or np.random.default_rng(seed)
    extra = {"param": param, "value": value} if param else {}
    curves = {"epi": [1.6, 1.2, 1.0], "lang": [30.0, 10.0, 8.0], "train": [601.6, 201.2, 161.0],
              "val_accuracy": [0.3, 0.4, 0.45]}
    return MetricsReport(name, rng.uniform(0, 1, n).round(4).tolist(), curves, {"lam": 20}, seed, extra)


def test_empty_set_is_error(tmp_path):
    with pytest.raises(ConfigurationError):
        emit_report([], tmp_path)


def test_single_report_one_row(tmp_path):
    paths = emit_report([_report("rs", 0)], tmp_path)
    lines = paths["table"].read_text().splitlines()
    assert len(lines) == 3 and lines[2].startswith("rs")
    assert paths["summary"].exists() and paths["per_task"].exists()
    assert (tmp_path / "curves_rs.png").exists()


def test_desc_count_sweep_plot(tmp_path):
    counts = [1, 2, 5, 10, 15, 20, 25]
    reports = [_report(f"descs_{n}", 0, param="descs_per_class", value=n) for n in counts]
    paths = emit_report(reports, tmp_path, "sweep")
    xs, means, cis = sweep_series(reports, "descs_per_class")
    assert xs == counts and len(means) == 7 and len(cis) == 7
    sweep_plots = [p for p in paths["plots"] if p.name.startswith("sweep_")]
    assert [p.name for p in sweep_plots] == ["sweep_descs_per_class.png"]
    assert mpimg.imread(sweep_plots[0]).ndim == 3


def test_table_means_match_independent_recompute(tmp_path):
    reports = [_report("baseline", s) for s in range(3)] + [_report("rs", 10 + s) for s in range(3)]
    paths = emit_report(reports, tmp_path)
    pooled = defaultdict(list)
    with open(paths["per_task"]) as fh:
        for row in csv.DictReader(fh):
            pooled[row["method"]].append(float(row["accuracy"]))
    table = {}
    for line in paths["table"].read_text().splitlines()[2:]:
        cells = line.split()
        table[cells[0]] = float(cells[3])
    for name, accs in pooled.items():
        assert table[name] == pytest.approx(round(100 * sum(accs) / len(accs), 2), abs=1e-9)
    with open(paths["summary"]) as fh:
        for row in csv.DictReader(fh):
            per_seed = [r for r in reports if r.name == row["method"] and r.seed == int(row["seed"])][0]
            assert float(row["mean"]) == pytest.approx(sum(per_seed.accuracies) / len(per_seed.accuracies), abs=1e-6)


def test_format_table_pools_seeds():
    reports = [MetricsReport("a", [1.0, 0.0], seed=0), MetricsReport("a", [1.0, 1.0], seed=1)]
    row = format_table(reports).splitlines()[2].split()
    assert row[:5] == ["a", "0,1", "4", "75.00", f"{100 * 1.96 * np.std([1, 0, 1, 1], ddof=1) / 2:.2f}"]
