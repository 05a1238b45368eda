import csv
import math

import pytest
import yaml

from cinerecon import ablation
from cinerecon.ablation import (Cell, ExperimentMatrix, bypass_variant, components_matrix, fusion_matrix,
                                load_matrix, propagation_matrix, run_matrix)
from cinerecon.config import ConfigError
from cinerecon.model import build_model
from conftest import tiny_config


def quick_base(**kw):
    return tiny_config(**{"train.max_steps": 2, "data.synthetic_subjects": [1, 1, 3], **kw})


def test_duplicate_names_rejected():
    with pytest.raises(ConfigError, match="duplicate"):
        ExperimentMatrix("m", quick_base(), [Cell("a"), Cell("a", {"mgda.enabled": False})])


def test_unknown_override_key_rejected():
    with pytest.raises(ConfigError, match="mgda.propogation"):
        ExperimentMatrix("m", quick_base(), [Cell("a", {"mgda.propogation": "FOGP"})])


def test_invalid_override_value_rejected():
    with pytest.raises(ConfigError, match="mgda.propagation"):
        ExperimentMatrix("m", quick_base(), [Cell("a", {"mgda.propagation": "XOGP"})])


def test_pairs_must_name_cells():
    with pytest.raises(ConfigError, match="pair"):
        ExperimentMatrix("m", quick_base(), [Cell("a")], pairs=[("a", "b")])


def test_bypass_variant():
    base = quick_base()
    assert bypass_variant(base) == base
    both = bypass_variant(base, "mgda", "mrf")
    assert not both.mgda.enabled and not both.mrf.enabled
    with pytest.raises(ConfigError):
        bypass_variant(base, "knet")


@pytest.mark.parametrize("builder,rows", [(components_matrix, 3), (propagation_matrix, 2), (fusion_matrix, 3)])
def test_every_table_row_is_constructible(builder, rows):
    m = builder(quick_base())
    assert len(m.cells) == rows
    for acc in m.accelerations:
        for i in range(rows):
            cfg = m.cell_config(i, acc)
            assert cfg.data.acceleration == acc and cfg.train.seed == 0
            build_model(cfg)


def test_table_rows_have_the_intended_switches():
    comp = components_matrix(quick_base())
    cfgs = {c.name: comp.cell_config(i, 4) for i, c in enumerate(comp.cells)}
    assert cfgs["MGDA"].mgda.enabled and not cfgs["MGDA"].mrf.enabled
    assert not cfgs["MRF"].mgda.enabled and cfgs["MRF"].mrf.enabled
    fus = fusion_matrix(quick_base())
    assert fus.cell_config(1, 4).mrf.block_types == ("attention",) * 3


def test_run_matrix_outputs(tmp_path):
    m = propagation_matrix(quick_base(), accelerations=(4.0, 8.0))
    res = run_matrix(m, out_root=tmp_path)
    assert [(r.cell, r.acceleration, r.status) for r in res.rows] == [
        ("FOGP", 4.0, "ok"), ("SOGP", 4.0, "ok"), ("FOGP", 8.0, "ok"), ("SOGP", 8.0, "ok")]
    assert all(r.report.count == 3 for r in res.rows)
    assert set(res.p_values) == {("FOGP", "SOGP", 4.0), ("FOGP", "SOGP", 8.0)}
    assert all(0 <= p <= 1 for p in res.p_values.values())
    root = tmp_path / "propagation"
    with open(root / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and rows[0]["cell"] == "FOGP"
    table = (root / "results.txt").read_text()
    assert table.index("PSNR") < table.index("SSIM") < table.index("NMSE")
    assert "4x" in table and "8x" in table
    for cell in ("FOGP", "SOGP"):
        assert (root / cell / "x4" / "metrics.csv").exists()
        assert (root / cell / "x8" / "best.pt").exists()


def test_failed_cell_is_recorded_and_matrix_continues(tmp_path, monkeypatch):
    real = ablation.build_model

    def flaky(cfg, seed=None):
        if cfg.mgda.propagation == "FOGP":
            raise RuntimeError("simulated failure")
        return real(cfg, seed)

    monkeypatch.setattr(ablation, "build_model", flaky)
    res = run_matrix(propagation_matrix(quick_base(), accelerations=(4.0,)), out_root=tmp_path)
    assert res.row("FOGP", 4.0).status == "failed"
    assert "simulated failure" in res.row("FOGP", 4.0).error
    assert res.row("SOGP", 4.0).status == "ok"
    assert math.isnan(res.p_values[("FOGP", "SOGP", 4.0)])
    assert (tmp_path / "propagation" / "FOGP" / "x4" / "error.txt").exists()
    assert "failed" in res.format_table()


def test_matrix_execution_is_reproducible(tmp_path):
    m = propagation_matrix(quick_base(), accelerations=(4.0,))
    a = run_matrix(m, out_root=tmp_path / "a")
    b = run_matrix(m, out_root=tmp_path / "b")
    assert (tmp_path / "a/propagation/results.csv").read_text() == \
        (tmp_path / "b/propagation/results.csv").read_text()
    assert a.p_values == b.p_values


def test_load_matrix_file(tmp_path):
    quick_base().save(tmp_path / "base.yaml")
    (tmp_path / "m.yaml").write_text(yaml.safe_dump({
        "name": "t4", "base_config": "base.yaml", "base": {"train": {"max_steps": 1}},
        "accelerations": [4], "cells": [{"name": "FOGP", "overrides": {"mgda.propagation": "FOGP"}},
                                        {"name": "SOGP", "overrides": {"mgda.propagation": "SOGP"}}],
        "pairs": [["FOGP", "SOGP"]]}))
    m = load_matrix(tmp_path / "m.yaml")
    assert m.base.train.max_steps == 1 and m.accelerations == (4.0,)
    assert [c.name for c in m.cells] == ["FOGP", "SOGP"]
    (tmp_path / "bad.yaml").write_text(yaml.safe_dump({"name": "x", "cells": [], "extra": 1}))
    with pytest.raises(ConfigError):
        load_matrix(tmp_path / "bad.yaml")
