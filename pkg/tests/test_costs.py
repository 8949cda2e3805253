import dataclasses
import json
import os

import pytest
from hypothesis import given, strategies as st

from glimmer import block_variant_config, build, desk_config, paper_config_aiderv2, tinyimagenet_config
from glimmer.costs import (
    PUBLISHED, CostReport, count_flops, count_params, price, reconciliation_report, summary,
    summary_jsonl, verify_counts,
)

DOCS = os.path.join(os.path.dirname(__file__), os.pardir, "docs", "counts_reconciliation.md")

CONFIGS = {
    "flagship": paper_config_aiderv2(),
    "4321": block_variant_config((4, 3, 2, 1)),
    "4221": block_variant_config((4, 2, 2, 1)),
    "1111": block_variant_config((1, 1, 1, 1)),
    "tinyimagenet": tinyimagenet_config(),
}


def test_depthwise_and_grouped_pointwise_weight_counts():
    model = build(paper_config_aiderv2())
    assert model.store["stage1.block1.dwconv.weight"].size == 360
    # stage 3 aggregator: 160 ch -> 320 interleaved, 40 groups of 8, out 240
    assert model.store["stage3.agg.pwconv.weight"].size == 40 * 8 * 6
    # 320 interleaved in, 160 out, 40 groups: 40 * 8 * 4
    cfg = dataclasses.replace(paper_config_aiderv2(), stage_widths=(40, 80, 160, 160))
    assert build(cfg).store["stage3.agg.pwconv.weight"].size == 1280


@pytest.mark.parametrize("name", sorted(CONFIGS))
def test_counts_match_allocation(name):
    cfg = CONFIGS[name]
    ok, diffs = verify_counts(build(cfg), count_params(cfg))
    assert ok, diffs
    biased = dataclasses.replace(cfg, conv_bias=True)
    ok, diffs = verify_counts(build(biased), count_params(biased))
    assert ok, diffs


def test_corrupted_report_names_block():
    cfg = block_variant_config((1, 1, 1, 1))
    report = count_params(cfg)
    report.rows[3] = dataclasses.replace(report.rows[3], params=report.rows[3].params + 1)
    ok, diffs = verify_counts(build(cfg), report)
    assert not ok
    assert len(diffs) == 1 and diffs[0].startswith(report.rows[3].name + ":")
    del report.rows[0]
    ok, diffs = verify_counts(build(cfg), report)
    assert any("stem" in d and "missing from report" in d for d in diffs)


def test_totals_are_row_sums():
    rep = count_flops(paper_config_aiderv2())
    assert rep.total_params == sum(r.params for r in rep.rows)
    assert rep.total_flops == sum(r.flops for r in rep.rows)


def test_flagship_calibration():
    target_p, target_f = PUBLISHED[(4, 4, 4, 1)]
    cfg = paper_config_aiderv2()
    assert abs(count_params(cfg).total_params - target_p) / target_p <= 0.10
    assert abs(count_flops(cfg, "profiler").total_flops - target_f) / target_f <= 0.15
    for blocks, (p, _) in PUBLISHED.items():
        assert count_params(block_variant_config(blocks, conv_bias=True)).total_params == p


def test_block_variants_strictly_decrease():
    totals = [count_params(block_variant_config(b)).total_params for b in PUBLISHED]
    assert all(a > b for a, b in zip(totals, totals[1:]))
    flops = [count_flops(block_variant_config(b), "profiler").total_flops for b in PUBLISHED]
    assert all(a > b for a, b in zip(flops, flops[1:]))


@given(st.sampled_from([1, 2, 4, 5, 8]), st.data())
def test_gddw_params_invariant_to_groups_and_dilations(m, data):
    dil = tuple(data.draw(st.lists(st.integers(1, 4), min_size=m, max_size=m)))
    base_cfg = dataclasses.replace(paper_config_aiderv2(), stage_widths=(40, 80, 160, 160))
    cfg = dataclasses.replace(base_cfg, m=m, dilations=dil)
    assert count_params(cfg).row("stage3.block1").params == 160 * 9 + 2 * 160
    assert build(cfg).store["stage3.block1.dwconv.weight"].size == 160 * 9
    rep = count_flops(cfg)
    base = count_flops(base_cfg)
    assert rep.row("stage3.block1").flops == base.row("stage3.block1").flops


def test_dense_conv_mac_formula():
    rep = count_flops(paper_config_aiderv2(), "mac1")
    stem = rep.row("stem").components["mac"]
    assert stem == 40 * 3 * 9 * 112 * 112 + 40 * 9 * 56 * 56


def test_conventions():
    rep = count_flops(paper_config_aiderv2(), "mac2")
    assert rep.reprice("mac1").total_flops < rep.total_flops
    with pytest.raises(ValueError):
        price({}, "bogus")
    assert isinstance(rep.reprice("profiler"), CostReport)


def test_summary_table():
    text = summary(paper_config_aiderv2())
    lines = text.splitlines()
    assert lines[-3].startswith("-")
    total = lines[-2].split()
    rep = count_flops(paper_config_aiderv2())
    assert total[0] == "total"
    assert int(total[1].replace(",", "")) == rep.total_params
    assert int(total[2].replace(",", "")) == rep.total_flops
    assert [l.split()[0] for l in lines[1:-3]][-1] == "head" and "(1,4)" in lines[-4]
    for stage, hw in zip(range(1, 5), (56, 28, 14, 7)):
        row = next(l for l in lines if l.startswith(f"stage{stage}.block1"))
        assert f",{hw},{hw})" in row


def test_summary_jsonl_parses():
    rows = [json.loads(line) for line in summary_jsonl(desk_config()).splitlines()]
    assert rows[-1]["block"] == "total"
    assert rows[-1]["params"] == sum(r["params"] for r in rows[:-1])


def test_committed_reconciliation_is_current():
    with open(DOCS, encoding="utf-8") as fh:
        assert fh.read() == reconciliation_report()
