import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgr.scene_synth import (
    IRRELEVANT,
    DatasetError,
    RankTable,
    SceneConfig,
    build_rank_table,
    generate_dataset,
    generate_scene,
    load_dataset,
    make_task,
    save_dataset,
    validate_dataset,
)


def test_rank_table_deterministic():
    assert build_rank_table(5, 3, 2, 8).ranks == build_rank_table(5, 3, 2, 8).ranks


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(2, 3), st.integers(3, 12))
def test_rank_table_contract(seed, n_a, n_c, n_k):
    t = build_rank_table(seed, n_a, n_c, n_k)
    for a in range(n_a):
        rel = t.relevant_categories(a)
        assert len(rel) >= 2
        # every relevant category is ranked 1..7 under every context
        for c in range(n_c):
            assert all(1 <= t.lookup((a, c), k) <= 7 for k in rel)
        # some pair of contexts disagrees on some category
        assert any(
            t.lookup((a, c0), k) != t.lookup((a, c1), k) for c0 in range(n_c) for c1 in range(c0) for k in rel
        )
        others = set(range(n_k)) - set(rel)
        assert all(t.lookup((a, c), k) == IRRELEVANT for c in range(n_c) for k in others)


def test_rank_table_infeasible():
    with pytest.raises(ValueError):
        build_rank_table(0, 1, 2, 1)
    with pytest.raises(ValueError):
        build_rank_table(0, 1, 1, 8)


def test_rank_lookup(table):
    a = 0
    rel = table.relevant_categories(a)
    assert table.lookup((a, 0), rel[0]) == table.ranks[(a, 0, rel[0])]
    irrelevant = next(k for k in range(table.n_categories) if k not in rel)
    assert table.lookup((a, 1), irrelevant) == IRRELEVANT
    with pytest.raises(KeyError):
        table.lookup((9, 0), 0)
    spec = make_task(a, 1, 2, 2)
    assert table.lookup(spec, rel[0]) == table.ranks[(a, 1, rel[0])]


def test_rank_table_json_round_trip(tmp_path, table):
    table.save(tmp_path / "t.json")
    back = RankTable.load(tmp_path / "t.json")
    assert back.ranks == table.ranks
    assert (back.n_affordances, back.contexts_per_affordance, back.n_categories) == (2, 2, 8)


def test_inverted_pairs_are_inversions(table):
    for a in range(table.n_affordances):
        for x, y in table.inverted_pairs(a):
            assert table.lookup((a, 0), x) < table.lookup((a, 0), y)
            assert table.lookup((a, 1), x) > table.lookup((a, 1), y)


def test_make_task_tokens():
    t = make_task(1, 0, 2, 2)
    assert t.affordance_tokens == (2,)
    assert t.context_tokens[0] == 2 and len(t.context_tokens) == 2
    with pytest.raises(ValueError):
        make_task(2, 0, 2, 2)


def test_generate_scene_deterministic(table):
    a = generate_scene(0, table)
    b = generate_scene(0, table)
    assert json.dumps(a.to_record(), sort_keys=True) == json.dumps(b.to_record(), sort_keys=True)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**40))
def test_generated_scenes_satisfy_contract(seed):
    table = build_rank_table(0, 2, 2, 8)
    cfg = SceneConfig()
    s = generate_scene(seed, table, cfg)
    assert cfg.min_objects <= len(s.objects) <= cfg.max_objects
    assert s.tasks
    boxes = s.boxes()
    assert (boxes[:, 2:] > 0).all()
    assert (boxes[:, :2] - boxes[:, 2:] / 2 >= 0).all() and (boxes[:, :2] + boxes[:, 2:] / 2 <= 1).all()
    d = np.sqrt(((boxes[:, None, :2] - boxes[None, :, :2]) ** 2).sum(-1))
    assert (d[~np.eye(len(boxes), dtype=bool)] >= cfg.min_sep - 1e-12).all()
    for t in s.tasks:
        assert len(t.ranks) == len(s.objects)
        assert len({r for r in t.ranks if r != IRRELEVANT}) >= 2
        assert t.ranks == [table.lookup((t.affordance, t.context), k) for k in s.categories()]
        assert t.relevant == [r != IRRELEVANT for r in t.ranks]


def test_infeasible_packing_names_constraint(table):
    with pytest.raises(DatasetError, match="min_sep"):
        generate_scene(0, table, SceneConfig(min_objects=3, max_objects=3, min_sep=1.0, max_tries=200))


def test_every_configured_level_occurs(table):
    data = generate_dataset(3, 1000, table)
    seen = {r for s in data for t in s.tasks for r in t.ranks}
    configured = set(table.ranks.values())
    assert configured <= seen


def test_dataset_round_trip(tmp_path, table):
    data = generate_dataset(7, 100, table)
    save_dataset(data, tmp_path / "d.jsonl")
    back = load_dataset(tmp_path / "d.jsonl")
    assert [s.to_record() for s in back] == [s.to_record() for s in sorted(data, key=lambda s: s.scene_id)]


def test_empty_file_is_empty_dataset(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert load_dataset(tmp_path / "e.jsonl") == []


def test_malformed_lines_report_line_and_field(tmp_path, table):
    data = generate_dataset(7, 3, table)
    recs = [s.to_record() for s in data]
    del recs[1]["tasks"][0]["ranks"]
    p = tmp_path / "bad.jsonl"
    p.write_text("\n".join(json.dumps(r) for r in recs))
    with pytest.raises(DatasetError, match=r"line 2.*'ranks'"):
        load_dataset(p)
    p.write_text(json.dumps(recs[0]) + "\n{not json\n")
    with pytest.raises(DatasetError, match="line 2"):
        load_dataset(p)


def test_validator_rejects_single_level_task(tmp_path, table):
    rec = generate_dataset(7, 1, table)[0].to_record()
    n = len(rec["objects"])
    rec["tasks"][0]["ranks"] = [3] * (n - 1) + [IRRELEVANT]
    rec["tasks"][0]["relevant"] = [True] * (n - 1) + [False]
    p = tmp_path / "one.jsonl"
    p.write_text(json.dumps(rec) + "\n")
    with pytest.raises(DatasetError, match="single rank level"):
        load_dataset(p)
    assert len(load_dataset(p, validate=False)) == 1
    with pytest.raises(DatasetError):
        validate_dataset(load_dataset(p, validate=False))
