import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from negorep.evalkit import (ABLATION_ROWS, MetricsReport, ablation_means, ablation_name, believed_poses,
                             emit_report, evaluate_set, load_reports, render_markdown, run_collab_eval)
from negorep.scenegen import Pose
from negorep.training import dataset_for, load_bundle


def sample_report(label="x", seed=0, chash="abc123"):
    return MetricsReport(chash, seed, label,
                         ap={"m1+m2/negotiated": {"loose": 0.61, "strict": 0.4}, "m1/none": {"loose": 0.5, "strict": 0.3}},
                         kl={"m1": {"negotiated": 0.1, "protocol": 0.9}},
                         noise={"m1+m2/negotiated": [{"sigma": 0.0, "loose": 0.6, "strict": 0.4},
                                                     {"sigma": 0.3, "loose": 0.55, "strict": 0.35}]},
                         freeze={"stage1": True})


def test_json_roundtrip():
    rep = sample_report()
    back = MetricsReport.from_json(rep.to_json())
    assert back == rep and back.run_id == rep.run_id
    assert json.loads(rep.to_json())["schema"] == "negorep.report/v1"


aps = st.floats(0, 1, allow_nan=False)


@given(st.dictionaries(st.text("abm12+/", min_size=1, max_size=8), st.fixed_dictionaries({"loose": aps, "strict": aps}),
                       max_size=4), st.integers(0, 2 ** 31), st.text(max_size=10))
def test_json_roundtrip_property(ap, seed, label):
    rep = MetricsReport("h", seed, label, ap=ap)
    assert MetricsReport.from_json(rep.to_json()) == rep


def test_tampered_run_id_and_bad_ap_rejected():
    d = sample_report().to_dict()
    d["seed"] = 1
    with pytest.raises(ValueError):
        MetricsReport.from_dict(d)
    with pytest.raises(ValueError):
        MetricsReport("h", 0, ap={"a/none": {"loose": 1.2, "strict": 0.0}}).validate()


def test_run_id_traces_config_and_seed():
    assert sample_report().run_id == sample_report().run_id
    assert sample_report(seed=1).run_id != sample_report().run_id
    assert sample_report(chash="zzz").run_id != sample_report().run_id


def test_emit_one_report(tmp_path):
    files = emit_report([sample_report()], tmp_path)
    names = [f.name for f in files]
    assert names.count("report.json") == 1 and names.count("report.md") == 1
    assert sum(f.suffix == ".png" for f in files) >= 1
    assert all(f.exists() and f.stat().st_size > 0 for f in files)
    assert load_reports(tmp_path / "report.json") == [sample_report()]


def test_emit_requires_reports(tmp_path):
    with pytest.raises(ValueError):
        emit_report([], tmp_path)


def test_replicates_flagged(tmp_path):
    a, b = sample_report("run-a"), sample_report("run-b")
    emit_report([a, b, sample_report("other", chash="zzz")], tmp_path)
    payload = json.loads((tmp_path / "report.json").read_text())
    assert payload["replicates"] == {"abc123": [a.run_id, b.run_id]}
    assert "replicates:" in (tmp_path / "report.md").read_text()


def test_ablation_table_has_eight_rows(tmp_path):
    res = [{**row, "name": ablation_name(row), "seed": s, "loose": 0.1 * i, "strict": 0.05 * i}
           for i, row in enumerate(ABLATION_ROWS) for s in (0, 1)]
    rep = MetricsReport("h", 0, "ablation", ablation=res)
    md = render_markdown([rep])
    table = md.split("### Training-setting ablation")[1].strip().splitlines()
    body = [l for l in table if l.startswith("|")][2:]
    assert len(body) == 8
    # first block has the negotiator column empty, second ticked; stru/pragma follow the table's order
    assert [l.split("|")[1].strip() for l in body] == [""] * 4 + ["x"] * 4
    assert [(l.split("|")[3].strip(), l.split("|")[4].strip()) for l in body[:4]] == [("", ""), ("x", ""), ("", "x"), ("x", "x")]
    files = emit_report([rep], tmp_path)
    assert any(f.suffix == ".png" for f in files)


def test_ablation_means():
    res = [{"name": "a", "loose": 0.2, "strict": 0.1}, {"name": "a", "loose": 0.4, "strict": 0.3}]
    assert ablation_means(res) == {"a": {"loose": pytest.approx(0.3), "strict": pytest.approx(0.2), "n": 2}}


def test_ablation_rows_cover_grid():
    assert len(ABLATION_ROWS) == 8
    assert len({ablation_name(r) for r in ABLATION_ROWS}) == 8


def test_believed_poses_common_random_numbers():
    poses = [[Pose(0.0, 0.0, 0.0), Pose(5.0, 1.0, 0.2)]]
    assert believed_poses(poses, 0.0, 0, [3]) == [[Pose(0.0, 0.0, 0.0), Pose(5.0, 1.0, 0.2)]]
    a = believed_poses(poses, 0.3, 0, [3])[0][1]
    b = believed_poses(poses, 0.6, 0, [3])[0][1]
    np.testing.assert_allclose([b.x - 5.0, b.y - 1.0], [2 * (a.x - 5.0), 2 * (a.y - 1.0)])
    assert believed_poses(poses, 0.3, 0, [4])[0][1] != a


def test_eval_is_read_only_and_deterministic(tiny_ws):
    def files():
        return {p: p.read_bytes() for p in sorted(tiny_ws.root.rglob("*.npz"))}

    before = files()
    r1 = run_collab_eval(tiny_ws, [["m1", "m2"], ["m1"], ["m1", "m1"]], methods=("negotiated", "native", "none"))
    r2 = run_collab_eval(tiny_ws, [["m1", "m2"], ["m1"], ["m1", "m1"]], methods=("negotiated", "native", "none"))
    assert files() == before
    assert r1.to_json() == r2.to_json()
    assert set(r1.ap) == {"m1+m2/negotiated", "m1+m2/none", "m1/none",
                          "m1+m1/negotiated", "m1+m1/native", "m1+m1/none"}
    assert all(0 <= v <= 1 for d in r1.ap.values() for v in d.values())
    assert all(r1.freeze.values()) and "stage1" in r1.freeze
    # a lone agent is the no-fusion baseline, which is also what m1+m1 without sharing scores
    assert r1.ap["m1/none"] == r1.ap["m1+m1/none"]
    b = load_bundle(tiny_ws, ["m1"])
    s = dataset_for(tiny_ws.config, "test")
    assert evaluate_set(b, tiny_ws.config, ["m1"], s, "negotiated") == r1.ap["m1/none"]


def test_native_rejects_mixed_types(tiny_ws):
    b = load_bundle(tiny_ws, ["m1", "m2"])
    with pytest.raises(ValueError):
        evaluate_set(b, tiny_ws.config, ["m1", "m2"], dataset_for(tiny_ws.config, "test")[:2], "native")
    with pytest.raises(ValueError):
        evaluate_set(b, tiny_ws.config, ["m1"], dataset_for(tiny_ws.config, "test")[:2], "bogus")

