import math

import numpy as np
import pytest

from hazecascade.dehaze.models import AODNet
from hazecascade.dehaze.train import DehazeTrainParams, train_dehazer
from hazecascade.detect import DetectorTrainParams, GridDetectorConfig, detect, train_detector
from hazecascade.errors import ConfigError
from hazecascade.imageio import read_detections, read_ppm
from hazecascade.pipeline import (AOD_THEN_HEAVY, CASCADE, HEAVY_ONLY, BenchmarkRow, DetectorFamily, VariantSpec,
                                  compare_report, format_markdown, performance_change, read_benchmark_csv,
                                  run_benchmark, run_variant, write_benchmark_csv)
from hazecascade.scatter import FogParams, SceneSpec, gen_dataset, load_pair
from hazecascade.tensorcore import Rng

# printed (clear, foggy, change %) triples from the published comparison table
PUBLISHED = [
    (0.5644, 0.4850, -14.07), (0.6813, 0.5822, -14.53), (0.4896, 0.6152, 25.68),
    (0.5243, 0.4948, -5.63), (0.6099, 0.5900, -3.27), (0.5150, 0.6114, 18.71),
]


@pytest.fixture(scope="module")
def family(tiny_corpus):
    cfg = GridDetectorConfig(width="light")
    light, _ = train_detector(cfg, tiny_corpus["train"], "clear",
                              DetectorTrainParams(lr=1e-2, epochs=60, batch_size=4, seed=1))
    heavy, _ = train_detector(cfg, tiny_corpus["train"], "clear",
                              DetectorTrainParams(lr=1e-2, epochs=60, batch_size=4, seed=2))
    return DetectorFamily("T", heavy=heavy, light=light)


@pytest.fixture(scope="module")
def dehazers(tiny_corpus):
    x, _ = train_dehazer("aodnetx", tiny_corpus["train"], DehazeTrainParams(lr=1e-2, epochs=15, batch_size=4))
    a = AODNet(Rng(6))
    a.trunk.load_state_dict(x.trunk.state_dict())
    return a, x


def variants(family, dehazers):
    a, x = dehazers
    return [VariantSpec(HEAVY_ONLY, family), VariantSpec(AOD_THEN_HEAVY, family, a),
            VariantSpec(CASCADE, family, x)]


# ---- change arithmetic ------------------------------------------------------

@pytest.mark.parametrize("clear,foggy,printed", PUBLISHED)
def test_performance_change_matches_published(clear, foggy, printed):
    assert abs(performance_change(clear, foggy) - printed) <= 0.05


def test_performance_change_edge_cases():
    assert performance_change(0.5644, 0.4850) == pytest.approx(-14.068, abs=1e-3)
    assert performance_change(0.4, 0.4) == 0.0
    assert math.isnan(performance_change(0.0, 0.3))
    assert BenchmarkRow("v", 0.5, 0.25).change_percent == -50.0


# ---- variants ----------------------------------------------------------------

def test_variant_names_and_validation(family, dehazers):
    a, x = dehazers
    names = [v.name for v in variants(family, dehazers)]
    assert names == ["T-heavy", "AOD-Net+T-heavy", "T-light+AOD-NetX+T-heavy"]
    with pytest.raises(ConfigError):
        VariantSpec("Bogus", family)
    with pytest.raises(ConfigError):
        VariantSpec(AOD_THEN_HEAVY, family, x)
    with pytest.raises(ConfigError):
        VariantSpec(CASCADE, DetectorFamily("T", heavy=family.heavy), x)
    with pytest.raises(ConfigError):
        VariantSpec(HEAVY_ONLY, DetectorFamily("T", heavy=None))


def test_heavy_only_is_plain_detector(family, tiny_corpus):
    val = tiny_corpus["val"]
    clear, _ = load_pair(val, val.records[0])
    out = run_variant(VariantSpec(HEAVY_ONLY, family), clear, "v0")
    assert out.detections == detect(family.heavy, clear, 0.05, 0.45, "v0")
    assert out.dehazed is None


def test_cascade_without_preliminary_boxes_equals_aod(family, dehazers, tiny_corpus):
    a, x = dehazers
    val = tiny_corpus["val"]
    for rec in val.records:
        _, foggy = load_pair(val, rec)
        casc = run_variant(VariantSpec(CASCADE, family, x, conf_thresh=1.0), foggy, rec.id)
        aod = run_variant(VariantSpec(AOD_THEN_HEAVY, family, a), foggy, rec.id)
        assert casc.preliminary == []
        assert casc.dehazed.tobytes() == aod.dehazed.tobytes()
        assert casc.detections == aod.detections


def test_cascade_uses_preliminary_boxes(family, dehazers, tiny_corpus):
    _, x = dehazers
    val = tiny_corpus["val"]
    clear, _ = load_pair(val, val.records[0])
    out = run_variant(VariantSpec(CASCADE, family, x, conf_thresh=0.05), clear, "v")
    assert out.preliminary
    assert all(d.score >= 0.05 for d in out.preliminary)
    assert out.dehazed.min() >= 0 and out.dehazed.max() <= 1


# ---- benchmark ---------------------------------------------------------------

def test_benchmark_deterministic_and_thread_independent(family, dehazers, tiny_corpus):
    vs = variants(family, dehazers)
    rows1, out1 = run_benchmark(tiny_corpus["val"], vs, threads=1)
    rows2, out2 = run_benchmark(tiny_corpus["val"], vs, threads=3)
    assert rows1 == rows2
    for key in out1:
        assert [o.detections for o in out1[key]] == [o.detections for o in out2[key]]
    assert all(np.isfinite([r.map_clear, r.map_foggy]).all() for r in rows1)


def test_benchmark_zero_fog_has_zero_change(family, dehazers, tmp_path):
    ms = gen_dataset(SceneSpec(seed=8), 0, 4, 0, FogParams(beta=0.0), tmp_path)
    rows, _ = run_benchmark(ms["val"], variants(family, dehazers))
    for r in rows:
        assert r.map_clear > 0
        assert r.change_percent == 0.0


def test_benchmark_errors(family, tiny_corpus):
    from hazecascade.imageio import DatasetManifest
    with pytest.raises(ValueError):
        run_benchmark(DatasetManifest("val", ["c"], []), [VariantSpec(HEAVY_ONLY, family)])
    with pytest.raises(ValueError):
        run_benchmark(tiny_corpus["val"], [])


def test_compare_report_outputs(family, dehazers, tiny_corpus, tmp_path):
    vs = variants(family, dehazers)
    vs = vs + [VariantSpec(v.kind, DetectorFamily("U", family.light, family.heavy), v.dehazer) for v in vs]
    val = tiny_corpus["val"]
    rows, outputs = run_benchmark(val, vs)
    written = compare_report(rows, tmp_path / "bench", outputs, val, n_pairs=2)
    csv_lines = (tmp_path / "bench" / "benchmark.csv").read_text().splitlines()
    assert csv_lines[0] == "variant,map_clear,map_foggy,change_percent"
    assert len(csv_lines) == 7
    assert read_benchmark_csv(tmp_path / "bench" / "benchmark.csv") == rows
    md = (tmp_path / "bench" / "benchmark.md").read_text().splitlines()
    assert md[0] == "| Model | mAP (Clear) | mAP (Foggy) | Performance Change |" and len(md) == 8
    dumps = sorted((tmp_path / "bench" / "detections").glob("*.jsonl"))
    assert len(dumps) == 12
    n_dets = sum(len(o.detections) for o in outputs[(vs[0].name, "foggy")])
    assert len(read_detections(tmp_path / "bench" / "detections" / "T-heavy__foggy.jsonl")) == n_dets
    pairs = sorted((tmp_path / "bench" / "pairs").rglob("*.ppm"))
    # 4 dehazing variants x 2 images x (hazy, dehazed)
    assert len(pairs) == 16
    for p in pairs:
        img = read_ppm(p)
        assert (img.width, img.height) == (64, 64)
    assert set(written) >= set(pairs)
    with pytest.raises(ValueError):
        compare_report([], tmp_path / "none")


def test_csv_round_trip_and_markdown(tmp_path):
    rows = [BenchmarkRow("A-heavy", c, f) for c, f, _ in PUBLISHED] + [BenchmarkRow("z", 0.0, 0.1)]
    write_benchmark_csv(tmp_path / "b.csv", rows)
    back = read_benchmark_csv(tmp_path / "b.csv")
    assert back == rows
    md = format_markdown(rows)
    assert "| A-heavy | 0.5644 | 0.4850 | -14.07% |" in md
    assert "+25.65%" in md and "n/a" in md
