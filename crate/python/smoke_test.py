"""Smoke test for the ocreid_py extension.

Build first with
    cargo build --release -p ocreid-python --features extension-module
then run
    python3 python/smoke_test.py
"""

import importlib.util
import json
import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def load_extension():
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libocreid_py.so"
        if lib.exists():
            break
    else:
        sys.exit("libocreid_py.so not found; build the ocreid-python crate first")
    tmp = Path(tempfile.mkdtemp())
    so = tmp / "ocreid_py.so"
    shutil.copy(lib, so)
    spec = importlib.util.spec_from_file_location("ocreid_py", so)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    m = load_extension()

    # distance and loss on a hand-checkable batch
    assert math.isclose(m.part_mean_distance([[0.0, 0.0], [3.0, 4.0]], [[0.0, 0.0], [0.0, 0.0]]), 2.5)
    emb = [[[0.0, 0.0]], [[0.1, 0.0]], [[1.0, 0.0]], [[1.1, 0.0]]]
    loss, grad = m.prt_loss(emb, [0, 0, 1, 1], margin=0.3)
    assert loss == 0.0 and len(grad) == 4

    rep = m.cmc_map([[0.1, 0.2, 0.3]], [(0, 0, 0)], [(1, 0, 1), (0, 1, 1), (0, 0, 1)], protocol="standard", max_rank=3)
    assert rep["rank1"] == 0.0 and rep["cmc"] == [0.0, 1.0, 1.0], rep
    assert math.isclose(rep["map"], (1 / 2 + 2 / 3) / 2)

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        n = m.generate_synthetic_dataset(str(tmp / "clean"), ids=4, clothes=2, images=5, seed=3)
        assert n == 4 * 2 * 5, n
        stats = m.synthesize_occlusions(str(tmp / "clean"), str(tmp / "occ"), seed=42)
        assert stats["num_processed"] + stats["num_skipped"] > 0, stats

        cfg = m.TrainConfig.toy(str(tmp / "occ"))
        cfg.set("total_epochs", 1)
        cfg.set("lr_decay_epochs", [])
        cfg.set("plan_repeats", 1)
        cfg.validate()
        assert cfg.get("batch_p") == 4
        out = m.train(cfg, run_dir=str(tmp / "run"))
        assert Path(out["checkpoint"]).exists()
        assert out["report"]["protocol"] == "ltcc_cc"

        report = m.evaluate(out["checkpoint"], str(tmp / "occ"), str(tmp / "eval"), protocol="standard",
                            distmat=str(tmp / "d.bin"))
        rows = m.read_distmat(str(tmp / "d.bin"))
        assert len(rows) == report["num_queries"]

        model = m.Model.load(out["checkpoint"])
        img = next((tmp / "occ").rglob("*.png"))
        vec = model.embed_files([str(img)])[0]
        assert vec and all(math.isfinite(v) for v in vec)

        summary = m.export_metrics(out["log"])
        print(json.dumps({"rank1": report["rank1"], "map": report["map"], "log_rows": summary["num_rows"]}))
    print("python smoke test passed")


if __name__ == "__main__":
    main()
