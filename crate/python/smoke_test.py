"""Smoke test for the irra_py extension.

Build and run from the repository root:

    cargo build --release -p irra-py --features extension-module
    cp target/release/libirra_py.so python/irra_py.so
    python3 python/smoke_test.py
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import irra_py  # noqa: E402


def main():
    ds = irra_py.generate_synthetic(6, 3, 2, seed=1)
    assert len(ds) == 18, len(ds)
    assert ds.count("val") == 6
    queries = ds.captions("val")
    assert len(queries) == 12 and all(isinstance(c, str) for _, c in queries)

    cfg = irra_py.TrainConfig().with_overrides(["epochs=2", "batch_size=8", "warmup_epochs=0"])
    cfg.seed = 3
    assert "epochs = 2" in cfg.to_toml()

    model, log = irra_py.train(ds, cfg)
    steps = [json.loads(line) for line in log.splitlines()]
    assert any(s["type"] == "epoch" for s in steps)

    calls = model.fusion_calls
    assert calls > 0, "training with the relation-reasoning loss runs the fusion encoder"
    report = model.evaluate(ds, "val")
    assert model.fusion_calls == calls, "evaluation must not run the fusion encoder"
    assert 0.0 <= report["rank1"] <= 1.0 and report["num_queries"] == 12

    sim, qids, gids = model.similarity(ds)
    again = irra_py.evaluate_similarity(sim, qids, gids)
    assert again["mAP"] == report["mAP"], (again["mAP"], report["mAP"])

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.ckpt")
        model.save(path)
        loaded = irra_py.Model.load(path)
        assert loaded.evaluate(ds)["mAP"] == report["mAP"]
        emb = loaded.encode_texts([c for _, c in queries[:2]])
        assert len(emb) == 2 and all(math.isfinite(x) for x in emb[0])

    # one matched pair: the loss is zero up to epsilon
    assert abs(irra_py.sdm_loss([[1.0, 2.0]], [[0.5, -1.0]], [0])) < 1e-7
    assert irra_py.infonce([[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]]) < 1e-6

    try:
        irra_py.TrainConfig().with_overrides(["fusion.depth=3"])
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")

    grads = irra_py.gradcheck(cases=1, seed=5)
    assert all(r["passed"] for r in grads), grads

    print("irra_py smoke test ok: rank1 %.3f mAP %.3f" % (report["rank1"], report["mAP"]))


if __name__ == "__main__":
    main()
