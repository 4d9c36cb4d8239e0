"""Smoke test for the trajgan Python extension.

Build and install first:
    pip install --no-build-isolation -e crates/py
"""

import json
import tempfile
from pathlib import Path

import trajgan


def main():
    cfg = trajgan.Config.tiny()
    cfg.validate()
    t_obs, t_pred = cfg.horizon
    assert cfg.hash() == trajgan.Config(cfg.to_json()).hash()

    scenes = trajgan.generate_dataset(cfg, 6, 3)
    assert len(scenes) == 6 and scenes[0].n_pedestrians >= 2
    steps = scenes[0].positions()[0][1]
    assert len(steps) == t_obs + t_pred

    up = [trajgan.uniform_predictor(s, t_obs, t_pred) for s in scenes]
    assert up[0].k == 20
    report = json.loads(trajgan.evaluate(scenes, up, t_obs, t_pred, [3, 20]))
    assert report["top_k"][1]["ade"] <= report["top_k"][0]["ade"]
    print("UP Col", trajgan.collision_rate(scenes, up, t_obs, t_pred))

    model = trajgan.Model(cfg)
    log = model.train(scenes[:4], scenes[4:], epochs=1)
    assert len(log.strip().splitlines()) == 1
    before = model.fingerprint()
    bundles = model.predict(scenes, 3, 0)
    refined, rep = model.refine(scenes, bundles)
    assert model.fingerprint() == before
    assert "col_before" in json.loads(rep)
    score = model.score(scenes[0], bundles[0].samples()[0])
    print("score", score)

    with tempfile.TemporaryDirectory() as d:
        ck = Path(d) / "m.ckpt"
        model.save(ck)
        again = trajgan.Model.load(ck)
        assert again.fingerprint() == before
        assert again.epoch == 1

        data = Path(d) / "data"
        manifest = json.loads(trajgan.gen_data(cfg, data))
        assert [s["count"] for s in manifest["splits"]] == [16, 4, 4]
        out = json.loads(trajgan.eval("cv", data, ks=[1], config=cfg))
        print("CV Col", out["metrics"]["col_rate"])

    print("smoke test passed")


if __name__ == "__main__":
    main()
