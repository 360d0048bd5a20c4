import json

import pytest
from starlette.testclient import TestClient

from vidseg.cli import main as cli_main
from vidseg.service import create_app


@pytest.fixture()
def client():
    return TestClient(create_app())


TINY_MODEL = {
    "num_queries": 4, "channels": 8, "num_layers": 1, "heads": 2, "num_classes": 2,
    "feature_resolutions": [[4, 4]], "mask_resolution": [8, 8],
}


def gen_payload(tmp_path, **kw):
    payload = {"out_dir": str(tmp_path / "data"), "n_clips": 4, "base_seed": 0,
               "frame_h": 16, "frame_w": 16, "clip_length": 4,
               "disc_radius": [3.0, 5.0], "rect_half": [2.5, 4.5], "speed_max": 1.0}
    payload.update(kw)
    return payload


class TestEndpoints:
    def test_health(self, client):
        r = client.get("/health")
        assert r.status_code == 200
        assert r.json() == {"status": "ok"}

    def test_full_pipeline(self, client, tmp_path):
        r = client.post("/datasets", json=gen_payload(tmp_path))
        assert r.status_code == 200, r.text
        body = r.json()
        assert body["n_train"] == 2 and body["n_val"] == 2
        manifest_path = body["manifest_path"]

        r = client.post("/train", json={
            "manifest_path": manifest_path,
            "out_dir": str(tmp_path / "run"),
            "model": TINY_MODEL,
            "train": {"total_iters": 2, "batch_size": 2, "clip_length_T": 2, "seed": 0},
        })
        assert r.status_code == 200, r.text
        train_body = r.json()
        assert train_body["iterations"] == 2

        manifest = json.loads(open(manifest_path).read())
        val_entries = [e for e in manifest["clips"] if e["split"] == "val"]
        for entry in val_entries:
            clip_file = str(tmp_path / "data" / entry["frames"])
            r = client.post("/infer", json={
                "checkpoint_dir": train_body["checkpoint_dir"],
                "clip_path": clip_file,
                "out_dir": str(tmp_path / "preds"),
                "clip_id": entry["id"],
                "top_k": 10,
            })
            assert r.status_code == 200, r.text
            assert r.json()["num_predictions"] <= 10
            assert r.json()["clip_length"] == 4

        r = client.post("/eval", json={
            "manifest_path": manifest_path,
            "predictions_dir": str(tmp_path / "preds"),
            "split": "val",
            "report_path": str(tmp_path / "report.json"),
        })
        assert r.status_code == 200, r.text
        eval_body = r.json()
        assert 0.0 <= eval_body["ap"] <= 1.0
        assert "AP50" in eval_body["report"]
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["ap"] == eval_body["ap"]

        pred_file = str(tmp_path / "preds" / f"{val_entries[0]['id']}.json")
        r = client.post("/overlay", json={
            "clip_path": str(tmp_path / "data" / val_entries[0]["frames"]),
            "predictions_path": pred_file,
            "out_dir": str(tmp_path / "overlays"),
            "min_score": 0.0,
        })
        assert r.status_code == 200, r.text
        frames = r.json()["frame_paths"]
        assert len(frames) == 4
        from PIL import Image
        img = Image.open(frames[0])
        assert img.size == (16, 16)

    def test_missing_manifest_404(self, client, tmp_path):
        r = client.post("/train", json={
            "manifest_path": str(tmp_path / "missing.json"),
            "out_dir": str(tmp_path / "run"),
        })
        assert r.status_code == 404
        assert "not found" in r.json()["detail"]

    def test_missing_checkpoint_404(self, client, tmp_path):
        r = client.post("/infer", json={
            "checkpoint_dir": str(tmp_path / "nope"),
            "clip_path": str(tmp_path / "nope.tns"),
            "out_dir": str(tmp_path / "preds"),
        })
        assert r.status_code == 404

    def test_invalid_gen_config_400(self, client, tmp_path):
        r = client.post("/datasets", json=gen_payload(tmp_path, min_instances=3, max_instances=1))
        assert r.status_code == 400

    def test_validation_error_422(self, client, tmp_path):
        r = client.post("/datasets", json={"out_dir": str(tmp_path), "n_clips": 0})
        assert r.status_code == 422

    def test_missing_predictions_404(self, client, tmp_path):
        r = client.post("/datasets", json=gen_payload(tmp_path))
        manifest_path = r.json()["manifest_path"]
        (tmp_path / "empty").mkdir()
        r = client.post("/eval", json={
            "manifest_path": manifest_path,
            "predictions_dir": str(tmp_path / "empty"),
            "split": "val",
        })
        assert r.status_code == 404


class TestCli:
    def test_gen_train_infer_eval_overlay_in_process(self, tmp_path, capsys):
        data_dir = tmp_path / "data"
        rc = cli_main(["gen-data", "--out", str(data_dir), "--n-clips", "4",
                       "--frame-size", "16", "--clip-length", "4", "--seed", "0",
                       "--disc-radius", "3", "5", "--rect-half", "2.5", "4.5"])
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        manifest_path = out["manifest_path"]

        cfg_file = tmp_path / "overrides.json"
        cfg_file.write_text(json.dumps({"model": TINY_MODEL}))
        rc = cli_main(["train", "--data", manifest_path, "--out", str(tmp_path / "run"),
                       "--config", str(cfg_file), "--iters", "2", "--batch-size", "1",
                       "--seed", "0"])
        assert rc == 0
        train_out = json.loads(capsys.readouterr().out)

        manifest = json.loads(open(manifest_path).read())
        entry = next(e for e in manifest["clips"] if e["split"] == "val")
        clip_file = str(data_dir / entry["frames"])
        rc = cli_main(["infer", "--checkpoint", train_out["checkpoint_dir"],
                       "--clip", clip_file, "--out", str(tmp_path / "preds"),
                       "--clip-id", entry["id"]])
        assert rc == 0
        infer_out = json.loads(capsys.readouterr().out)
        assert infer_out["num_predictions"] >= 1

        # eval needs predictions for every val clip
        for other in manifest["clips"]:
            if other["split"] == "val" and other["id"] != entry["id"]:
                cli_main(["infer", "--checkpoint", train_out["checkpoint_dir"],
                          "--clip", str(data_dir / other["frames"]),
                          "--out", str(tmp_path / "preds"), "--clip-id", other["id"]])
                capsys.readouterr()
        rc = cli_main(["eval", "--manifest", manifest_path,
                       "--preds", str(tmp_path / "preds"),
                       "--out", str(tmp_path / "report.json")])
        assert rc == 0
        eval_out = json.loads(capsys.readouterr().out)
        assert "ap50" in eval_out

        rc = cli_main(["overlay", "--clip", clip_file,
                       "--preds", infer_out["predictions_path"],
                       "--out", str(tmp_path / "ov"), "--min-score", "0"])
        assert rc == 0
        overlay_out = json.loads(capsys.readouterr().out)
        assert len(overlay_out["frame_paths"]) == 4

    def test_error_propagates_as_nonzero_exit(self, tmp_path, capsys):
        rc = cli_main(["eval", "--manifest", str(tmp_path / "nope.json"),
                       "--preds", str(tmp_path)])
        assert rc == 1
        body = json.loads(capsys.readouterr().out)
        assert "detail" in body
