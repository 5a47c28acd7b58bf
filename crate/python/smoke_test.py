"""Smoke test for the `semisup` extension module.

Build and install it first:

    pip install --no-build-isolation ./crates/python
    python python/smoke_test.py
"""

import math

import semisup


def check_schedules():
    m = semisup.Schedule("cosine", 0.998, 0.9998)
    assert abs(m.eval(0, 100) - 0.998) < 1e-12
    assert abs(m.eval(100, 100) - 0.9998) < 1e-12
    pi = semisup.Schedule("warmup-cooldown", 0.0, 1.0, warmup=0.25, cooldown=0.25)
    vals = pi.values(100)
    assert vals[0] == 0.0 and vals[-1] == 1.0
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    try:
        semisup.Schedule("zigzag", 0.0, 1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown shape accepted")


def check_metrics():
    assert abs(semisup.f_beta(0.95, 0.15, 0.5) - 0.45968) < 1e-5
    assert semisup.iou([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert semisup.hungarian([[4.0, 1.0], [2.0, 8.0]]) == [(0, 1), (1, 0)]
    gt = [([0.1, 0.1, 0.4, 0.4], 0)]
    assert semisup.average_precision([([0.1, 0.1, 0.4, 0.4], 0, 0.9)], gt, 0.5) == 1.0


def check_scenes_and_detector():
    scenes = semisup.generate_scenes(4, 7)
    again = semisup.generate_scenes(4, 7)
    assert [s.pixels for s in scenes] == [s.pixels for s in again]
    s = scenes[0]
    assert len(s.pixels) == s.width * s.height * 3
    assert len(s.boxes) == len(s.classes)
    det = semisup.Detector(seed=3)
    for box, cls, score in det.predict(s):
        assert 0.0 <= score <= 1.0 and cls in (0, 1) and box[0] <= box[2]
    copy = semisup.Detector.from_text(det.to_text())
    assert copy.checksum() == det.checksum()


def check_training():
    cfg = "\n".join(
        [
            "dataset.train = 40",
            "dataset.val = 8",
            "dataset.test = 8",
            "split.ratio = 0.25",
            "detector.hidden = 8",
            "train.epochs = 4",
            "train.batch_size = 4",
            "train.iters_per_epoch = 2",
            "train.val_every = 2",
        ]
    )
    a = semisup.train(cfg, fold=0, seed=1)
    b = semisup.train(cfg, fold=0, seed=1)
    assert a["history_csv"] == b["history_csv"]
    assert len(a["history"]) == 4
    for h in a["history"]:
        assert math.isclose(h["total_loss"], h["sup_loss"] + h["loss_weight"] * h["unsup_loss"], abs_tol=1e-10)
    assert a["regime"] in ("virtuous", "vicious", "indeterminate")
    assert 0.0 <= a["test"]["map"] <= 1.0


if __name__ == "__main__":
    check_schedules()
    check_metrics()
    check_scenes_and_detector()
    check_training()
    print("smoke test passed")
