"""Smoke test for the dermanet extension module.

Build and install first:
    pip install --no-build-isolation -e crates/python
then run:
    python python/smoke_test.py
"""

import math
import random
import tempfile

import dermanet

FULL = [327, 514, 1099, 115, 1113, 6705, 142]


def check(name, cond):
    print(("ok   " if cond else "FAIL ") + name)
    return cond


def main():
    ok = True
    ok &= check("seven classes", dermanet.class_codes() == ["akiec", "bcc", "bkl", "df", "mel", "nv", "vasc"])

    plan = dermanet.balancing_plan(FULL, 0.6)
    ok &= check("balancing total", plan["total"] == 30843 and plan["targets"][0] == 4023)

    split = dermanet.split_counts(FULL)
    ok &= check("split sizes", sum(split["train"]) == 7010 and abs(sum(split["val"]) - 1503) <= 2)

    w = dermanet.class_weights(FULL)
    ok &= check("class weights normalize", abs(sum(n * x for n, x in zip(FULL, w)) - sum(FULL)) < 1e-6)

    probs = [[0.1 / 6] * 7]
    probs[0][2] = 0.9
    loss = dermanet.focal_loss(probs, [2], smoothing=0.0)
    ok &= check("focal loss hand value", abs(loss + 0.25 * 0.01 * math.log(0.9)) < 1e-12)
    grad = dermanet.focal_loss_grad(probs, [2])
    ok &= check("logit gradient rows sum to zero", abs(sum(grad[0])) < 1e-12)

    ok &= check("auc with ties", dermanet.auc([1.0, 0.5], [0.5, 0.0]) == 0.875)

    rng = random.Random(0)
    labels = [i % 7 for i in range(28)]
    scores = []
    for y in labels:
        row = [rng.random() * 0.1 for _ in range(7)]
        row[y] += 1.0
        s = sum(row)
        scores.append([v / s for v in row])
    report = dermanet.evaluate(scores, labels)
    ok &= check("perfect scores evaluate to 1.0", report["overall_accuracy"] == 1.0 and report["micro_auc"] == 1.0)

    acts = [[[[rng.random() for _ in range(4)] for _ in range(3)] for _ in range(3)]]
    grads = [[[[rng.uniform(-1, 1) for _ in range(4)] for _ in range(3)] for _ in range(3)]]
    alpha, maps = dermanet.grad_cam_maps(acts, grads)
    ok &= check("grad-cam maps nonnegative", len(alpha[0]) == 4 and all(v >= 0 for r in maps[0] for v in r))

    model = dermanet.Classifier(seed=1)
    total, trainable = model.parameter_counts()
    ok &= check("model builds", total > 0 and trainable == total and "attention" in model.layer_names())
    img = [[[rng.random() for _ in range(3)] for _ in range(32)] for _ in range(32)]
    p = model.predict([img])
    ok &= check("predict yields probabilities", len(p[0]) == 7 and abs(sum(p[0]) - 1.0) < 1e-9)
    cam = model.grad_cam(img)
    sal = model.saliency(img, class_index=3)
    ok &= check("heatmaps at image size", len(cam) == 32 and len(sal[0]) == 32 and max(map(max, cam)) <= 1.0)

    with tempfile.TemporaryDirectory() as d:
        model.save(d + "/ckpt")
        again = dermanet.Classifier.load(d + "/ckpt")
        ok &= check("checkpoint round trip", again.predict([img]) == p)
        csv = dermanet.write_blob_dataset(d + "/blobs", counts=[3] * 7, size=16)
        ok &= check("blob dataset written", open(csv).read().count("\n") == 22)

    try:
        dermanet.balancing_plan([1, 2, 3])
        ok &= check("bad counts rejected", False)
    except ValueError:
        ok &= check("bad counts rejected", True)

    ok &= check("desk preset toml", "[data]" in dermanet.preset_config("desk"))
    print("all ok" if ok else "failures above")
    return 0 if ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
