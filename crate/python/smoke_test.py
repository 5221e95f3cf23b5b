#!/usr/bin/env python3
"""End-to-end smoke test for the stainlab_py extension module.

Builds the cdylib if needed, generates a tiny corpus, runs a short
self-distillation pre-training, extracts features, and exercises the probe,
retrieval and statistics bindings.

Usage: python3 python/smoke_test.py
"""

import os
import shutil
import subprocess
import sys
import tempfile

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def build_and_import():
    so = os.path.join(REPO, "target", "release", "libstainlab_py.so")
    if not os.path.exists(so):
        subprocess.run(
            ["cargo", "build", "--release", "-p", "stainlab-py"],
            cwd=REPO,
            check=True,
        )
    stage = os.path.join(REPO, "target", "pymodule")
    os.makedirs(stage, exist_ok=True)
    shutil.copy2(so, os.path.join(stage, "stainlab_py.so"))
    sys.path.insert(0, stage)
    import stainlab_py

    return stainlab_py


TINY_CONFIG = """
corpus.classes = 2
corpus.slides_per_class = 3
corpus.slide_size = 448
corpus.cap = 4
dino.epochs = 2
dino.batch = 16
dino.checkpoint_every = 0
"""


def main():
    sl = build_and_import()
    print(f"stainlab_py {sl.__version__}")

    # deterministic stream sanity
    a = sl.splitmix_stream(42, 7, 5)
    b = sl.splitmix_stream(42, 7, 5)
    assert a == b, "tagged streams must be reproducible"
    assert sl.splitmix_stream(0, 0, 1) != [0]

    # OTSU on a bimodal histogram
    hist = [0] * 256
    hist[30], hist[220] = 500, 500
    t = sl.otsu(hist)
    assert t is not None and 30 <= t < 220, f"unexpected threshold {t}"
    assert sl.otsu([0] * 255 + [100]) is None

    # statistics helpers
    t_stat, p = sl.t_test([0.9, 0.8, 0.85, 0.95], [0.7, 0.75, 0.8, 0.78])
    assert t_stat > 0 and 0 < p < 1
    bal, f1 = sl.confusion_metrics([[2, 0], [1, 1]])
    assert abs(bal - 0.75) < 1e-9, bal
    assert 0 < f1 <= 1

    folds = sl.stratified_kfold([0] * 10 + [1] * 5, 5, seed=3)
    for f in range(5):
        members = [i for i, x in enumerate(folds) if x == f]
        assert sum(1 for i in members if i < 10) == 2
        assert sum(1 for i in members if i >= 10) == 1

    # full tiny pipeline
    with tempfile.TemporaryDirectory() as work:
        corpus = os.path.join(work, "corpus")
        run = os.path.join(work, "run")
        feats = os.path.join(work, "features.stnf")

        slides, excluded, patches = sl.gen_corpus(corpus, seed=9, config=TINY_CONFIG)
        print(f"corpus: {slides} slides ({excluded} excluded), {patches} patches")
        assert slides > 0 and patches > 0

        steps, losses, checkpoint = sl.pretrain_run(corpus, run, seed=9, config=TINY_CONFIG)
        print(f"pretrain: {steps} steps, losses {losses[0]:.3f} -> {losses[-1]:.3f}")
        assert steps > 0 and len(losses) == 2
        assert all(l == l for l in losses), "loss must stay finite"

        n, dim = sl.extract(checkpoint, corpus, feats, config=TINY_CONFIG)
        print(f"features: {n} x {dim}")
        assert n == patches and dim == 64

        ids, labels, values, c = sl.load_features(feats)
        assert len(ids) == n and c == dim and len(values) == n * dim
        assert labels is not None and set(labels) == {0, 1}

        fold_metrics = sl.probe_eval(feats, folds=2, mode="linear", lr=1e-2, epochs=3, seed=1)
        assert len(fold_metrics) == 2
        for acc, bal, auc, f1 in fold_metrics:
            for v in (acc, bal, auc, f1):
                assert 0.0 <= v <= 1.0

        sweep = sl.retrieval_sweep(feats, k_max=5)
        assert [k for k, _, _ in sweep] == [1, 2, 3, 4, 5]
        recalls = [r for _, r, _ in sweep]
        maps = [m for _, _, m in sweep]
        assert recalls == sorted(recalls), "Recall@K must be non-decreasing"
        assert maps == sorted(maps), "mAP@K must be non-decreasing"

    cfg_text = sl.print_config()
    assert "dino.teacher_temp = 0.04" in cfg_text
    print("smoke test passed")


if __name__ == "__main__":
    main()
