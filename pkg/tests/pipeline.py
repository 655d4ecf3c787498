"""End-to-end runs shared by the acceptance tests (also runnable as a script).

``python3 tests/pipeline.py <seed> [<seed> ...]`` prints one JSON summary per seed.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from brainage.analytics import build_report, predictions_from  # noqa: E402
from brainage.attribution import corpus_gradient_map, rank_regions  # noqa: E402
from brainage.model import BrainAgeModel, ModelConfig  # noqa: E402
from brainage.synthcorpus import CorpusConfig, PLANTED_REGIONS, generate_corpus, reference_phantom  # noqa: E402
from brainage.trainer import (  # noqa: E402
    OptimizerState, TrainConfig, batch_arrays, fit, mse_loss, predict_records, stats_from_corpus, train_step)
from oracles import occlusion_scores  # noqa: E402

MIXED_SUBJECTS = {"CN": 240, "MCI": 200, "AD": 200}
SEED_EPOCHS = 20


def mixed_run(seed: int, epochs: int = SEED_EPOCHS) -> dict:
    """Generate a mixed-group corpus, train on CN, evaluate, attribute, occlude."""
    t0 = time.perf_counter()
    corpus = generate_corpus(CorpusConfig(subjects=dict(MIXED_SUBJECTS), seed=seed, split_seed=seed),
                             keep_volumes="train")
    model = BrainAgeModel(ModelConfig(seed=seed), stats_from_corpus(corpus))
    fit(model, corpus, TrainConfig.desk(seed=seed, epochs=epochs))
    test = corpus.split("test")
    preds = predictions_from(test, predict_records(model, corpus, test))
    report = build_report(preds)

    cn = corpus.split("test", ["CN"])
    views = np.stack([corpus.chunks(r) for r in cn])
    vols = np.stack([r.region_volumes for r in cn])
    ages = np.array([r.age for r in cn])
    fused = corpus_gradient_map(model, views, vols, ages, corpus.crop)
    ref = reference_phantom(corpus.geometry, corpus.age_mean)
    ranking = rank_regions(fused.volume, ref.label_map, voxel_volume=corpus.geometry.voxel_volume)
    own_labels = np.stack([[corpus.crop.crop(corpus.load_label_map(r), v) for v in range(3)] for r in cn])
    occ = occlusion_scores(model, views, vols, own_labels, corpus.config.n_regions)
    occ_order = [int(i) + 1 for i in np.lexsort((np.arange(occ.size), -occ))]
    return {
        "seed": seed,
        "wall_s": time.perf_counter() - t0,
        "cn_test_mae": report.groups["CN"].mae,
        "groups": {g: {"n": s.n, "bag_mean": s.bag_mean, "lo": s.bag_ci95_low, "hi": s.bag_ci95_high}
                   for g, s in report.groups.items()},
        "abs_error_vs_score": {g: {"r": c.r, "p": c.p} for g, c in report.abs_error_vs_score.items()},
        "bag_vs_score": {g: {"r": c.r, "p": c.p} for g, c in report.bag_vs_score.items()},
        "gradient_top": [r.region_id for r in ranking[:5]],
        "occlusion_top": occ_order[:5],
        "planted": list(PLANTED_REGIONS),
    }


def overfit_eight(steps: int = 300, lr: float = 1e-3, seed: int = 0) -> list[float]:
    """Full-batch training on eight CN scans without augmentation; returns the MSE before each step
    followed by the MSE after the last one."""
    corpus = generate_corpus(CorpusConfig(subjects={"CN": 10}, scans_per_subject=(1, 1), seed=seed, split_seed=seed))
    train = corpus.split("train")
    assert len(train) == 8
    model = BrainAgeModel(ModelConfig(seed=seed), stats_from_corpus(corpus))
    cfg = TrainConfig.desk(seed=seed, augment=False)
    views, vols, ages = batch_arrays(corpus, train)
    params = model.parameters()
    state = OptimizerState.zeros_like(params)
    curve = [train_step(model, params, state, views, vols, ages, lr, cfg) for _ in range(steps)]
    curve.append(float(mse_loss(model.predict(views, vols), ages).item()))
    return curve


if __name__ == "__main__":
    for s in sys.argv[1:]:
        print(json.dumps(mixed_run(int(s))), flush=True)
