"""Sweep fixture signal strength and report the test AUROC of both toy models.

This is how the default signal strength was chosen; rerun it after changing
the generator or the toy presets.

    python3 scripts/tune_signal.py --strengths 1.0 1.5 2.0 --patients 1000
"""

import argparse
import tempfile
import time

from t2dm_screen import metrics
from t2dm_screen.dataset import BuildConfig, build_dataset, split_tensors
from t2dm_screen.fixtures import FixtureConfig, generate_cohort
from t2dm_screen.training import TrainConfig, fit, image_transform, predict


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--strengths", type=float, nargs="+", default=[1.0, 1.5, 2.0])
    p.add_argument("--patients", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    print("strength  model              test_auroc  seconds")
    for a in args.strengths:
        with tempfile.TemporaryDirectory() as tmp:
            generate_cohort(FixtureConfig(n_patients=args.patients, ehr_signal=a, cxr_signal=a, ecg_signal=a,
                                          seed=args.seed), tmp)
            ds, _ = build_dataset(tmp, BuildConfig(seed=args.seed))
        cache = {}
        for model in ("vilt", "resnet-lstm"):
            t0 = time.perf_counter()
            net, _ = fit(ds, TrainConfig.toy(model, seed=args.seed), cache=cache)
            test = split_tensors(ds, "test", image_transform(net), cache)
            auc = metrics.auroc(predict(net, test), test.y.numpy())
            print(f"{a:8.2f}  {model:17s}  {auc:10.4f}  {time.perf_counter() - t0:7.1f}", flush=True)


if __name__ == "__main__":
    main()
