"""Smoke test for the itcfn_py extension module.

Build and install first, e.g. `pip install --no-build-isolation -e crates/py`
(needs maturin), or copy target/release/libitcfn_py.so to itcfn_py.so on
PYTHONPATH. Run with `python python/smoke_test.py`.
"""

import math
import sys
import tempfile

import itcfn_py as m


def check(cond, what):
    if not cond:
        print(f"FAIL {what}")
        sys.exit(1)
    print(f"ok   {what}")


def main():
    check(m.auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75, "auc")
    cm = m.confusion_metrics([0.9, 0.2, 0.6, 0.1], [1, 0, 0, 0])
    check((cm["tp"], cm["fp"], cm["tn"], cm["fn"]) == (1, 1, 2, 0), "confusion counts")

    ce = -(math.log(0.7) + math.log(0.8)) / 2
    check(abs(m.focal_loss([0.3, 0.8], [0, 1], gamma=0.0) - ce) < 1e-9, "focal at gamma 0 is cross-entropy")
    check(m.sdm_loss([[1.0, 0.0], [0.0, 1.0]], [[2.0, 0.0], [0.0, 3.0]], [0, 1], tau=0.01) < 1e-6,
          "sdm near zero on aligned pairs")
    check(m.total_loss(0.4, 2.0, 0.0) == 0.4, "total loss at alpha 0")
    _, idx = m.quantize([[0.0, 0.0], [1.0, 1.0], [5.0, 5.0]], [[4.0, 4.5], [0.6, 0.6]])
    check(idx == [2, 1], "quantize picks nearest codes")

    cfg = m.RunConfig()
    cfg.n_subjects = 24
    cfg.volume_shape = [8, 8, 8]
    cfg.codebook = (8, 8)
    cfg.epochs = (2, 2)
    cfg.k_folds = 3
    try:
        cfg.missing_pet_rate = 1.5
        check(False, "invalid rate rejected")
    except ValueError:
        check(True, "invalid rate rejected")
    check(m.RunConfig(cfg.to_toml()).hash() == cfg.hash(), "config toml roundtrip")

    cohort = m.Cohort.generate(cfg)
    check(len(cohort) == 24 and sum(cohort.has_pet()) == 24 - round(24 * cfg.missing_pet_rate), "cohort size")
    with tempfile.TemporaryDirectory() as d:
        cohort.write(d)
        back = m.Cohort.load(d)
        check(back.mri(3) == cohort.mri(3) and back.labels() == cohort.labels(), "cohort roundtrip")

        gen = m.Mmg.train(cohort, cfg, fold=0)
        check(len(gen.curve) == 2, "stage 1 curve")
        pet = gen.generate_pet(cohort.mri(0))
        check(len(pet) == 512 and all(math.isfinite(v) for v in pet), "generated pet")
        path = f"{d}/mmg.itck"
        gen.save(path)
        check(m.Mmg.load(path).checksum() == gen.checksum(), "generator checkpoint roundtrip")

    reports = m.run_cv(cohort, cfg, ["tcaf_only", "mmg_tcaf"])
    check(sorted(reports) == ["mmg_tcaf", "tcaf_only"], "cv modes")
    r = reports["mmg_tcaf"]
    check(len(r["folds"]) == 3 and r["config_hash"] == cfg.hash(), "cv report")

    results = m.verify()
    check(len(results) >= 20 and all(p for _, p, _ in results), "property suite")
    print("smoke test passed")


if __name__ == "__main__":
    main()
