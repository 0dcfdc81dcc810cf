"""
Desk-scale experiments on the default phantom cohort

Slow: run with `pytest -m slow`. One study (both loss modes, 20 epochs max)
is shared by every test in the module.
"""

import logging

import numpy as np
import pytest

from reconstruction_study import StudyConfig, prepare_patches, run_study
from vae_model import VaeArchitecture
from vae_objectives import LossMode
from vae_trainer import train
from vessel_phantom import generate_cohort

pytestmark = pytest.mark.slow

MODES = ["l2", "ssim"]


@pytest.fixture(scope="module")
def study():
    return run_study(StudyConfig())


@pytest.mark.parametrize("mode", MODES)
def test_validation_loss_drops(study, mode):
    log = study.modes[mode].log
    assert len(log.records) <= 20
    assert log.best.val_loss <= 0.7 * log.records[0].val_loss


@pytest.mark.parametrize("mode", MODES)
def test_aneurysm_cohort_has_lower_ssim(study, mode):
    res = study.modes[mode]
    assert res.aneurysm.mean("mean_ssim") < res.healthy.mean("mean_ssim")
    assert study.checks[f"{mode}_aneurysm_ssim_lower"]


def test_anomaly_mask_finds_aneurysms(study):
    res = study.modes["ssim"]
    assert res.anomaly_volumes == 10
    assert res.anomaly_hits >= 8


def test_l2_ordering_is_advisory(study):
    # expected direction only; a miss at phantom scale is a warning
    l2, ssim = study.modes["l2"].healthy, study.modes["ssim"].healthy
    assert study.checks["l2_lower_mse"] == (l2.mean("mse") < ssim.mean("mse"))
    if not (study.checks["l2_lower_mse"] and study.checks["l2_higher_psnr"]):
        logging.getLogger(__name__).warning("L2 did not beat SSIM on MSE and PSNR at this scale")


def test_training_is_reproducible():
    cfg = StudyConfig(max_epochs=1, patches_per_volume=100)
    tcfg = cfg.train_config(LossMode.SSIM)
    cohort = generate_cohort(3, 0.0, 0, cfg.phantom_spec())
    patches = prepare_patches([m.volume for m in cohort[:2]], tcfg)
    val = prepare_patches([m.volume for m in cohort[2:]], tcfg, 1000)
    arch = VaeArchitecture.default()
    first, log_a = train(patches, val, arch, tcfg)
    second, log_b = train(patches, val, arch, tcfg)
    assert log_a.records[0].val_loss == log_b.records[0].val_loss
    for name, array in first.arrays().items():
        np.testing.assert_array_equal(array, second.arrays()[name])
