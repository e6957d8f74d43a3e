import pytest

from config import RunConfig
from sweep import FACTORS, SWEPT_KEYS, sweep_configs


def test_sweep_varies_one_key_at_a_time():
    base = RunConfig()
    configs = sweep_configs(base)
    assert len(configs) == len(SWEPT_KEYS) * len(FACTORS)
    assert len({c.ablation for c in configs}) == len(configs)

    low = next(c for c in configs if c.ablation == "sweep-sigma_g-x0.32")
    assert low.loss.sigma_g == pytest.approx(0.4 * 10 ** -0.5)
    assert low.loss.sigma_x == base.loss.sigma_x
    assert low.loss.lambda_sep == base.loss.lambda_sep
    assert low.model == base.model and low.train == base.train

    high = next(c for c in configs if c.ablation == "sweep-lambda_cap-x3.16")
    assert high.loss.lambda_cap == pytest.approx(0.5 * 10 ** 0.5)
