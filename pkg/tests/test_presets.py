import math

import numpy as np
import pytest

from field_grid import mean
from presets import PRESETS, expression_field, parse_expression, preset_theta0, resolve_theta0


class TestPresets:
    def test_tanh_stripe_top_edge(self, grid129):
        theta = preset_theta0("tanh-stripe", grid129)
        assert theta.values[64, -1] == pytest.approx(math.tanh(5) + 1, rel=1e-14)

    def test_sine_stripe_nonnegative(self, grid129):
        theta = preset_theta0("sine-stripe", grid129)
        assert theta.values.min() == pytest.approx(0.0, abs=1e-14)
        assert theta.values[:, 96] == pytest.approx(np.zeros(129), abs=1e-14)

    @pytest.mark.parametrize("name", ["tanh-stripe", "sine-stripe"])
    def test_unit_mean(self, grid129, name):
        assert mean(preset_theta0(name, grid129)) == pytest.approx(1.0, abs=1e-8)

    def test_cosine_presets(self, grid33):
        x1, x2 = grid33.mesh
        np.testing.assert_allclose(preset_theta0("cosine-x", grid33).values, np.cos(np.pi * x1), atol=1e-15)
        np.testing.assert_allclose(preset_theta0("cosine-y", grid33).values, np.cos(np.pi * x2), atol=1e-15)

    def test_unknown_name_lists_presets(self, grid33):
        with pytest.raises(ValueError) as err:
            preset_theta0("checkerboard", grid33)
        for name in PRESETS:
            assert name in str(err.value)


class TestExpressions:
    def test_expression_field(self, grid33):
        x1, x2 = grid33.mesh
        theta = expression_field("exp(-x1) * x2**2 + 1", grid33)
        np.testing.assert_allclose(theta.values, np.exp(-x1) * x2 ** 2 + 1, rtol=1e-14)

    def test_constant_expression_broadcast(self, grid33):
        np.testing.assert_array_equal(expression_field("2", grid33).values, np.full((33, 33), 2.0))

    def test_unknown_symbol(self):
        with pytest.raises(ValueError, match="tanh-stripe"):
            parse_expression("x1 + y")

    def test_syntax_error(self):
        with pytest.raises(ValueError):
            parse_expression("sin(x1")

    def test_resolve_prefers_presets(self, grid33):
        np.testing.assert_array_equal(resolve_theta0("cosine-x", grid33).values,
                                      preset_theta0("cosine-x", grid33).values)
        np.testing.assert_allclose(resolve_theta0("x1 + x2", grid33).values, sum(grid33.mesh))
