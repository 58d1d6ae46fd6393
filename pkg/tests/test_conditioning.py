import logging
import sys

import numpy as np
import pytest

from hybridsynth.conditioning import (CommandExtractor, GradientEdge, LuminanceDepth, estimate_depth, extract_edge,
                                      get_depth_estimator, get_edge_extractor)
from hybridsynth.core import ConfigError, Role, unit_plane


def color(data):
    return unit_plane(np.asarray(data, dtype=np.float64), Role.COLOR)


def test_constant_image_has_no_edges():
    out = extract_edge(color(np.full((16, 16, 3), 0.4)))
    assert out.role is Role.EDGE and np.all(out.data == 0)


def test_vertical_step_peaks_on_step_columns():
    img = np.zeros((16, 16, 3))
    img[:, 8:] = 1.0
    e = GradientEdge()(color(img)).data[..., 0]
    profile = e.mean(axis=0)
    assert set(np.argsort(profile)[-2:]) == {7, 8}
    assert profile.max() == pytest.approx(1.0)
    assert profile[0] < 1e-3 and profile[-1] < 1e-3
    assert np.allclose(e, e[0:1])  # constant down each column


def test_constant_image_depth_is_half():
    d = estimate_depth(color(np.full((8, 8, 3), 0.7)))
    assert np.all(d.data == 0.5)


def test_ramp_gives_monotone_full_range_depth():
    ramp = np.tile(np.linspace(0, 1, 32)[None, :, None], (8, 1, 3))
    d = LuminanceDepth()(color(ramp)).data[4, :, 0]
    assert np.all(np.diff(d) >= 0)
    assert d.min() == 0.0 and d.max() == pytest.approx(1.0)


def test_extractors_are_deterministic_and_in_range():
    img = color(np.random.default_rng(0).random((24, 20, 3)))
    for fn in (GradientEdge(), LuminanceDepth()):
        a, b = fn(img), fn(img)
        assert np.array_equal(a.data, b.data)
        assert a.hw == img.hw and a.data.min() >= 0 and a.data.max() <= 1


def test_resolver_falls_back_with_notice(caplog):
    caplog.set_level(logging.WARNING)
    edge = get_edge_extractor("pidinet-not-installed")
    assert isinstance(edge, GradientEdge)
    assert "unavailable" in caplog.text
    assert isinstance(get_depth_estimator("luminance"), LuminanceDepth)


def test_command_extractor_plugin_contract(tmp_path):
    script = tmp_path / "invert.py"
    script.write_text(
        "import sys, numpy as np\nfrom PIL import Image\n"
        "a = np.asarray(Image.open(sys.argv[1]).convert('L'), dtype=float) / 255\n"
        "np.save(sys.argv[2], 1 - a)\n")
    ext = get_depth_estimator(f"cmd:{sys.executable} {script} {{input}} {{output}}")
    assert isinstance(ext, CommandExtractor)
    img = np.zeros((6, 6, 3))
    img[:, 3:] = 1
    out = ext(color(img))
    assert out.role is Role.DEPTH
    assert np.allclose(out.data[:, :3, 0], 1) and np.allclose(out.data[:, 3:, 0], 0)


def test_command_template_needs_placeholders():
    with pytest.raises(ConfigError):
        CommandExtractor("true", Role.EDGE)
