"""Figure rendering: files are produced and are valid PNGs."""

import numpy as np

from cbnn import figures, runner
from cbnn import config as cfg
from cbnn.nets import PredictiveSummary

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def _summary(n=50):
    x = np.linspace(-1, 1, n).reshape(-1, 1)
    rng = np.random.default_rng(3)
    samples = np.sin(2 * x.T) + rng.normal(0, 0.1, size=(8, n))
    return PredictiveSummary(x=x, samples=samples)


def _is_png(path):
    return path.read_bytes()[:8] == PNG_MAGIC


def test_prediction_figure_with_constraints(tmp_path):
    train, test, specs = runner.resolve_data(cfg.default_document("sim1"))
    out = figures.prediction_figure(tmp_path / "p.png", _summary(),
                                    train=train, truth=None, specs=specs,
                                    title="t")
    assert _is_png(out)


def test_dataset_figure(tmp_path):
    train, test, specs = runner.resolve_data(cfg.default_document("sim2"))
    out = figures.dataset_figure(tmp_path / "d.png", train, test=test,
                                 specs=specs)
    assert _is_png(out)


def test_history_figure_plain_and_dual(tmp_path):
    plain = [{"epoch": i, "loss": 1.0 / (i + 1), "ef": [], "s": []}
             for i in range(30)]
    out = figures.history_figure(tmp_path / "plain.png", plain)
    assert _is_png(out)
    dual = [{"epoch": i, "loss": 1.0 / (i + 1), "ef": [-0.1, -0.2],
             "s": [float(i), 2.0 * i]} for i in range(30)]
    out = figures.history_figure(tmp_path / "dual.png", dual)
    assert _is_png(out)


def test_comparison_figure(tmp_path):
    x = np.linspace(0, 1, 40)
    entries = [("a", x, np.sin(x)), ("b", x, np.cos(x))]
    out = figures.comparison_figure(tmp_path / "c.png", entries,
                                    truth=np.zeros(40), title="t")
    assert _is_png(out)
