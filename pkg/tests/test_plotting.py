import numpy as np

from dgtts.diffusion import make_variance_schedule
from dgtts.metrics import BenchRow
from dgtts.plotting import plot_bench, plot_losses, plot_schedule, plot_trace, plot_variation

PNG = b"\x89PNG\r\n\x1a\n"


def test_figures_are_png(tmp_path):
    paths = [
        plot_bench([BenchRow("T=1", 8, 10, 1, 0, 0.1), BenchRow("T=1", 16, 20, 1, 0, 0.2)], tmp_path / "b.png"),
        plot_variation([np.arange(5.0)] * 2, [np.ones(5)] * 2, tmp_path / "v.png"),
        plot_trace([(2, np.zeros((4, 3))), (1, np.ones((4, 3)))], np.eye(4, 3), tmp_path / "t.png"),
        plot_schedule(make_variance_schedule(4), tmp_path / "s.png"),
        plot_losses(["step", "L_D", "L_mel"], [[1, 0.5, 1.0], [2, 0.4, 0.9]], tmp_path / "l.png"),
    ]
    for p in paths:
        assert p.read_bytes().startswith(PNG)


def test_figures_are_reproducible(tmp_path):
    rows = [BenchRow("T=4", 8, 10, 4, 0, 0.1)]
    a = plot_bench(rows, tmp_path / "a.png").read_bytes()
    b = plot_bench(rows, tmp_path / "b.png").read_bytes()
    assert a == b
