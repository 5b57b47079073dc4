from PIL import Image

from geneic.metrics import evaluate
from geneic.plots import plot_metric_report, plot_training_curves
from geneic.toydata import toy_corpus
from geneic.trainer import TrainConfig, train


def test_training_curves_png(bundle, tmp_path):
    _, log = train(toy_corpus(8), bundle, TrainConfig(M=2, epochs=2, batch_size=4, max_len=4))
    a = plot_training_curves(log, tmp_path / "a.png")
    b = plot_training_curves(log, tmp_path / "b.png")
    assert a.read_bytes() == b.read_bytes()
    with Image.open(a) as im:
        assert im.format == "PNG" and im.size[0] > im.size[1]


def test_metric_report_png(tmp_path):
    rep = evaluate({"a": "red bird", "b": "blue car"}, {"a": ["a red bird"], "b": ["a blue car"]})
    path = plot_metric_report(rep, tmp_path / "sub" / "m.png")
    assert path.exists() and path.read_bytes()[:4] == b"\x89PNG"
