import pytest

from glimmer import gradcheck
from glimmer import kernels as K


@pytest.mark.parametrize("seed", [0, 1])
def test_kernel_suite_passes(seed):
    records = gradcheck.run("kernels", seed)
    names = {r.name for r in records}
    for op in ("conv2d", "grouped_dilated_dwconv", "grouped_pointwise_conv", "batchnorm_train", "relu6",
               "pool2d_max_ceil", "grn", "linear", "softmax_cross_entropy", "channel_concat",
               "channel_permute", "add"):
        assert op in names
    failed = [r.to_dict() for r in records if not r.passed]
    assert not failed


@pytest.mark.parametrize("seed", [0, 1])
def test_block_suite_passes(seed):
    records = gradcheck.run("blocks", seed)
    names = {r.name for r in records}
    for block in ("stem", "gdblock", "aggregator", "stage", "refiner", "head",
                  "feature_maps_recomb", "mixed_concatenation"):
        assert block in names
    failed = [r.to_dict() for r in records if not r.passed]
    assert not failed


def test_reduced_model_passes():
    (rec,) = gradcheck.run("model", 0)
    assert rec.passed, rec.to_dict()


def test_broken_backward_is_caught(monkeypatch):
    fn, args, outs = K._VJP["relu6"]
    monkeypatch.setitem(K._VJP, "relu6", (lambda dy, x: 1.5 * fn(dy, x), args, outs))
    bad = [r for r in gradcheck.run("kernels", 0) if not r.passed]
    assert [r.name for r in bad] == ["relu6"]


def test_unknown_scope():
    with pytest.raises(ValueError):
        gradcheck.run("everything")


def test_record_serializes():
    rec = gradcheck.run("kernels", 0)[0]
    d = rec.to_dict()
    assert d["scope"] == "kernels" and isinstance(d["max_rel_err"], float) and d["pass"] is True
