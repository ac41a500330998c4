import pytest

from bitnas.data import CIFAR10_MEAN, CIFAR10_STD, Dataset, make_synthetic_cifar10
from bitnas.errors import ContractError
from bitnas.genotype import all_zeroise_genotype
from bitnas.layers import BinConv2d, BinSepConv2d, Linear
from bitnas.search import SearchConfig
from bitnas.studies import (
    PROBE_LAYERS,
    ProbeNet,
    StudySpec,
    quant_error_study,
    run_ablation,
    skip_gradient_probe,
)


def _data(n=128, seed=0):
    im, lb, tim, tlb = make_synthetic_cifar10(n, 48, seed=seed)
    return (Dataset(im, lb, CIFAR10_MEAN, CIFAR10_STD),
            Dataset(tim, tlb, CIFAR10_MEAN, CIFAR10_STD))


def test_probe_net_layer_counts():
    # the probe recipe: the chosen layer three times, then three FC layers
    for layer in PROBE_LAYERS:
        for precision in ("float", "binary"):
            net = ProbeNet(layer, precision)
            assert len(net.blocks) == 3
            assert len(net.fc) == 3
            assert all(isinstance(f, Linear) for f in net.fc)
    assert all(isinstance(b, BinConv2d)
               for b in ProbeNet("conv3", "binary").blocks)
    assert all(isinstance(b, BinSepConv2d)
               for b in ProbeNet("sep5", "binary").blocks)


def test_probe_net_rejects_unknown_layer():
    with pytest.raises(ContractError):
        ProbeNet("conv7", "float")
    with pytest.raises(ContractError):
        ProbeNet("conv3", "ternary")


def test_quant_error_study_smoke():
    train_data, test_data = _data()
    spec = StudySpec(subset=96, test_subset=32, epochs=1, seeds=(0,), batch=32)
    res = quant_error_study("conv3", "binary", spec, train_data, test_data)
    assert 0.0 <= res.top1 <= 100.0


def test_study_spec_requires_seeds():
    with pytest.raises(ContractError):
        StudySpec(seeds=())


def test_run_ablation_smoke():
    train_data, test_data = _data(160)
    spec = StudySpec(
        subset=128, test_subset=32, epochs=1, seeds=(0,), batch=16,
        search=SearchConfig(cells=3, channels=4, epochs=1, batch=16),
        train_cells=3, train_channels=4, train_epochs=1,
    )
    results = run_ablation(["full"], spec, train_data, test_data)
    assert "full" in results and 0.0 <= results["full"]["top1"] <= 100.0
    assert results["full"]["genotype"].num_nodes == 4


def test_run_ablation_rejects_unknown_variant():
    train_data, test_data = _data(64)
    spec = StudySpec(subset=32, test_subset=16, epochs=1, seeds=(0,), batch=16)
    with pytest.raises(ContractError):
        run_ablation(["bogus"], spec, train_data, test_data)


def test_skip_probe_zeroise_twin_gradients():
    train_data, _ = _data(96)
    spec = StudySpec(subset=64, test_subset=16, epochs=1, seeds=(0,),
                     batch=16, train_epochs=2)
    g = all_zeroise_genotype()
    _, rows_on, grads_on = skip_gradient_probe(g, 3, 4, spec, train_data,
                                               with_skip=True)
    _, rows_off, grads_off = skip_gradient_probe(g, 3, 4, spec, train_data,
                                                 with_skip=False)
    assert [e for e, _ in grads_on] == [e for e, _ in grads_off]
    assert all(mag == 0.0 for _, mag in grads_off)
    assert any(mag > 0.0 for _, mag in grads_on)
