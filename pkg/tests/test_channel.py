import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from driftdecode import rng as rngmod
from driftdecode.channel import (
    ChannelKind,
    ChannelRealization,
    DeepFadeError,
    DegenerateSignalError,
    complex_noise,
    equalize_zf,
    noise_variance,
    normalize_power,
    realize,
    sample_channel,
    stack_realizations,
    transmit,
    unpack_real,
)

N_MC = 10**6


def _gen(seed=0):
    return torch.Generator().manual_seed(seed)


def _realization(h, snr_db=10.0, p_z=1.0, kind=ChannelKind.RAYLEIGH):
    snr = torch.tensor(float(snr_db), dtype=torch.float64)
    return ChannelRealization(torch.tensor(h, dtype=torch.complex128), snr, noise_variance(snr, p_z), kind)


def test_normalize_power_examples():
    z = normalize_power(torch.tensor([1.0, 0.0, 0.0, 1.0]))
    assert torch.allclose(z.symbols, torch.tensor([1 + 0j, 0 + 1j], dtype=torch.complex64))
    z = normalize_power(torch.tensor([2.0, 0.0, 0.0, 2.0]))
    assert torch.allclose(z.symbols, torch.tensor([1 + 0j, 0 + 1j], dtype=torch.complex64))
    with pytest.raises(DegenerateSignalError, match="degenerate signal"):
        normalize_power(torch.zeros(4))


def test_normalize_power_rejects_odd_length_and_bad_power():
    with pytest.raises(ValueError):
        normalize_power(torch.ones(3))
    with pytest.raises(ValueError):
        normalize_power(torch.ones(4), p_z=0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 64), st.floats(0.1, 10.0), st.integers(0, 2**31 - 1))
def test_power_is_exact_and_idempotent(M, p_z, seed):
    raw = torch.randn(3, 2 * M, dtype=torch.float64, generator=_gen(seed)) * 5
    z = normalize_power(raw, p_z)
    assert torch.allclose(z.power(), torch.full((3,), p_z, dtype=torch.float64), rtol=1e-6)
    again = normalize_power(unpack_real(z.symbols), p_z)
    assert torch.allclose(again.symbols, z.symbols, rtol=1e-9, atol=1e-12)


def test_interleaving_round_trip():
    raw = torch.arange(8, dtype=torch.float64) + 1
    z = normalize_power(raw)
    assert z.symbols[1].real / z.symbols[1].imag == pytest.approx(3 / 4)
    assert torch.allclose(unpack_real(z.symbols) / unpack_real(z.symbols)[0], raw / raw[0])


def test_normalize_power_is_differentiable():
    raw = torch.randn(2, 6, dtype=torch.float64, generator=_gen(1), requires_grad=True)
    assert torch.autograd.gradcheck(lambda r: unpack_real(normalize_power(r).symbols), (raw,))


def test_noise_variance_examples():
    assert noise_variance(0.0, 1.0) == 1.0
    assert noise_variance(10.0, 1.0) == pytest.approx(0.1, rel=1e-12)
    assert noise_variance(3.0103, 2.0) == pytest.approx(1.0, abs=1e-4)
    t = noise_variance(torch.tensor([0.0, 10.0], dtype=torch.float64), 2.0)
    assert torch.allclose(t, torch.tensor([2.0, 0.2], dtype=torch.float64), rtol=1e-9)


def test_awgn_coefficient_is_one():
    h = sample_channel("awgn", _gen(), size=(5,))
    assert torch.equal(h, torch.ones(5, dtype=torch.complex128))
    ch, redraws = realize(ChannelKind.AWGN, 7.0, _gen())
    assert ch.h == 1 and redraws == 0


def test_rayleigh_statistics():
    h = sample_channel("rayleigh", _gen(2), size=(N_MC,))
    mag2 = h.abs().pow(2)
    assert float(mag2.mean()) == pytest.approx(1.0, rel=0.02)
    assert float(mag2.median()) == pytest.approx(math.log(2), rel=0.02)
    assert float((mag2 > 1).double().mean()) == pytest.approx(math.exp(-1), rel=0.01)
    assert float(h.real.var()) == pytest.approx(0.5, rel=0.02)
    assert float(h.imag.var()) == pytest.approx(0.5, rel=0.02)


@pytest.mark.parametrize("snr_db", [0.0, 10.0, 20.0])
def test_noise_calibration(snr_db):
    ch = _realization(1.0, snr_db, kind=ChannelKind.AWGN)
    y = transmit(torch.zeros(N_MC, dtype=torch.complex128), ch, _gen(3))
    assert float(y.abs().pow(2).mean()) == pytest.approx(float(ch.noise_var), rel=0.02)
    assert float(y.real.var()) == pytest.approx(float(ch.noise_var) / 2, rel=0.02)


def test_complex_noise_variance_example():
    n = complex_noise((N_MC,), torch.tensor(0.1), _gen(4))
    assert float(n.abs().pow(2).mean()) == pytest.approx(0.1, rel=0.02)


def test_transmit_examples():
    z = torch.tensor([1 + 0j, 0.5 - 0.5j], dtype=torch.complex128)
    noiseless = ChannelRealization(torch.tensor(1 + 0j, dtype=torch.complex128), torch.tensor(10.0),
                                   torch.tensor(0.0), ChannelKind.AWGN)
    assert torch.equal(transmit(z, noiseless, _gen()), z)
    scaled = _realization(2 + 0j)
    scaled.noise_var = torch.tensor(0.0)
    assert torch.equal(transmit(z[:1], scaled, _gen()), torch.tensor([2 + 0j], dtype=torch.complex128))
    scaled.noise_var = torch.tensor(-1.0)
    with pytest.raises(ValueError):
        transmit(z, scaled, _gen())


def test_transmit_is_differentiable():
    raw = torch.randn(8, dtype=torch.float64, generator=_gen(5), requires_grad=True)
    ch = _realization(0.3 - 1.1j)
    noise = complex_noise((4,), ch.noise_var, _gen(6), dtype=torch.complex128)
    out = unpack_real(transmit(normalize_power(raw), ch, noise=noise)).sum()
    out.backward()
    assert raw.grad is not None and torch.isfinite(raw.grad).all()


def test_equalize_examples():
    z = torch.tensor([1 + 2j, -0.5j], dtype=torch.complex128)
    eq = equalize_zf(z, _realization(1.0, 7.5, kind=ChannelKind.AWGN))
    assert torch.equal(eq.symbols, z) and float(eq.effective_snr_db) == 7.5
    eq = equalize_zf(2 * z, _realization(2 + 0j, 10.0))
    assert torch.allclose(eq.symbols, z)
    assert float(eq.effective_snr_db) == pytest.approx(16.0206, abs=1e-4)
    with pytest.raises(DeepFadeError, match="deep fade"):
        equalize_zf(z, _realization(1e-9 + 0j))


def test_effective_snr_with_unit_coefficient_is_exact():
    for snr in (-3.0, 0.0, 12.345):
        ch = _realization(1 + 0j, snr)
        assert float(equalize_zf(torch.zeros(1, dtype=torch.complex128), ch).effective_snr_db) == snr


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(list(ChannelKind)))
def test_noiseless_round_trip(seed, kind):
    g = _gen(seed)
    z = normalize_power(torch.randn(16, dtype=torch.float64, generator=g)).symbols
    h = sample_channel(kind, g)
    if float(h.abs()) < 1e-6:
        return
    ch = ChannelRealization(h, torch.tensor(5.0), torch.tensor(0.0), kind)
    back = equalize_zf(transmit(z, ch, g), ch).symbols
    assert float((back - z).abs().max() / z.abs().max()) <= 1e-6


def test_deep_fade_redraw_counts():
    # a floor of 1 rejects about 63% of draws, so re-draws actually happen
    total = 0
    for seed in range(20):
        ch, redraws = realize("rayleigh", 10.0, _gen(seed), h_floor=1.0)
        assert float(ch.h.abs()) >= 1.0
        replay = _gen(seed)
        draws = [sample_channel("rayleigh", replay) for _ in range(redraws + 1)]
        assert all(float(d.abs()) < 1.0 for d in draws[:-1])
        assert torch.equal(draws[-1], ch.h)
        total += redraws
    assert total > 0
    first, n = realize("rayleigh", 10.0, _gen(0), h_floor=1.0, redraw=False)
    assert n == 0 and torch.equal(first.h, sample_channel("rayleigh", _gen(0)))


def test_stack_realizations():
    a, _ = realize("rayleigh", 3.0, _gen(1))
    b, _ = realize("rayleigh", 9.0, _gen(2))
    st_ = stack_realizations([a, b])
    assert st_.h.shape == (2,) and st_.snr_db.tolist() == [3.0, 9.0]
    c, _ = realize("awgn", 3.0, _gen(1))
    with pytest.raises(ValueError):
        stack_realizations([a, c])


def test_channel_kind_parse():
    assert ChannelKind.parse("AWGN") is ChannelKind.AWGN
    with pytest.raises(ValueError, match="unknown channel kind"):
        ChannelKind.parse("rician")


def test_streams_are_keyed_and_reproducible():
    a = rngmod.torch_stream(7, rngmod.PURPOSE_CHANNEL, 3, 1)
    b = rngmod.torch_stream(7, rngmod.PURPOSE_CHANNEL, 3, 1)
    c = rngmod.torch_stream(7, rngmod.PURPOSE_CHANNEL, 3, 2)
    ha, hb, hc = (sample_channel("rayleigh", g) for g in (a, b, c))
    assert torch.equal(ha, hb) and not torch.equal(ha, hc)
    n1 = rngmod.numpy_stream(7, rngmod.PURPOSE_SHUFFLE, 0).permutation(10)
    n2 = rngmod.numpy_stream(7, rngmod.PURPOSE_SHUFFLE, 0).permutation(10)
    assert (n1 == n2).all()
