import numpy as np
import pytest
from scipy import stats

from services.autodiff import ops
from services.autodiff.gradcheck import finite_difference_grad, max_relative_error
from services.autodiff.optim import Adam
from services.autodiff.tensor import Graph, Tensor, backward, backward_from
from services.data.synth import make_domain_profile, synth_cycle, MurmurEnvelope, MurmurPhase, MurmurSpec
from services.dsp.fir import FirCoefficients, freq_response, phase_linearity_residual
from services.errors import ConfigurationError, GraphError, ShapeError
from services.frontend.filterbank import (
    Filterbank,
    delta_filterbank,
    export_kernels,
    frontend_backward,
    frontend_forward,
    init_filterbank,
    run_frontend,
)
from services.frontend.kernels import (
    FrontendKernel,
    FrontendKind,
    GammatoneParams,
    default_kernel_length,
    materialize,
)

LINEAR_PHASE_CASES = [
    ("type1", 17), ("type1", 61),
    ("type2", 16), ("type2", 60),
    ("type3", 17), ("type3", 61),
    ("type4", 16), ("type4", 60),
]
GRADIENT_CASES = [
    (kind, K)
    for kind in FrontendKind
    for K in (4, 5, 16, 17)
    if kind.required_parity is None or (kind.required_parity == "odd") == (K % 2 == 1)
]


def random_bank(kind, K, seed) -> Filterbank:
    kind = FrontendKind.parse(kind)
    rng = np.random.default_rng(seed)
    if kind is FrontendKind.GAMMATONE:
        return Filterbank([
            FrontendKernel.from_gammatone(
                GammatoneParams(rng.uniform(0.5, 2), rng.uniform(2, 4), rng.uniform(0.01, 0.05), rng.uniform(0.05, 0.4)),
                K,
            )
            for _ in range(4)
        ])
    return Filterbank([
        FrontendKernel(kind, K, rng.standard_normal(FrontendKernel.param_count(kind, K))) for _ in range(4)
    ])


def assert_linear_phase(kernel: FrontendKernel):
    taps = materialize(kernel)
    resp = freq_response(taps, 1024)
    assert phase_linearity_residual(resp) < 1e-6
    np.testing.assert_allclose(resp.group_delay_samples[resp.valid], (kernel.length - 1) / 2, atol=1e-4)


# ---------------------------------------------------------------- parameterisations

def test_materialize_symmetry_rules():
    a, b, c = 0.3, -1.2, 2.0
    assert materialize(FrontendKernel("type1", 5, [a, b, c])).h.tolist() == [a, b, c, b, a]
    assert materialize(FrontendKernel("type2", 4, [a, b])).h.tolist() == [a, b, b, a]
    assert materialize(FrontendKernel("type3", 5, [a, b])).h.tolist() == [a, b, 0.0, -b, -a]
    assert materialize(FrontendKernel("type4", 4, [a, b])).h.tolist() == [a, b, -b, -a]


@pytest.mark.parametrize("kind,K", [("type1", 60), ("type2", 61), ("type3", 60), ("type4", 17)])
def test_parity_violations(kind, K):
    with pytest.raises(ConfigurationError):
        FrontendKernel(kind, K, np.zeros(K))
    with pytest.raises(ConfigurationError):
        init_filterbank(kind, K)


def test_kind_parsing_and_defaults():
    assert FrontendKind.parse("TypeIV") is FrontendKind.TYPE_IV
    assert FrontendKind.parse("zero_phase") is FrontendKind.ZERO_PHASE
    assert default_kernel_length(FrontendKind.TYPE_II) == 60
    assert default_kernel_length(FrontendKind.GAMMATONE) == 61
    with pytest.raises(ConfigurationError):
        FrontendKind.parse("type5")


def test_gammatone_params_validation():
    with pytest.raises(ConfigurationError):
        GammatoneParams(1.0, 1.0, 0.01, 0.1)
    with pytest.raises(ConfigurationError):
        GammatoneParams(1.0, 2.0, 0.01, 0.6)
    with pytest.raises(ConfigurationError):
        GammatoneParams(1.0, 2.0, 0.01, 0.1, phi=0.5)


def test_gammatone_example_values():
    g = ops.gammatone(Tensor([1.0, 1.0, 1e-9, 0.25]), 4).data
    np.testing.assert_allclose(g, [0.0, -1.0, 0.0, 1.0], atol=1e-7)


@pytest.mark.parametrize("seed", range(5))
def test_gammatone_matches_closed_form(seed):
    rng = np.random.default_rng(seed)
    alpha, eta, beta, f = 1e5, rng.uniform(1.5, 5), rng.uniform(0.01, 0.05), rng.uniform(0.01, 0.4)
    kernel = FrontendKernel.from_gammatone(GammatoneParams(alpha, eta, beta, f), 61)
    t = np.arange(1, 62)
    expected = alpha * t ** (eta - 1) * np.exp(-2 * np.pi * beta * t) * np.cos(2 * np.pi * f * t)
    np.testing.assert_allclose(materialize(kernel).h, expected, rtol=1e-12, atol=1e-12 * np.abs(expected).max())
    np.testing.assert_allclose(kernel.taps_tensor().data, expected, rtol=1e-12, atol=1e-12 * np.abs(expected).max())


def test_gammatone_alpha_gradient_is_g_over_alpha():
    params = Tensor([2.0, 3.0, 0.02, 0.1], requires_grad=True)
    with Graph() as graph:
        g = ops.gammatone(params, 16)
    backward_from(graph, g, np.ones(16))
    assert params.grad[0] == pytest.approx(np.sum(g.data / 2.0))


def test_gammatone_clamp():
    kernel = FrontendKernel.from_gammatone(GammatoneParams(1.0, 2.0, 0.01, 0.1), 16)
    kernel.params.data[:] = [-1.0, 0.5, -0.2, 0.7]
    kernel.clamp()
    alpha, eta, beta, f = kernel.params.data
    assert alpha >= 1e-12 and eta >= 1.01 and beta >= 1e-6 and 0 < f <= 0.4999


# ---------------------------------------------------------------- forward

def test_delta_bank_copies_input():
    x = np.random.default_rng(0).standard_normal((1, 64))
    out = frontend_forward(Tensor(x), delta_filterbank("free", 5)).data
    np.testing.assert_allclose(out, np.repeat(x, 4, axis=0))


def test_zero_phase_two_tap_autocorrelation():
    bank = Filterbank([FrontendKernel.from_taps("zerophase", [1.0, 1.0]) for _ in range(4)])
    x = np.zeros((1, 9))
    x[0, 4] = 1.0
    out = frontend_forward(Tensor(x), bank).data
    np.testing.assert_allclose(out[0], [0, 0, 0, 1, 2, 1, 0, 0, 0])


def test_type1_unit_dc_gain():
    bank = Filterbank([FrontendKernel.from_taps("type1", [0.25, 0.5, 0.25]) for _ in range(4)])
    out = frontend_forward(Tensor(np.full((1, 20), 0.7)), bank).data
    np.testing.assert_allclose(out[:, 1:-1], 0.7)


def test_batched_forward_shape_and_channel_check():
    bank = init_filterbank("type1", 61)
    out = frontend_forward(Tensor(np.zeros((3, 1, 100))), bank)
    assert out.shape == (3, 4, 100)
    with pytest.raises(ShapeError):
        frontend_forward(Tensor(np.zeros((3, 2, 100))), bank)


# ---------------------------------------------------------------- linear and zero phase

@pytest.mark.parametrize("kind,K", LINEAR_PHASE_CASES)
def test_linear_phase_random_params(kind, K):
    for kernel in random_bank(kind, K, seed=K).kernels:
        assert_linear_phase(kernel)


@pytest.mark.parametrize("kind,K", LINEAR_PHASE_CASES)
def test_linear_phase_survives_training(kind, K):
    bank = random_bank(kind, K, seed=1)
    murmur = MurmurSpec(MurmurPhase.SYSTOLIC, MurmurEnvelope.UNIFORM)
    cycle = synth_cycle("Abnormal", murmur, make_domain_profile(0, 1, 1), seed=3)
    x = Tensor(cycle.samples[None, None, 100:356])
    target = np.random.default_rng(2).standard_normal((1, 4, 256))
    opt = Adam(bank.parameters(), lr=1e-2)
    for _ in range(100):
        opt.zero_grad()
        with Graph() as graph:
            diff = ops.add(frontend_forward(x, bank), Tensor(-target))
            loss = ops.mean_all(ops.mul(diff, diff))
        backward(graph, loss)
        opt.step()
    for kernel in bank.kernels:
        h = materialize(kernel).h
        if FrontendKind.parse(kind).symmetric:
            assert np.array_equal(h, h[::-1])
        else:
            assert np.array_equal(h, -h[::-1])
        assert_linear_phase(kernel)


def test_zero_phase_branch_response():
    K, N = 9, 256
    bank = random_bank("zerophase", K, seed=4)
    impulse = np.zeros((1, N))
    impulse[0, N // 2] = 1.0
    out = frontend_forward(Tensor(impulse), bank).data
    for b, kernel in enumerate(bank.kernels):
        power = np.abs(np.fft.fft(materialize(kernel).h, N)) ** 2
        spectrum = np.fft.fft(np.roll(out[b], -N // 2))
        mask = power > 1e-8
        assert np.max(np.abs(np.angle(spectrum[mask]))) < 1e-8
        np.testing.assert_allclose(np.abs(spectrum), power, rtol=1e-8, atol=1e-10)


def test_zero_phase_output_spectrum():
    K, N = 8, 256
    bank = random_bank("zerophase", K, seed=5)
    x = np.zeros((1, N))
    x[0, 2 * K:N - 2 * K] = np.random.default_rng(6).standard_normal(N - 4 * K)
    out = frontend_forward(Tensor(x), bank).data
    X = np.fft.fft(x[0])
    for b, kernel in enumerate(bank.kernels):
        expected = np.abs(np.fft.fft(materialize(kernel).h, N)) ** 2 * X
        got = np.fft.fft(out[b])
        assert np.linalg.norm(got - expected) / np.linalg.norm(expected) < 1e-8


# ---------------------------------------------------------------- gradients

@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("kind,K", GRADIENT_CASES)
def test_frontend_backward_matches_finite_differences(kind, K, seed):
    bank = random_bank(kind, K, seed)
    rng = np.random.default_rng(seed + 100)
    x = Tensor(rng.standard_normal((1, 32)))
    upstream = rng.standard_normal((4, 32))
    saved = run_frontend(x, bank)
    grads = frontend_backward(upstream, saved, bank)

    def objective(_):
        return float(np.sum(frontend_forward(Tensor(x.data), bank).data * upstream))

    for kernel, analytic in zip(bank.kernels, grads.kernel_grads):
        numeric = finite_difference_grad(objective, kernel.params)
        assert max_relative_error(analytic, numeric.data) < 1e-4
    numeric_x = finite_difference_grad(lambda t: float(np.sum(frontend_forward(t, bank).data * upstream)), x)
    assert max_relative_error(grads.input_grad, numeric_x.data) < 1e-4


def test_free_backward_matches_generic_conv1d():
    bank = random_bank("free", 7, seed=8)
    rng = np.random.default_rng(9)
    x = Tensor(rng.standard_normal((1, 50)))
    upstream = rng.standard_normal((4, 50))
    grads = frontend_backward(upstream, run_frontend(x, bank), bank)

    weights = Tensor(np.stack([k.params.data for k in bank.kernels])[:, None, :], requires_grad=True)
    with Graph() as graph:
        out = ops.conv1d(Tensor(x.data), weights)
    backward_from(graph, out, upstream)
    np.testing.assert_allclose(np.stack(grads.kernel_grads), weights.grad[:, 0, :], atol=1e-10)


def test_type1_shared_gradient_is_sum_of_mirrored_taps():
    kernel = FrontendKernel("type1", 5, [0.1, 0.2, 0.3])
    with Graph() as graph:
        taps = kernel.taps_tensor()
    upstream = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    backward_from(graph, taps, upstream)
    np.testing.assert_allclose(kernel.params.grad, [1 + 5, 2 + 4, 3])


def test_type3_center_gets_no_gradient_and_stays_zero():
    kernel = FrontendKernel("type3", 5, [0.1, 0.2])
    with Graph() as graph:
        taps = kernel.taps_tensor()
    backward_from(graph, taps, np.array([1.0, 2.0, 100.0, 4.0, 5.0]))
    np.testing.assert_allclose(kernel.params.grad, [1 - 5, 2 - 4])


def test_backward_without_forward_state():
    bank = init_filterbank("type1", 5)
    with pytest.raises(GraphError):
        frontend_backward(np.zeros((4, 10)), None, bank)


# ---------------------------------------------------------------- initialisation and export

def test_gammatone_init_fixed_values():
    bank = init_filterbank("gammatone", 61, seed=3)
    for kernel in bank.kernels:
        p = kernel.gammatone_params()
        assert p.alpha == 1e5 and p.eta == 4.0


def test_gammatone_init_distributions():
    f_hz, beta_hz = [], []
    for seed in range(250):
        for kernel in init_filterbank("gammatone", 61, seed=seed).kernels:
            described = kernel.describe_params(1000.0)
            f_hz.append(described["f_hz"])
            beta_hz.append(described["beta_hz"])
    assert len(f_hz) == 1000
    assert stats.kstest(f_hz, "uniform", args=(10, 390)).pvalue > 0.01
    assert stats.kstest(beta_hz, "norm", args=(30, 6)).pvalue > 0.01


@pytest.mark.parametrize("kind", ["type1", "type2", "type3", "type4", "free", "zerophase"])
def test_static_init_respects_constraints(kind):
    kind = FrontendKind.parse(kind)
    K = default_kernel_length(kind)
    bank = init_filterbank(kind, K, seed=0)
    again = init_filterbank(kind, K, seed=0)
    for a, b in zip(bank.kernels, again.kernels):
        assert np.array_equal(a.params.data, b.params.data)
        h = materialize(a).h
        assert np.any(h != 0)
        if kind.symmetric:
            assert np.array_equal(h, h[::-1])
        if kind.antisymmetric:
            assert np.array_equal(h, -h[::-1])


def test_export_delta_kernels_flat():
    for record in export_kernels(delta_filterbank("free", 5)):
        np.testing.assert_allclose(record["response"]["magnitude"], 1.0)
        assert set(record) == {"kind", "K", "taps", "params", "response"}


def test_export_type2_group_delay():
    bank = init_filterbank("type2", 60)
    for kernel, record in zip(bank.kernels, export_kernels(bank)):
        resp = freq_response(FirCoefficients(record["taps"]), 1024)
        gd = np.asarray(record["response"]["group_delay"])
        np.testing.assert_allclose(gd[resp.valid], 29.5, atol=1e-4)


def test_export_zero_phase_is_squared_magnitude():
    bank = random_bank("zerophase", 9, seed=2)
    for kernel, record in zip(bank.kernels, export_kernels(bank)):
        single = freq_response(materialize(kernel), 1024)
        np.testing.assert_allclose(record["response"]["magnitude"], single.magnitude ** 2)
        assert not np.any(record["response"]["phase_rad"])
