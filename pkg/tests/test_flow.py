"""Flow layers and model: exact invertibility, log-determinants, counting."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from krflow.autodiff import Tape, engine, fd_jacobian
from krflow.flow import (
    FlowConfig,
    KRNet,
    count_parameters,
    coupling_forward,
    init_params,
    mesh_knots,
    ndof_formula,
    nonlinear_forward,
    nonlinear_inverse,
    param_specs,
    rotation_forward,
)
from krflow.flow.layers import build_mesh
from krflow.autodiff import npops


def perturbed_model(cfg: FlowConfig, seed: int = 1, scale: float = 0.05) -> KRNet:
    model = KRNet(cfg, seed=seed)
    rng = np.random.default_rng(seed + 100)
    model.store.flat += scale * rng.standard_normal(model.store.size)
    return model


SMALL_CONFIGS = [
    FlowConfig(dim=2, n_blocks=2, depth=4, width=12, n_bins=8, bound=4.0),
    FlowConfig(dim=3, n_blocks=3, depth=3, width=8, n_bins=6, bound=5.0, width_decay=0.8),
    FlowConfig(dim=4, n_blocks=2, depth=2, width=8, use_rotation=False, use_nonlinear=False),
    FlowConfig(dim=5, n_blocks=4, depth=2, width=10, n_bins=5, bound=6.0, activation="relu"),
]


@pytest.mark.parametrize("cfg", SMALL_CONFIGS, ids=lambda c: f"d{c.dim}K{c.n_blocks}")
def test_roundtrip_exact(cfg):
    model = perturbed_model(cfg)
    rng = np.random.default_rng(0)
    x = rng.uniform(-1.2 * cfg.bound, 1.2 * cfg.bound, size=(200, cfg.dim))
    z, ld = model.forward(x)
    assert np.all(np.isfinite(z)) and np.all(np.isfinite(ld))
    assert np.abs(model.inverse(z) - x).max() < 1e-11


@pytest.mark.parametrize("cfg", SMALL_CONFIGS[:2], ids=lambda c: f"d{c.dim}K{c.n_blocks}")
def test_logdet_matches_jacobian(cfg):
    model = perturbed_model(cfg)
    rng = np.random.default_rng(1)
    x = rng.uniform(-3.0, 3.0, size=(5, cfg.dim))
    _, ld = model.forward(x)
    for b in range(x.shape[0]):
        J = fd_jacobian(lambda xi: model.forward(xi[None])[0][0], x[b])
        sign, ref = np.linalg.slogdet(J)
        assert sign > 0
        assert abs(ld[b] - ref) / max(abs(ref), 1.0) < 1e-6


def test_tape_and_numpy_paths_agree_exactly():
    cfg = SMALL_CONFIGS[1]
    model = perturbed_model(cfg)
    rng = np.random.default_rng(2)
    x = rng.uniform(-4.0, 4.0, size=(64, cfg.dim))
    z, ld = model.forward(x)
    tape = Tape(dirs=tuple(range(cfg.dim)), pairs=((0, 0), (0, 1)))
    pv = model.store.leaf_vars(tape)
    xv = engine.spatial_leaf(tape, x)
    zv, ldv = model.forward_on(pv, xv)
    assert np.array_equal(zv.v, z)
    assert np.array_equal(ldv.v, ld)
    assert np.array_equal(model.log_pdf_on(pv, xv).v, model.log_pdf(x))


def test_fresh_model_is_identity_with_normal_density():
    cfg = FlowConfig(dim=3, n_blocks=3, depth=4, width=12, n_bins=10, bound=5.0)
    model = KRNet(cfg, seed=3)
    rng = np.random.default_rng(3)
    x = rng.uniform(-7.0, 7.0, size=(100, 3))  # straddles the linear tails
    z, ld = model.forward(x)
    assert np.abs(z - x).max() < 1e-12
    assert np.abs(ld).max() < 1e-12
    ref = -0.5 * np.sum(x * x, axis=1) - 1.5 * np.log(2 * np.pi)
    assert np.abs(model.log_pdf(x) - ref).max() < 1e-12


def test_coupling_alternation_and_logdet_bounds():
    cfg = FlowConfig(dim=2, n_blocks=2, depth=2, width=8, use_rotation=False,
                     use_nonlinear=False)
    store = init_params(cfg, seed=4)
    rng = np.random.default_rng(4)
    store.flat += 0.5 * rng.standard_normal(store.size)
    p = store.views()
    x = rng.standard_normal((50, 2))

    y0, ld0 = coupling_forward(npops, p, "stage0.block0", x, 1, True, 0.6, "tanh")
    assert np.array_equal(y0[:, 0], x[:, 0])  # even index: leading passes through
    y1, _ = coupling_forward(npops, p, "stage0.block1", x, 1, False, 0.6, "tanh")
    assert np.array_equal(y1[:, 1], x[:, 1])  # odd index: trailing passes through

    # each coordinate's scale lies in [1-a, 1+a], so per-point bounds hold
    n_upd = 1
    assert np.all(ld0 >= n_upd * np.log(1 - 0.6) - 1e-12)
    assert np.all(ld0 <= n_upd * np.log(1 + 0.6) + 1e-12)


def test_rotation_is_general_linear_with_triangular_logdet():
    cfg = FlowConfig(dim=3, n_blocks=3, depth=1, width=8, use_nonlinear=False)
    store = init_params(cfg, seed=5)
    rng = np.random.default_rng(5)
    P = np.eye(3) + 0.3 * rng.standard_normal((3, 3))
    store.set_("stage0.rotation", P)
    x = rng.standard_normal((20, 3))
    y, ld = rotation_forward(npops, store.views(), "stage0", x)
    W = (np.tril(P, -1) + np.eye(3)) @ np.triu(P)
    assert np.abs(y - x @ W.T).max() < 1e-12
    assert ld == pytest.approx(np.log(np.abs(np.diag(np.triu(P)))).sum(), abs=1e-12)
    # the stored square holds exactly d_k^2 learnable scalars
    assert store.view("stage0.rotation").size == 9


class TestMonotoneMap:
    cfg = FlowConfig(dim=2, n_blocks=2, depth=1, width=8, n_bins=12, bound=3.0)

    def params(self, seed=6, scale=0.8):
        store = init_params(self.cfg, seed=seed)
        rng = np.random.default_rng(seed)
        store.set_("nonlinear.logits", scale * rng.standard_normal((2, 12)))
        store.set_("nonlinear.slope_raw", rng.uniform(-1.0, 1.0, size=2))
        return store.views()

    def mesh(self):
        return build_mesh(12, 0.6, 3.0)

    def test_monotone_and_fixed_at_bounds(self):
        p, mesh = self.params(), self.mesh()
        x = np.sort(np.linspace(-5, 5, 401))[:, None] * np.ones((1, 2))
        y, _ = nonlinear_forward(npops, p, x, mesh)
        assert np.all(np.diff(y, axis=0) > 0)
        yb, _ = nonlinear_forward(npops, p, np.array([[3.0, -3.0]]), mesh)
        assert np.abs(yb - np.array([[3.0, -3.0]])).max() < 1e-12

    def test_inverse_and_logdet(self):
        p, mesh = self.params(), self.mesh()
        rng = np.random.default_rng(7)
        x = rng.uniform(-4.5, 4.5, size=(300, 2))
        y, ld = nonlinear_forward(npops, p, x, mesh)
        assert np.abs(nonlinear_inverse(p, y, mesh) - x).max() < 1e-11
        h = 1e-6
        yp, _ = nonlinear_forward(npops, p, x + h, mesh)
        ym, _ = nonlinear_forward(npops, p, x - h, mesh)
        fd = np.log((yp - ym) / (2 * h)).sum(axis=1)
        assert np.abs(fd - ld).max() < 1e-6

    def test_tails_are_linear_with_slope_beta(self):
        p, mesh = self.params(), self.mesh()
        beta = np.logaddexp(0.0, p["nonlinear.slope_raw"])
        x = np.array([[4.0, -6.0], [5.5, -9.0]])
        y, ld = nonlinear_forward(npops, p, x, mesh)
        want = np.where(x > 0, beta * (x - 3.0) + 3.0, beta * (x + 3.0) - 3.0)
        assert np.abs(y - want).max() < 1e-12
        assert np.abs(ld - np.log(beta).sum()) .max() < 1e-12

    def test_mesh_is_graded_toward_center(self):
        knots = mesh_knots(32, 0.6)
        h = np.diff(knots)
        assert knots[0] == 0.0 and knots[-1] == 1.0
        assert np.all(h > 0)
        # edge bins about 4x wider than central ones
        assert h[0] / h.min() == pytest.approx(4.0, rel=0.05)
        mid = np.argmin(np.abs(knots - 0.5))
        assert h.min() == pytest.approx(min(h[mid - 1], h[mid]), rel=1e-12)


class TestCounting:
    def test_store_matches_enumeration(self):
        for cfg in SMALL_CONFIGS:
            store = init_params(cfg, seed=0)
            assert store.size == count_parameters(cfg, accounting="all")

    def test_formula_matches_core_count(self):
        cfg = FlowConfig(dim=8, n_blocks=3, depth=4, width=32, width_decay=0.9,
                         n_bins=32, bound=6.0)
        assert ndof_formula(cfg) == count_parameters(cfg, accounting="core")

    def test_plain_two_block_count_is_realnvp(self):
        # K=2, no rotation, no monotone map: L couplings with scale-bias
        d, L, w = 2, 8, 48
        cfg = FlowConfig(dim=d, n_blocks=2, depth=L, width=w,
                         use_rotation=False, use_nonlinear=False)
        h = w // 2
        per_net = 1 * w + w + w * h + h + h * h + h + h * w + w + w * 2 + 2
        want = L * (per_net + 2 * d + 1)  # + scale-bias + shift gain
        assert count_parameters(cfg, "all") == want

    def test_remainder_goes_to_first_block(self):
        cfg = FlowConfig(dim=8, n_blocks=7, depth=2, width=24)
        assert cfg.blocks() == (2, 1, 1, 1, 1, 1, 1)

    def test_stage_widths_decay_and_stay_even(self):
        cfg = FlowConfig(dim=8, n_blocks=3, depth=2, width=24, width_decay=0.9)
        ws = [cfg.stage_width(s) for s in range(cfg.n_stages)]
        assert ws[0] == 24
        assert all(w % 2 == 0 and w >= 4 for w in ws)
        assert ws == sorted(ws, reverse=True)

    def test_active_dims_shrink(self):
        # d=8, K=3: blocks (4, 2, 2); stages act on 8 then 6 coordinates
        cfg = FlowConfig(dim=8, n_blocks=3, depth=2, width=8)
        assert cfg.blocks() == (4, 2, 2)
        assert [cfg.active_dims(s) for s in range(cfg.n_stages)] == [8, 6]
        assert cfg.stage_split(0) == (6, 2)
        assert cfg.stage_split(1) == (4, 2)


def test_invalid_configs_rejected():
    with pytest.raises(ValueError):
        FlowConfig(dim=2, n_blocks=3)
    with pytest.raises(ValueError):
        FlowConfig(dim=2, width=7)
    with pytest.raises(ValueError):
        FlowConfig(dim=2, alpha=1.0)
    with pytest.raises(ValueError):
        FlowConfig(dim=4, n_blocks=2, block_sizes=(1, 2))
    with pytest.raises(ValueError):
        FlowConfig(dim=2, activation="gelu")


def test_checkpoint_roundtrip(tmp_path):
    cfg = SMALL_CONFIGS[1]
    model = perturbed_model(cfg)
    path = tmp_path / "model.npz"
    model.save(path)
    clone = KRNet.load(path)
    x = np.random.default_rng(8).uniform(-3, 3, size=(10, cfg.dim))
    assert np.array_equal(clone.log_pdf(x), model.log_pdf(x))
    assert clone.config == cfg


def test_sampling_matches_density_moments():
    # moderate perturbation so the model is a mildly warped normal
    cfg = FlowConfig(dim=2, n_blocks=2, depth=2, width=8, n_bins=8, bound=4.0)
    model = perturbed_model(cfg, seed=9, scale=0.02)
    rng = np.random.default_rng(9)
    s = model.sample(20000, rng)
    z, _ = model.forward(s)
    # push samples back: latent should be standard normal
    assert np.abs(z.mean(axis=0)).max() < 0.05
    assert np.abs(np.cov(z.T) - np.eye(2)).max() < 0.05


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 0.3))
def test_property_roundtrip_random_models(seed, scale):
    cfg = FlowConfig(dim=3, n_blocks=2, depth=2, width=8, n_bins=6, bound=4.0)
    model = KRNet(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    model.store.flat += scale * rng.standard_normal(model.store.size)
    x = rng.uniform(-6.0, 6.0, size=(40, 3))
    z, ld = model.forward(x)
    assert np.abs(model.inverse(z) - x).max() < 1e-10
    assert np.all(np.isfinite(ld))


def test_param_spec_names_are_unique():
    for cfg in SMALL_CONFIGS:
        names = [s.name for s in param_specs(cfg)]
        assert len(names) == len(set(names))
