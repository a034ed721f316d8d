"""Oracle tests for the transfer diagnostics: PCA/GMM/ratio machinery
against closed forms, the exact-LP pinball fit against quantile ground
truth, and the engineered shift instances against their construction."""

import numpy as np
import pytest

from mia_audit import transfer
from mia_audit.errors import NumericError
from mia_audit.netcore import Layer, MlpModel
from mia_audit.transfer import (
    Gmm,
    coverage,
    default_directions,
    density_ratio,
    diagnose_instance,
    extract_embeddings,
    fpr_transfer_check,
    gmm_fit,
    gmm_log_density,
    linear_ratio_fit,
    make_counterexample_instance,
    make_scenario,
    make_theorem_instance,
    multiaccuracy_audit,
    multiaccuracy_violation,
    pca2,
    pinball_erm_linear,
    run_transfer_diagnostics,
)


# --- embeddings ---------------------------------------------------------------


def test_identity_hidden_layer_embeds_input():
    model = MlpModel(
        layers=[
            Layer(np.eye(3), np.zeros(3), "relu"),
            Layer(np.ones((3, 2)), np.zeros(2), "identity"),
        ]
    )
    x = np.array([[0.5, 1.0, 2.0], [0.0, 3.0, 0.25]])
    emb = extract_embeddings(model, x, tag="P")
    assert np.array_equal(emb.matrix, x)
    assert emb.tag == "P" and emb.dim == 3


def test_embedding_ignores_output_layer_weights():
    hidden = Layer(np.array([[1.0, -2.0], [0.5, 0.25]]), np.array([0.1, -0.1]), "relu")
    x = np.array([[1.5, -0.5], [2.0, 1.0]])
    out_a = Layer(np.array([[1.0], [1.0]]), np.zeros(1), "identity")
    out_b = Layer(np.array([[-7.0], [3.0]]), np.full(1, 9.0), "identity")
    emb_a = extract_embeddings(MlpModel(layers=[hidden, out_a]), x)
    emb_b = extract_embeddings(MlpModel(layers=[hidden, out_b]), x)
    assert np.array_equal(emb_a.matrix, emb_b.matrix)


def test_embedding_matches_hand_computation():
    w1 = np.array([[2.0, 0.0], [0.0, -1.0]])
    b1 = np.array([-1.0, 0.5])
    model = MlpModel(
        layers=[
            Layer(w1, b1, "relu"),
            Layer(np.ones((2, 1)), np.zeros(1), "identity"),
        ]
    )
    # x = (1, 2): pre = (2*1-1, -2+0.5) = (1, -1.5) -> relu -> (1, 0)
    emb = extract_embeddings(model, np.array([1.0, 2.0]))
    assert np.allclose(emb.matrix, [[1.0, 0.0]])


def test_zero_hidden_layer_model_rejected():
    flat = MlpModel(layers=[Layer(np.eye(2), np.zeros(2), "identity")])
    with pytest.raises(ValueError, match="hidden"):
        extract_embeddings(flat, np.zeros((1, 2)))


# --- pca ---------------------------------------------------------------------


def test_pca_line_has_vanishing_second_eigenvalue():
    t = np.linspace(-1.0, 1.0, 50)
    pts = np.column_stack([3.0 * t, -2.0 * t, t])
    res = pca2(pts)
    assert res.eigenvalues[1] <= 1e-12 * res.eigenvalues[0]


def test_pca_known_axis_aligned_covariance():
    rng = np.random.default_rng(7)
    scales = np.array([2.0, 1.0, 0.1, 0.05])
    pts = rng.normal(size=(20000, 4)) * scales
    res = pca2(pts)
    assert abs(res.eigenvalues[0] - 4.0) < 0.2
    assert abs(res.eigenvalues[1] - 1.0) < 0.05
    # directions recover the first two axes up to sign
    assert abs(res.directions[0][0]) > 0.99
    assert abs(res.directions[1][1]) > 0.99


def test_pca_isotropic_eigenvalue_ratio_near_one():
    rng = np.random.default_rng(11)
    res = pca2(rng.normal(size=(10000, 3)))
    assert res.eigenvalues[0] / res.eigenvalues[1] < 1.2


def test_pca_eigenvector_contract_and_orthonormality():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(400, 6)) @ rng.normal(size=(6, 6))
    res = pca2(pts)
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / (pts.shape[0] - 1)
    for lam, v in zip(res.eigenvalues, res.directions):
        assert np.linalg.norm(cov @ v - lam * v) <= 1e-6 * lam
    gram = res.directions @ res.directions.T
    assert np.allclose(gram, np.eye(2), atol=1e-10)
    # projection is the centered data in the eigenbasis
    assert np.allclose(res.projected, centered @ res.directions.T)


def test_pca_sign_convention_is_deterministic():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(100, 4))
    a = pca2(pts)
    b = pca2(pts.copy())
    assert np.array_equal(a.directions, b.directions)
    for v in a.directions:
        nz = np.flatnonzero(np.abs(v) > 1e-12)
        assert v[nz[0]] > 0


def test_pca_rejects_degenerate_inputs():
    with pytest.raises(ValueError, match="3 rows"):
        pca2(np.zeros((2, 3)))
    with pytest.raises(ValueError, match="2 feature"):
        pca2(np.zeros((10, 1)))
    with pytest.raises(ValueError, match="variance"):
        pca2(np.ones((10, 3)))


# --- gmm ----------------------------------------------------------------------


def _blobs(rng, centers, n_per, scale=0.3):
    parts = [c + scale * rng.normal(size=(n_per, 2)) for c in np.asarray(centers, dtype=float)]
    return np.concatenate(parts)


def test_gmm_k1_equals_closed_form_mle():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(200, 2)) @ np.array([[1.0, 0.4], [0.0, 0.7]])
    gmm = gmm_fit(pts, 1, seed=0)
    assert np.allclose(gmm.weights, [1.0], atol=1e-12)
    assert np.allclose(gmm.means[0], pts.mean(axis=0), atol=1e-8)
    assert np.allclose(gmm.covs[0], np.cov(pts.T, bias=True), atol=1e-8)


def test_gmm_recovers_two_separated_blobs():
    rng = np.random.default_rng(1)
    pts = _blobs(rng, [(-3.0, 0.0), (3.0, 1.0)], 400, scale=0.25)
    gmm = gmm_fit(pts, 2, seed=1)
    got = gmm.means[np.argsort(gmm.means[:, 0])]
    assert np.allclose(got[0], [-3.0, 0.0], atol=0.1)
    assert np.allclose(got[1], [3.0, 1.0], atol=0.1)
    assert np.allclose(gmm.weights.sum(), 1.0, atol=1e-12)
    assert gmm.weights.min() > 0


@pytest.mark.parametrize("seed", range(20))
def test_em_log_likelihood_nondecreasing(seed):
    rng = np.random.default_rng(100 + seed)
    pts = _blobs(rng, [(-1.5, 0.0), (1.0, 1.0), (0.0, -2.0)], 60, scale=0.6)
    gmm = gmm_fit(pts, 3, seed=seed)
    gains = np.diff(gmm.ll_trace)
    assert gains.min() >= -1e-10
    for j in range(gmm.k):
        evals = np.linalg.eigvalsh(gmm.covs[j])
        assert evals.min() >= 1e-8 - 1e-12


def test_gmm_rejects_too_few_points_and_bad_k():
    pts = np.zeros((19, 2)) + np.arange(19)[:, None]
    with pytest.raises(ValueError, match="at least 20"):
        gmm_fit(pts, 2, seed=0)
    with pytest.raises(ValueError, match="k must"):
        gmm_fit(pts, 0, seed=0)
    with pytest.raises(ValueError, match="n x 2"):
        gmm_fit(np.zeros((30, 3)), 2, seed=0)


def test_gmm_collapse_on_degenerate_data_raises_after_restarts():
    # a zero-variance duplicate cluster pins one component's covariance to the
    # floor on every iteration, while the overlapping cloud keeps EM moving
    # long enough for the consecutive-floor counter to trip on every restart
    rng = np.random.default_rng(0)
    cloud = np.concatenate([rng.normal(size=(100, 2)), [0.5, 0.0] + rng.normal(size=(100, 2))])
    pts = np.concatenate([cloud, np.tile([8.0, 8.0], (30, 1))])
    with pytest.raises(NumericError, match="restarts"):
        gmm_fit(pts, 3, seed=0)


def test_gmm_zero_variance_data_converges_with_floored_covariance():
    # degenerate data is not a collapse: EM converges immediately, covariance
    # pinned at the eigenvalue floor
    gmm = gmm_fit(np.tile([1.0, 2.0], (50, 1)), 1, seed=0)
    assert np.allclose(gmm.means[0], [1.0, 2.0])
    assert np.allclose(np.linalg.eigvalsh(gmm.covs[0]), 1e-8)
    assert gmm.floor_events >= 1


# --- density ratio ---------------------------------------------------------------


def _unit_gaussian_gmm(mean):
    return Gmm(
        weights=np.array([1.0]),
        means=np.array([mean], dtype=float),
        covs=np.eye(2)[None, :, :].copy(),
        ll_trace=[0.0],
    )


def test_density_ratio_identity():
    gmm = _unit_gaussian_gmm([0.3, -0.2])
    pts = np.array([[0.0, 0.0], [0.5, 0.5], [-1.0, 2.0]])
    ratios, floored = density_ratio(gmm, gmm, pts)
    assert np.allclose(ratios, 1.0, atol=1e-12)
    assert not floored.any()


def test_density_ratio_two_gaussian_closed_form():
    mu = np.array([1.2, -0.4])
    gmm_p = _unit_gaussian_gmm([0.0, 0.0])
    gmm_q = _unit_gaussian_gmm(mu)
    pts = np.array([[0.0, 0.0], [1.0, 1.0], [-0.5, 2.0], [2.0, -1.0]])
    ratios, floored = density_ratio(gmm_q, gmm_p, pts)
    expected = np.exp(pts @ mu - 0.5 * mu @ mu)
    assert np.allclose(ratios, expected, rtol=1e-10)
    assert not floored.any()
    # at the origin the closed form is exp(-|mu|^2 / 2)
    assert np.isclose(ratios[0], np.exp(-0.5 * mu @ mu), rtol=1e-10)


def test_density_ratio_floor_flagged_in_far_tail():
    gmm_p = _unit_gaussian_gmm([0.0, 0.0])
    gmm_q = _unit_gaussian_gmm([15.0, 0.0])
    ratios, floored = density_ratio(gmm_q, gmm_p, np.array([[15.0, 0.0]]))
    assert floored[0]
    assert np.isfinite(ratios[0]) and ratios[0] > 1.0


def test_gmm_log_density_integrates_mixture_weights():
    # half-half mixture of two unit Gaussians: density at a point is the average
    gmm = Gmm(
        weights=np.array([0.5, 0.5]),
        means=np.array([[0.0, 0.0], [2.0, 0.0]]),
        covs=np.stack([np.eye(2), np.eye(2)]),
        ll_trace=[0.0],
    )
    z = np.array([[1.0, 0.0]])
    single = np.exp(gmm_log_density(_unit_gaussian_gmm([0.0, 0.0]), z))
    # symmetric point: both components contribute equally
    assert np.isclose(np.exp(gmm_log_density(gmm, z))[0], single[0], rtol=1e-12)


# --- linear ratio fit --------------------------------------------------------------


def test_linear_fit_realizable_case_is_exact():
    rng = np.random.default_rng(2)
    phi = np.column_stack([np.ones(50), rng.normal(size=(50, 2))])
    v_true = np.array([1.0, 0.3, -0.7])
    fit = linear_ratio_fit(phi, phi @ v_true, intercept=False)
    assert fit.mse <= 1e-10
    assert np.allclose(fit.v, v_true, atol=1e-6)
    assert fit.intercept is None


def test_linear_fit_orthogonal_target_gives_zero_vector():
    rng = np.random.default_rng(4)
    phi = rng.normal(size=(300, 3))
    y = rng.normal(size=300)
    # project out the column space so the target is exactly orthogonal
    y -= phi @ np.linalg.lstsq(phi, y, rcond=None)[0]
    fit = linear_ratio_fit(phi, y, intercept=False)
    assert np.linalg.norm(fit.v) < 1e-8
    assert np.isclose(fit.mse, np.mean(y**2), rtol=1e-10)


def test_linear_fit_matches_gradient_descent_oracle():
    rng = np.random.default_rng(6)
    phi = rng.normal(size=(40, 3))
    y = rng.normal(size=40)
    fit = linear_ratio_fit(phi, y, intercept=False)

    gram = phi.T @ phi + 1e-8 * np.eye(3)
    v = np.zeros(3)
    lr = 1.0 / np.linalg.eigvalsh(2.0 * gram).max()
    for _ in range(200000):
        v -= lr * 2.0 * (gram @ v - phi.T @ y)
    assert np.allclose(fit.v, v, atol=1e-6)


def test_linear_fit_reports_intercept_variant():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(100, 2))
    y = 3.0 + x @ np.array([1.0, -2.0])
    fit = linear_ratio_fit(x, y, intercept=True)
    assert fit.mse <= 1e-10
    assert abs(fit.intercept - 3.0) < 1e-4
    no_int = linear_ratio_fit(x, y, intercept=False)
    assert no_int.mse > fit.mse


def test_linear_fit_rejects_underdetermined_and_misaligned():
    with pytest.raises(ValueError, match="rows"):
        linear_ratio_fit(np.zeros((2, 3)), np.zeros(2))
    with pytest.raises(ValueError, match="differ"):
        linear_ratio_fit(np.zeros((5, 2)), np.zeros(4))


# --- multiaccuracy and coverage ------------------------------------------------------


def test_constant_direction_violation_is_exactly_fpr_gap():
    rng = np.random.default_rng(9)
    n = 257
    phi = np.column_stack([np.ones(n), rng.normal(size=(n, 2))])
    scores = rng.normal(size=n)
    thresholds = rng.normal(size=n)
    alpha = 0.05
    cov = coverage(scores, thresholds)
    violation = multiaccuracy_violation(phi, scores, thresholds, np.array([1.0, 0.0, 0.0]), alpha)
    assert violation == pytest.approx(abs(cov - alpha), abs=1e-12)


def test_calibrated_median_predictor_has_vanishing_violation():
    rng = np.random.default_rng(10)
    n = 10000
    x = rng.uniform(size=(n, 2))
    phi = np.column_stack([np.ones(n), x])
    scores = x[:, 0] + rng.uniform(-1.0, 1.0, size=n)
    thresholds = x[:, 0]  # the exact conditional median
    violation = multiaccuracy_audit(phi, scores, thresholds, default_directions(3, 0), alpha=0.5)
    assert violation < 0.05


def test_erm_pinball_fit_is_multiaccurate_on_its_training_set():
    inst = make_theorem_instance(4000, seed=0)
    theta = pinball_erm_linear(inst.phi_p, inst.scores_p, 0.05)
    basis = [np.eye(3)[i] for i in range(3)]
    violation = multiaccuracy_audit(inst.phi_p, inst.scores_p, inst.phi_p @ theta, basis, 0.05)
    assert violation <= 0.02


def test_audit_requires_directions_and_coverage_requires_alignment():
    with pytest.raises(ValueError, match="direction"):
        multiaccuracy_audit(np.ones((3, 1)), np.zeros(3), np.ones(3), [], 0.5)
    with pytest.raises(ValueError, match="aligned"):
        coverage(np.zeros(3), np.zeros(4))


def test_default_directions_composition():
    v_extra = np.array([1.0, 2.0, 3.0])
    dirs = default_directions(3, seed=0, extra=[v_extra])
    assert len(dirs) == 3 + 64 + 1
    assert np.array_equal(dirs[0], [1.0, 0.0, 0.0])
    for v in dirs[3:-1]:
        assert np.isclose(np.linalg.norm(v), 1.0)
    assert np.array_equal(dirs[-1], v_extra)
    again = default_directions(3, seed=0, extra=[v_extra])
    assert all(np.array_equal(a, b) for a, b in zip(dirs, again))


# --- pinball ERM ----------------------------------------------------------------


def _pinball_objective(pred, s, level):
    r = s - pred
    return float(np.mean(level * np.maximum(r, 0.0) + (1.0 - level) * np.maximum(-r, 0.0)))


@pytest.mark.parametrize("level", [0.05, 0.25, 0.5])
def test_constant_feature_erm_is_an_empirical_quantile(level):
    rng = np.random.default_rng(12)
    s = rng.normal(size=501)
    phi = np.ones((501, 1))
    theta = pinball_erm_linear(phi, s, level)
    # no constant predictor can do better than the LP optimum
    best = _pinball_objective(theta[0], s, level)
    for q in np.quantile(s, [level - 0.01, level, level + 0.01]):
        assert best <= _pinball_objective(q, s, level) + 1e-9
    assert abs(coverage(s, np.full(501, theta[0])) - level) <= 2.0 / 501


def test_linear_erm_recovers_shifted_plane_under_uniform_noise():
    rng = np.random.default_rng(13)
    n, level = 5000, 0.25
    x = rng.uniform(size=(n, 2))
    phi = np.column_stack([np.ones(n), x])
    w = np.array([0.5, 1.5, -0.75])
    s = phi @ w + rng.uniform(-1.0, 1.0, size=n)
    theta = pinball_erm_linear(phi, s, level)
    # true conditional level-quantile is the plane shifted by 2*level - 1
    expected = w + np.array([2.0 * level - 1.0, 0.0, 0.0])
    assert np.allclose(theta, expected, atol=0.05)


def test_erm_coverage_tracks_level():
    inst = make_theorem_instance(2000, seed=1)
    theta = pinball_erm_linear(inst.phi_p, inst.scores_p, 0.1)
    assert abs(coverage(inst.scores_p, inst.phi_p @ theta) - 0.1) <= 3.0 / 2000


def test_erm_rejects_bad_level_and_empty_input():
    with pytest.raises(ValueError, match="level"):
        pinball_erm_linear(np.ones((5, 1)), np.zeros(5), 1.0)
    with pytest.raises(ValueError, match="nonempty"):
        pinball_erm_linear(np.ones((0, 1)), np.zeros(0), 0.5)


# --- transfer checks on engineered instances ---------------------------------------


def test_fpr_transfer_identical_distributions_within_noise():
    inst_a = make_theorem_instance(10000, seed=2)
    theta = pinball_erm_linear(inst_a.phi_p, inst_a.scores_p, 0.05)
    # a fresh P-draw plays the role of Q: no shift at all
    inst_b = make_theorem_instance(10000, seed=3)
    rep = fpr_transfer_check(
        inst_a.scores_p, inst_a.phi_p @ theta, inst_b.scores_p, inst_b.phi_p @ theta, 0.05
    )
    assert abs(rep["coverage_Q"] - rep["coverage_P"]) < 0.02
    assert not rep["flagged"]
    tight = fpr_transfer_check(
        inst_a.scores_p, inst_a.phi_p @ theta, inst_b.scores_p, inst_b.phi_p @ theta, 0.05,
        flag_tol=1e-9,
    )
    assert tight["flagged"] or tight["deviation"] == 0.0


def test_theorem_instance_transfers_at_ten_thousand():
    inst = make_theorem_instance(10000, seed=0)
    theta = pinball_erm_linear(inst.phi_p, inst.scores_p, 0.05)
    rep = fpr_transfer_check(
        inst.scores_p, inst.phi_p @ theta, inst.scores_q, inst.phi_q @ theta, 0.05
    )
    assert rep["deviation"] <= 0.02


def test_counterexample_breaks_transfer():
    inst = make_counterexample_instance(10000, seed=0)
    theta = pinball_erm_linear(inst.phi_p, inst.scores_p, 0.05)
    rep = fpr_transfer_check(
        inst.scores_p, inst.phi_p @ theta, inst.scores_q, inst.phi_q @ theta, 0.05
    )
    assert rep["deviation"] > 0.05
    assert rep["flagged"]


def test_theorem_deviation_shrinks_with_sample_size():
    devs = {}
    for n in (1000, 10000):
        per_seed = []
        for seed in range(5):
            inst = make_theorem_instance(n, seed)
            theta = pinball_erm_linear(inst.phi_p, inst.scores_p, 0.05)
            per_seed.append(
                fpr_transfer_check(
                    inst.scores_p, inst.phi_p @ theta, inst.scores_q, inst.phi_q @ theta, 0.05
                )["deviation"]
            )
        devs[n] = float(np.median(per_seed))
    assert devs[10000] < devs[1000]


def test_instance_generation_is_deterministic_and_positive():
    a = make_scenario("rough", 400, seed=5)
    b = make_scenario("rough", 400, seed=5)
    assert np.array_equal(a.phi_p, b.phi_p) and np.array_equal(a.scores_q, b.scores_q)
    assert a.true_ratio_p.min() > 0
    with pytest.raises(ValueError, match="scenario"):
        make_scenario("smooth", 100, seed=0)


def test_scenarios_share_their_p_sample_within_a_seed():
    rough = make_scenario("rough", 300, seed=7)
    linear = make_scenario("linear", 300, seed=7)
    assert np.array_equal(rough.phi_p, linear.phi_p)
    # scores differ: the tilt enters the score too
    assert not np.allclose(rough.scores_p, linear.scores_p)


def test_scenario_true_ratio_mse_orders_by_smoothness():
    for seed in range(3):
        mses = []
        for name in transfer.SCENARIOS:
            inst = make_scenario(name, 4000, seed)
            mses.append(linear_ratio_fit(inst.phi_p, inst.true_ratio_p, intercept=True).mse)
        assert mses[0] > mses[1] > mses[2]
        assert mses[2] < 1e-8  # in-span tilt is exactly linear


def test_scenario_ratio_means_are_near_one():
    # densities integrate to 1, so E_P[dQ/dP] = 1
    for name in transfer.SCENARIOS:
        inst = make_scenario(name, 20000, seed=0)
        assert abs(inst.true_ratio_p.mean() - 1.0) < 0.05


# --- full diagnostics -----------------------------------------------------------


def test_diagnostics_payload_and_determinism(tmp_path):
    report = run_transfer_diagnostics(alpha=0.05, n=600, gmm_k=2, seeds=(0, 1))
    payload = report.payload()
    for key in (
        "pca_eigenvalues",
        "gmm_params",
        "linear_fit_mse",
        "multiaccuracy_max_violation",
        "coverage_P",
        "coverage_Q",
    ):
        assert key in payload
    assert set(payload["scenario_mse_medians"]) == set(transfer.SCENARIOS)
    assert set(payload["per_seed"]) == {"0", "1"}
    again = run_transfer_diagnostics(alpha=0.05, n=600, gmm_k=2, seeds=(0, 1))
    assert transfer.render_transfer_json(report) == transfer.render_transfer_json(again)

    names = transfer.write_transfer_report(report, tmp_path)
    assert names == ["transfer_report.json"]
    text = (tmp_path / "transfer_report.json").read_text()
    assert text == transfer.render_transfer_json(report)


def test_diagnose_without_estimation_skips_gmm_keys():
    inst = make_theorem_instance(500, seed=4)
    rec = diagnose_instance(inst, 0.05, 2, seed=4, estimate_ratio=False)
    assert "gmm_params" not in rec
    assert "true_ratio_linear_mse" in rec and rec["true_ratio_linear_mse"] >= 0
    assert 0.0 <= rec["coverage_P"] <= 1.0
