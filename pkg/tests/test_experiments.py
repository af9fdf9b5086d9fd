import math
import re

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from svlab.experiments import (
    CSV_COLUMNS, ConvergenceRecord, FitError, StudyConfig, emit_csv, emit_svg_plot, fit_exponential,
    fit_h_rate, fit_rate, read_csv, run_convergence_study, total_dofs,
)
from svlab.mesh import refined, unit_square_initial
from svlab.polytools import dim_p

Ms = [100, 400, 1600, 6400, 25600]


def records(errs, Ms=Ms, p=2.0, method="h_version", flags=None):
    flags = flags or [""] * len(errs)
    return [ConvergenceRecord(method, p, 4, k, M, e, e, e, e, flag=f)
            for k, (M, e, f) in enumerate(zip(Ms, errs, flags))]


finite_pos = st.floats(1e-300, 1e300, allow_nan=False, allow_infinity=False)


def test_fit_rate_synthetic():
    r = fit_rate(records([M ** -0.5 for M in Ms]), "e_F")
    assert r.gamma == pytest.approx(1.0, abs=1e-10) and r.points_used == 5 and r.residual < 1e-10
    assert fit_rate(records([7 * M ** -1.0 for M in Ms]), "e_q").gamma == pytest.approx(2.0, abs=1e-10)


@given(scale=st.floats(1e-6, 1e6), gamma=st.floats(0.1, 5))
def test_fit_rate_scale_invariant(scale, gamma):
    base = [M ** (-gamma / 2) for M in Ms]
    a = fit_rate(records(base), "e_u_w1p", window=3).gamma
    b = fit_rate(records([scale * e for e in base]), "e_u_w1p", window=3).gamma
    assert a == pytest.approx(gamma, abs=1e-9)
    assert b == pytest.approx(a, abs=1e-9)


def test_fit_rate_window_and_flags():
    errs = [1.0, 1.0] + [M ** -1.0 for M in Ms[2:]]
    assert fit_rate(records(errs), "e_S", window=3).gamma == pytest.approx(2.0, abs=1e-10)
    flagged = records([M ** -1.0 for M in Ms], flags=["", "diverged", "", "", ""])
    assert fit_rate(flagged, "e_S").points_used == 4
    with pytest.raises(FitError):
        fit_rate(records([1.0, math.nan, math.nan, math.nan, 0.1]), "e_F")
    with pytest.raises(ValueError):
        fit_rate(records([1, 2, 3, 4, 5]), "bogus")


def test_h_and_exponential_fits():
    recs = records([2.0 ** (-4 * k) for k in range(5)])
    assert fit_h_rate(recs, "e_F") == pytest.approx(4.0, abs=1e-10)
    recs = [ConvergenceRecord("p_version", 2.0, N, 0, 10 * N, *(4 * [math.exp(-1.5 * N)])) for N in range(4, 9)]
    slope, r2 = fit_exponential(recs, "e_q")
    assert slope == pytest.approx(-1.5, abs=1e-10) and r2 == pytest.approx(1.0, abs=1e-12)


def test_record_validation():
    with pytest.raises(ValueError):
        ConvergenceRecord("q_version", 2.0, 4, 0, 10, 1, 1, 1, 1)
    with pytest.raises(ValueError):
        ConvergenceRecord("h_version", 2.0, 4, 0, 10, -1, 1, 1, 1)


@given(errs=st.lists(finite_pos, min_size=1, max_size=6), p=st.floats(1.1, 10))
def test_csv_round_trip(errs, p, tmp_path_factory):
    recs = [ConvergenceRecord("p_version", p, 4 + k, 0, 100 + k, e, e / 3, e * 7, e, wall_time_s=e)
            for k, e in enumerate(errs)]
    path = tmp_path_factory.mktemp("csv") / "r.csv"
    emit_csv(recs, path)
    assert path.read_text().splitlines()[0] == ",".join(CSV_COLUMNS)
    assert read_csv(path) == recs


def test_csv_empty_creates_no_file(tmp_path):
    path = tmp_path / "none.csv"
    with pytest.raises(ValueError):
        emit_csv([], path)
    assert not path.exists()


def test_svg_one_polyline_per_series(tmp_path):
    recs = (records([M ** -0.5 for M in Ms], p=2.0) + records([M ** -0.7 for M in Ms], p=3.0)
            + records([M ** -1.0 for M in Ms], p=2.0, method="p_version"))
    path = tmp_path / "f.svg"
    emit_svg_plot(recs, path, guide_slopes=(1.0, 2.0))
    doc = path.read_text()
    assert doc.startswith("<svg") and doc.rstrip().endswith("</svg>")
    series = re.findall(r'<polyline class="series" data-method="(\w+)" data-p="([\d.]+)"', doc)
    assert sorted(series) == [("h_version", "2.0"), ("h_version", "3.0"), ("p_version", "2.0")]
    assert len(re.findall(r'class="guide"', doc)) == 2
    with pytest.raises(ValueError):
        emit_svg_plot(records([math.nan] * 5), tmp_path / "g.svg")


def test_study_config_validation(tmp_path):
    with pytest.raises(ValueError):
        StudyConfig(method="x")
    with pytest.raises(ValueError):
        StudyConfig(solution="x")
    with pytest.raises(ValueError):
        StudyConfig.from_dict({"method": "h", "typo": 1})


def test_total_dofs_independent_count():
    for lev in (0, 1):
        m = refined(unit_square_initial(), lev)
        for N in (2, 4, 5):
            vel = 2 * (m.n_vertices + (N - 1) * m.n_edges + (N - 1) * (N - 2) // 2 * m.n_triangles)
            assert total_dofs(N, m) == vel + m.n_triangles * dim_p(N - 1)


@pytest.fixture(scope="module")
def smooth_h_study():
    return run_convergence_study(StudyConfig(method="h", solution="smooth", N=4, levels=3, record_timing=False))


def test_smooth_h_study(smooth_h_study):
    recs = smooth_h_study
    assert [r.level for r in recs] == [0, 1, 2, 3]
    eF = np.array([r.e_F for r in recs])
    ratios = eF[:-1] / eF[1:]
    assert np.all(ratios > 10) and np.all(ratios < 22)
    assert np.all(np.diff(ratios) > 0)
    for r in recs:
        assert r.M == total_dofs(4, refined(unit_square_initial(), r.level))
        assert r.wall_time_s == 0.0 and r.flag == ""


def test_smooth_p_study_exponential():
    recs = run_convergence_study(StudyConfig(method="p", solution="smooth", N=4, N_max=9, record_timing=False))
    slope, r2 = fit_exponential(recs, "e_F")
    assert slope < 0 and r2 > 0.99
    assert [r.N for r in recs] == list(range(4, 10))


def test_study_determinism(tmp_path):
    cfg = StudyConfig(method="p", solution="rough", p=3.0, N=2, N_max=4, record_timing=False)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    emit_csv(run_convergence_study(cfg), a)
    emit_csv(run_convergence_study(cfg), b)
    assert a.read_bytes() == b.read_bytes()


def test_study_records_divergence():
    recs = run_convergence_study(StudyConfig(method="p", solution="smooth", p=3.0, N=2, N_max=2,
                                             max_newton_iters=0, record_timing=False))
    assert recs[0].flag == "diverged" and math.isnan(recs[0].e_F)
