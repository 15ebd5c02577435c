#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "osr/decision.hpp"
#include "osr/eval.hpp"
#include "osr/rng.hpp"

using namespace osr;
using namespace osr::decision;

namespace {

CentroidSet two_centroids() {
    CentroidSet s;
    s.centroids = Matrix::from_rows({{0, 0}, {2, 0}});
    s.class_ids = {10, 20};
    return s;
}

CentroidSet random_centroids(int c, int dim, RngStream& rng, double spread = 3.0) {
    CentroidSet s;
    s.centroids = Matrix(c, dim);
    for (double& v : s.centroids.data) v = spread * rng.normal();
    for (int i = 0; i < c; ++i) s.class_ids.push_back(i);
    return s;
}

}  // namespace

TEST_CASE("uncertainty: centroid, midpoint, and hand-derived exterior point") {
    CentroidSet s = two_centroids();
    SUBCASE("exactly at a centroid") {
        auto r = uncertainty(Vec{0, 0}, s);
        CHECK(r.u == doctest::Approx(0.0));
        CHECK(r.nearest_class == 10);
        CHECK_FALSE(r.degenerate);
    }
    SUBCASE("midpoint is exactly 1") {
        auto r = uncertainty(Vec{1, 0}, s);
        CHECK(r.u == doctest::Approx(1.0));
    }
    SUBCASE("exterior point: distances 1 and 3 give U = 1/3") {
        auto r = uncertainty(Vec{3, 0}, s);
        CHECK(r.u == doctest::Approx(1.0 / 3.0));
        CHECK(r.nearest_class == 20);
    }
}

TEST_CASE("uncertainty: degenerate all-identical case is flagged U = 1") {
    CentroidSet s;
    s.centroids = Matrix::from_rows({{1, 1}, {1, 1}, {1, 1}});
    s.class_ids = {0, 1, 2};
    auto r = uncertainty(Vec{1, 1}, s);
    CHECK(r.u == doctest::Approx(1.0));
    CHECK(r.degenerate);
}

TEST_CASE("uncertainty: zero exactly when the embedding sits on its nearest centroid") {
    RngStream rng(14);
    for (int it = 0; it < 100; ++it) {
        CentroidSet s = random_centroids(3, 2, rng);
        Vec e{rng.normal(), rng.normal()};
        bool on_centroid = false;
        for (int c = 0; c < s.size(); ++c)
            if (e[0] == s.centroids(c, 0) && e[1] == s.centroids(c, 1)) on_centroid = true;
        if (!on_centroid) CHECK(uncertainty(e, s).u > 0.0);
        const int pick = static_cast<int>(rng.uniform_int(3));
        CHECK(uncertainty(s.centroids.row(pick), s).u == 0.0);
    }
}

TEST_CASE("threshold curve exports: csv columns and json summary fields") {
    CentroidSet s = two_centroids();
    Matrix emb = Matrix::from_rows({{0.1, 0}, {1.9, 0}, {0.2, 0}, {1.8, 0}});
    std::vector<int> labels{10, 20, 10, 20};
    auto config = ThresholdSelectionConfig::uniform_grid();
    ThresholdCurve curve = f1_vs_tau_curve(emb, labels, s, config);
    select_threshold_saturation(curve, config);

    const std::string csv = curve.to_csv();
    CHECK(csv.rfind("tau,f1,f1_prime\n", 0) == 0);
    // one line per grid point plus the header
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 102);

    const auto j = curve.to_json(config);
    CHECK(j.contains("tau_grid"));
    CHECK(j.at("epsilon1").get<double>() == 1.0);
    CHECK(j.at("epsilon2").get<double>() == 0.25);
    CHECK_FALSE(j.at("tau_star").is_null());
    CHECK_FALSE(j.at("tau_tilde").is_null());
}

TEST_CASE("uncertainty: matches the brute-force oracle on random instances") {
    RngStream rng(7);
    for (int it = 0; it < 200; ++it) {
        const int c = 2 + static_cast<int>(rng.uniform_int(5));
        const int dim = 1 + static_cast<int>(rng.uniform_int(6));
        CentroidSet s = random_centroids(c, dim, rng);
        Vec e(dim);
        for (double& v : e) v = 4.0 * rng.normal();
        std::vector<std::vector<double>> oc;
        for (int i = 0; i < c; ++i)
            oc.emplace_back(s.centroids.row(i).begin(), s.centroids.row(i).end());
        CHECK(uncertainty(e, s).u == doctest::Approx(oracle::uncertainty(e, oc)).epsilon(1e-12));
    }
}

TEST_CASE("uncertainty: exact scale and translation invariance") {
    // integer-valued coordinates, power-of-two scales and integer shifts
    // keep every FP operation exact, so equality is bitwise
    RngStream rng(8);
    CentroidSet s;
    s.centroids = Matrix(4, 3);
    for (double& v : s.centroids.data) v = static_cast<double>(rng.uniform_int(21)) - 10.0;
    s.class_ids = {0, 1, 2, 3};
    Vec e{3.0, -7.0, 2.0};
    const double base = uncertainty(e, s).u;

    SUBCASE("scaling by s > 0") {
        for (double k : {0.25, 2.0, 1024.0}) {
            CentroidSet scaled = s;
            for (double& v : scaled.centroids.data) v *= k;
            Vec es = e;
            for (double& v : es) v *= k;
            CHECK(uncertainty(es, scaled).u == base);
        }
    }
    SUBCASE("translation") {
        Vec shift{10.0, -3.0, 7.0};
        CentroidSet moved = s;
        for (int i = 0; i < moved.centroids.rows; ++i)
            for (int j = 0; j < 3; ++j) moved.centroids(i, j) += shift[j];
        Vec em = e;
        for (int j = 0; j < 3; ++j) em[j] += shift[j];
        CHECK(uncertainty(em, moved).u == base);
    }
    SUBCASE("arbitrary real transforms agree to machine precision") {
        CentroidSet r = random_centroids(4, 3, rng);
        Vec er{0.5, -1.3, 2.7};
        const double u0 = uncertainty(er, r).u;
        CentroidSet t = r;
        Vec et = er;
        for (double& v : t.centroids.data) v = v * 1.7 + 0.3;
        for (double& v : et) v = v * 1.7 + 0.3;
        CHECK(uncertainty(et, t).u == doctest::Approx(u0).epsilon(1e-12));
    }
}

TEST_CASE("uncertainty: U approaches 1 far from all centroids") {
    RngStream rng(9);
    CentroidSet s = random_centroids(5, 3, rng, 1.0);
    // centroid diameter
    double diameter = 0.0;
    for (int a = 0; a < s.size(); ++a)
        for (int b = a + 1; b < s.size(); ++b)
            diameter = std::max(diameter,
                                std::sqrt(squared_distance(s.centroids.row(a), s.centroids.row(b))));
    Vec far{1e3 * diameter, 1e3 * diameter, 1e3 * diameter};
    CHECK(std::fabs(uncertainty(far, s).u - 1.0) < 0.01);
}

TEST_CASE("predict_open_set_u: boundary and monotonicity") {
    CentroidSet s = two_centroids();
    SUBCASE("U = 0 accepted at any tau") {
        CHECK(predict_open_set_u(Vec{0, 0}, s, 0.0).label == 10);
    }
    SUBCASE("tau = 0 rejects any off-centroid point") {
        CHECK(predict_open_set_u(Vec{0.5, 0}, s, 0.0).is_novel());
    }
    SUBCASE("U = 1/3 around tau") {
        CHECK(predict_open_set_u(Vec{3, 0}, s, 0.33).is_novel());
        CHECK(predict_open_set_u(Vec{3, 0}, s, 0.34).label == 20);
        // boundary equality counts as known
        auto r = predict_open_set_u(Vec{3, 0}, s, 1.0 / 3.0);
        CHECK(r.label == 20);
    }
    SUBCASE("raising tau never converts known to novel") {
        RngStream rng(10);
        for (int it = 0; it < 50; ++it) {
            Vec e{4.0 * rng.normal(), 4.0 * rng.normal()};
            bool was_known = false;
            for (double tau = 0.0; tau <= 1.0 + 1e-12; tau += 0.05) {
                const bool known = !predict_open_set_u(e, s, std::min(tau, 1.0)).is_novel();
                if (was_known) CHECK(known);
                was_known = known;
            }
        }
    }
}

TEST_CASE("f1_vs_tau_curve: endpoints and monotonicity on separated data") {
    // three tight clusters around the centroids
    CentroidSet s;
    s.centroids = Matrix::from_rows({{0, 0}, {10, 0}, {0, 10}});
    s.class_ids = {0, 1, 2};
    RngStream rng(11);
    const int per = 30;
    Matrix emb(3 * per, 2);
    std::vector<int> labels;
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < per; ++i) {
            emb(c * per + i, 0) = s.centroids(c, 0) + 0.3 * rng.normal();
            emb(c * per + i, 1) = s.centroids(c, 1) + 0.3 * rng.normal();
            labels.push_back(c);
        }
    auto config = ThresholdSelectionConfig::uniform_grid();
    ThresholdCurve curve = f1_vs_tau_curve(emb, labels, s, config);
    REQUIRE(curve.tau_grid.size() == 101);
    REQUIRE(curve.derivative.size() == 100);

    // tau = 1 accepts everything (U <= 1 for interior points; off-centroid
    // exterior points have U < 1 too since the nearest distance is smallest)
    std::vector<int> nearest_pred;
    for (int i = 0; i < emb.rows; ++i)
        nearest_pred.push_back(s.class_ids[s.nearest(emb.row(i))]);
    const double closed_set = eval::macro_f1(labels, nearest_pred, s.class_ids);
    CHECK(curve.f1_values.back() == doctest::Approx(closed_set));

    // tau = 0 rejects every off-centroid sample
    CHECK(curve.f1_values.front() == doctest::Approx(0.0));

    // monotone non-decreasing on this geometry
    for (std::size_t j = 0; j + 1 < curve.f1_values.size(); ++j)
        CHECK(curve.f1_values[j] <= curve.f1_values[j + 1] + 1e-12);

    CHECK_THROWS_AS(f1_vs_tau_curve(Matrix(0, 2), {}, s, config), InvalidInput);
}

TEST_CASE("select_threshold_saturation: hand-derived step curve") {
    auto config = ThresholdSelectionConfig::uniform_grid();  // step 0.01, eps 1 / 0.25
    ThresholdCurve curve;
    curve.tau_grid = config.tau_grid;
    for (double tau : curve.tau_grid) curve.f1_values.push_back(tau < 0.2999 ? 0.0 : 0.9);
    for (std::size_t j = 0; j + 1 < curve.tau_grid.size(); ++j)
        curve.derivative.push_back((curve.f1_values[j + 1] - curve.f1_values[j]) /
                                   (curve.tau_grid[j + 1] - curve.tau_grid[j]));
    const double tau_star = select_threshold_saturation(curve, config);
    // the ramp is the forward difference at 0.29 (jumping to 0.9 at 0.30);
    // the first grid point after the step has derivative 0 <= eps2
    CHECK(curve.tau_tilde.value() == doctest::Approx(0.29));
    CHECK(tau_star == doctest::Approx(0.30));
    CHECK(tau_star > curve.tau_tilde.value());
    // members of the grid
    bool on_grid = false;
    for (double tau : curve.tau_grid)
        if (tau == tau_star) on_grid = true;
    CHECK(on_grid);
}

TEST_CASE("select_threshold_saturation: flat curve has no saturation") {
    auto config = ThresholdSelectionConfig::uniform_grid();
    ThresholdCurve curve;
    curve.tau_grid = config.tau_grid;
    curve.f1_values.assign(curve.tau_grid.size(), 0.7);
    curve.derivative.assign(curve.tau_grid.size() - 1, 0.0);
    CHECK_THROWS_AS(select_threshold_saturation(curve, config), NoSaturationError);
}

TEST_CASE("nearest_rank_percentile: oracle agreement and hand-derived cases") {
    SUBCASE("scores 1..100 at alpha = 0.01") {
        std::vector<double> scores;
        for (int i = 1; i <= 100; ++i) scores.push_back(i);
        CHECK(nearest_rank_percentile(scores, 0.99) == doctest::Approx(99.0));
    }
    SUBCASE("all equal") {
        std::vector<double> scores(17, 3.5);
        for (double q : {0.01, 0.5, 0.99}) CHECK(nearest_rank_percentile(scores, q) == 3.5);
    }
    SUBCASE("median of 1,2,3,4 by nearest rank") {
        CHECK(nearest_rank_percentile({1, 2, 3, 4}, 0.5) == doctest::Approx(2.0));
    }
    SUBCASE("random instances match the sort oracle") {
        RngStream rng(12);
        for (int it = 0; it < 200; ++it) {
            const int n = 1 + static_cast<int>(rng.uniform_int(50));
            std::vector<double> v(n);
            for (double& x : v) x = rng.normal();
            const double q = 0.01 + 0.98 * rng.uniform();
            CHECK(nearest_rank_percentile(v, q) == oracle::percentile(v, q));
        }
    }
}

TEST_CASE("sweep_thresholds: single point, clipping, and constant-U degenerate case") {
    CentroidSet s = two_centroids();
    RngStream rng(13);
    Matrix emb(20, 2);
    std::vector<int> labels;
    for (int i = 0; i < 20; ++i) {
        const int c = i % 2;
        emb(i, 0) = s.centroids(c, 0) + 0.1 * rng.normal();
        emb(i, 1) = s.centroids(c, 1) + 0.1 * rng.normal();
        labels.push_back(s.class_ids[c]);
    }
    std::vector<double> train_scores;
    for (int i = 0; i < 50; ++i) train_scores.push_back(0.02 * i);

    SUBCASE("halfwidth 0 equals a direct evaluation") {
        SweepTable t = sweep_thresholds(emb, labels, s, train_scores, 0.5, 0.0, 0.01,
                                        SweepRule::uncertainty);
        REQUIRE(t.rows.size() == 1);
        std::vector<int> pred;
        for (int i = 0; i < emb.rows; ++i)
            pred.push_back(predict_open_set_u(emb.row(i), s, 0.5).label);
        std::vector<int> universe = s.class_ids;
        universe.push_back(kNovelLabel);
        CHECK(t.rows[0].macro_f1 == doctest::Approx(eval::macro_f1(labels, pred, universe)));
        CHECK_FALSE(t.clipped);
    }
    SUBCASE("alpha sweep centered near zero clips with a flag") {
        SweepTable t = sweep_thresholds(emb, labels, s, train_scores, 0.01, 0.05, 0.01,
                                        SweepRule::outlier_score);
        CHECK(t.clipped);
        CHECK(t.rows.front().value == doctest::Approx(0.0));
        CHECK(t.rows.back().value == doctest::Approx(0.06));
        CHECK(t.rows.size() == 7);  // 0, 0.01, ..., 0.06
    }
    SUBCASE("tau sweep leaving [0,1] clips with a flag") {
        SweepTable t = sweep_thresholds(emb, labels, s, train_scores, 0.98, 0.05, 0.01,
                                        SweepRule::uncertainty);
        CHECK(t.clipped);
        CHECK(t.rows.back().value == doctest::Approx(1.0));
        SweepTable inside = sweep_thresholds(emb, labels, s, train_scores, 0.5, 0.05, 0.01,
                                             SweepRule::uncertainty);
        CHECK_FALSE(inside.clipped);
    }
    SUBCASE("all test samples on centroids make the U sweep constant") {
        Matrix on(4, 2);
        std::vector<int> lab{10, 20, 10, 20};
        on(0, 0) = 0;
        on(0, 1) = 0;
        on(1, 0) = 2;
        on(1, 1) = 0;
        on(2, 0) = 0;
        on(2, 1) = 0;
        on(3, 0) = 2;
        on(3, 1) = 0;
        SweepTable t = sweep_thresholds(on, lab, s, train_scores, 0.5, 0.05, 0.01,
                                        SweepRule::uncertainty);
        for (const auto& row : t.rows) CHECK(row.macro_f1 == doctest::Approx(t.rows[0].macro_f1));
    }
}
