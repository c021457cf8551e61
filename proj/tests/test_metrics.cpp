#include <doctest.h>

#include <algorithm>

#include "oracles.hpp"
#include "pslab/metrics.hpp"
#include "pslab/rng.hpp"

using namespace pslab;

namespace {

// random result set with controllable structure
QueryResult random_result(Rng& rng, std::size_t n_gallery, std::size_t n_gt) {
    QueryResult qr;
    qr.query_id = static_cast<std::int64_t>(rng.uniform_index(1000));
    for (std::size_t g = 0; g < n_gt; ++g)
        qr.ground_truth.push_back({static_cast<std::int64_t>(rng.uniform_index(n_gallery)),
                                   oracles::random_box(rng, 0.1, 0.4)});
    const std::size_t n_pred = rng.uniform_index(n_gallery + 3);
    for (std::size_t p = 0; p < n_pred; ++p) {
        Box box = oracles::random_box(rng, 0.1, 0.4);
        // half the time, snap near a ground truth so hits actually occur
        if (!qr.ground_truth.empty() && rng.bernoulli(0.5)) {
            const GtEntry& g = qr.ground_truth[rng.uniform_index(qr.ground_truth.size())];
            box = g.box;
            qr.ranked.push_back({g.gallery_id, box, rng.uniform(0.0, 1.0)});
            continue;
        }
        qr.ranked.push_back(
            {static_cast<std::int64_t>(rng.uniform_index(n_gallery)), box, rng.uniform(0.0, 1.0)});
    }
    sort_ranked(qr.ranked);
    return qr;
}

}  // namespace

TEST_CASE("is_correct threshold semantics") {
    const Box gt(0.2, 0.2, 0.6, 0.6);
    CHECK(is_correct(gt, {gt}, 0.5));
    CHECK_FALSE(is_correct(Box(0.8, 0.8, 0.9, 0.9), {gt}, 0.5));

    // boundary: iou exactly 0.5 counts (inclusive threshold); power-of-two
    // coordinates keep the arithmetic exact
    const Box a(0.0, 0.0, 0.5, 0.5);    // area 0.25
    const Box b(0.0, 0.0, 0.25, 0.5);   // contained, area 0.125 -> iou = 0.5
    CHECK(iou(a, b) == 0.5);
    CHECK(std::abs(oracles::grid_count_iou(a, b) - 0.5) <= 2e-3);
    CHECK(is_correct(b, {a}, 0.5));

    CHECK_THROWS_AS(is_correct(gt, {gt}, 0.0), std::invalid_argument);
}

TEST_CASE("average_precision canonical cases") {
    const Box gt(0.2, 0.2, 0.6, 0.6);
    QueryResult qr;
    qr.ground_truth = {{3, gt}};

    SUBCASE("correct at rank 1") {
        qr.ranked = {{3, gt, 0.9}};
        CHECK(average_precision(qr, 0.5) == doctest::Approx(1.0));
    }
    SUBCASE("correct at rank 2 of 2") {
        qr.ranked = {{5, Box(0.7, 0.7, 0.9, 0.9), 0.95}, {3, gt, 0.9}};
        CHECK(average_precision(qr, 0.5) == doctest::Approx(0.5));
    }
    SUBCASE("no correct entries") {
        qr.ranked = {{5, Box(0.7, 0.7, 0.9, 0.9), 0.95}};
        CHECK(average_precision(qr, 0.5) == doctest::Approx(0.0));
    }
    SUBCASE("empty ground truth is an error") {
        qr.ground_truth.clear();
        CHECK_THROWS_AS(average_precision(qr, 0.5), std::invalid_argument);
    }
}

TEST_CASE("each ground truth is creditable once") {
    const Box gt(0.2, 0.2, 0.6, 0.6);
    QueryResult qr;
    qr.ground_truth = {{3, gt}};
    qr.ranked = {{3, gt, 0.9}, {3, gt, 0.8}};  // duplicate hit on the same GT
    CHECK(average_precision(qr, 0.5) == doctest::Approx(1.0));
}

TEST_CASE("cmc_at_k canonical cases") {
    const Box gt(0.2, 0.2, 0.6, 0.6);
    const Box miss(0.7, 0.7, 0.9, 0.9);

    std::vector<QueryResult> results(2);
    results[0].ground_truth = {{1, gt}};
    results[0].ranked = {{1, gt, 0.9}};  // first correct at rank 1
    results[1].ground_truth = {{2, gt}};
    results[1].ranked = {{5, miss, 0.95}, {6, miss, 0.9}, {2, gt, 0.8}};  // rank 3

    CHECK(cmc_at_k(results, 1, 0.5) == doctest::Approx(0.5));
    CHECK(cmc_at_k(results, 5, 0.5) == doctest::Approx(1.0));
    CHECK_THROWS_AS(cmc_at_k(results, 0, 0.5), std::invalid_argument);
}

TEST_CASE("cmc is non-decreasing in k") {
    Rng rng(5);
    std::vector<QueryResult> results;
    for (int q = 0; q < 40; ++q) results.push_back(random_result(rng, 10, 1 + rng.uniform_index(3)));
    double prev = 0.0;
    for (std::size_t k = 1; k <= 12; ++k) {
        const double v = cmc_at_k(results, k, 0.5);
        CHECK(v >= prev);
        prev = v;
    }
}

TEST_CASE("metrics match the naive references on random result sets") {
    Rng rng(9);
    for (int t = 0; t < 300; ++t) {
        std::vector<QueryResult> results;
        const std::size_t n_queries = 1 + rng.uniform_index(5);
        for (std::size_t q = 0; q < n_queries; ++q)
            results.push_back(random_result(rng, 8, 1 + rng.uniform_index(3)));
        for (const QueryResult& qr : results)
            CHECK(average_precision(qr, 0.5) ==
                  doctest::Approx(oracles::naive_average_precision(qr, 0.5)).epsilon(1e-12));
        for (std::size_t k : {std::size_t{1}, std::size_t{5}, std::size_t{10}})
            CHECK(cmc_at_k(results, k, 0.5) ==
                  doctest::Approx(oracles::naive_cmc_at_k(results, k, 0.5)).epsilon(1e-12));
    }
}

TEST_CASE("davies_bouldin canonical cases") {
    SUBCASE("two singleton clusters") {
        CHECK(davies_bouldin({{0.0}, {1.0}}, {0, 1}) == doctest::Approx(0.0));
    }
    SUBCASE("hand-checkable two-cluster layout") {
        // clusters at centroids 0 and 1, members at +/-0.1
        const std::vector<Embedding> pts = {{-0.1}, {0.1}, {0.9}, {1.1}};
        CHECK(davies_bouldin(pts, {0, 0, 1, 1}) == doctest::Approx(0.2));
    }
    SUBCASE("shrinking scatter strictly decreases the index") {
        double prev = std::numeric_limits<double>::infinity();
        for (double spread : {0.2, 0.1, 0.05, 0.01}) {
            const std::vector<Embedding> pts = {{-spread}, {spread}, {1.0 - spread}, {1.0 + spread}};
            const double db = davies_bouldin(pts, {0, 0, 1, 1});
            CHECK(db < prev);
            prev = db;
        }
    }
    SUBCASE("fewer than two clusters is an error") {
        CHECK_THROWS_AS(davies_bouldin({{0.0}, {0.1}}, {0, 0}), std::invalid_argument);
    }
    SUBCASE("coincident centroids are an error") {
        const std::vector<Embedding> pts = {{-0.1}, {0.1}, {-0.1}, {0.1}};
        CHECK_THROWS_AS(davies_bouldin(pts, {0, 0, 1, 1}), std::domain_error);
    }
}

TEST_CASE("davies_bouldin matches the independent implementation") {
    Rng rng(13);
    for (int t = 0; t < 100; ++t) {
        const std::size_t n_clusters = 2 + rng.uniform_index(4);
        const std::size_t dim = 2 + rng.uniform_index(6);
        std::vector<Embedding> pts;
        std::vector<std::int64_t> labels;
        for (std::size_t c = 0; c < n_clusters; ++c) {
            Embedding center(dim);
            for (double& v : center) v = rng.normal(0.0, 2.0);
            const std::size_t members = 1 + rng.uniform_index(6);
            for (std::size_t m = 0; m < members; ++m) {
                Embedding p = center;
                for (double& v : p) v += rng.normal(0.0, 0.3);
                pts.push_back(p);
                labels.push_back(static_cast<std::int64_t>(c));
            }
        }
        CHECK(davies_bouldin(pts, labels) ==
              doctest::Approx(oracles::naive_davies_bouldin(pts, labels)).epsilon(1e-9));
    }
}

TEST_CASE("sort_ranked breaks score ties by gallery id") {
    std::vector<RankedEntry> ranked = {{7, Box(0.1, 0.1, 0.2, 0.2), 0.5},
                                       {3, Box(0.1, 0.1, 0.2, 0.2), 0.5},
                                       {5, Box(0.1, 0.1, 0.2, 0.2), 0.9}};
    sort_ranked(ranked);
    CHECK(ranked[0].gallery_id == 5);
    CHECK(ranked[1].gallery_id == 3);
    CHECK(ranked[2].gallery_id == 7);
}
