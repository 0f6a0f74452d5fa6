#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "bgn/gradcheck.hpp"
#include "bgn/graph.hpp"

using namespace bgn;

namespace {

EdgeScorerParams random_scorer(std::size_t d, RngStream& rng) {
    EdgeScorerParams p = EdgeScorerParams::create(d);
    p.fc1_w = rand_uniform({d, 2 * d}, -0.5, 0.5, rng, true);
    p.fc1_b = rand_uniform({d}, -0.1, 0.1, rng, true);
    p.fc2_w = rand_uniform({2, d}, -0.5, 0.5, rng, true);
    p.fc2_b = rand_uniform({2}, -0.1, 0.1, rng, true);
    return p;
}

// Single-edge logits helper: theta row 0 = (c0, c1), everything else unused.
EdgeLogits edge_theta(double c0, double c1) {
    // n=2 so rows are (0,0),(0,1),(1,0),(1,1); give every row the same pair.
    std::vector<double> v;
    for (int r = 0; r < 4; ++r) {
        v.push_back(c0);
        v.push_back(c1);
    }
    return EdgeLogits{Tensor({4, 2}, std::move(v)), 1, 2};
}

}  // namespace

TEST_CASE("project_features") {
    Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(project_features(x, eye).data() == x.data());

    Tensor zero = Tensor::zeros({2, 3});
    Tensor w({4, 3}, std::vector<double>(12, 0.7));
    for (double v : project_features(zero, w).data()) CHECK(v == 0.0);

    RngStream rng(5, 0);
    Tensor ws = rand_uniform({3, 4}, -1, 1, rng);
    double err = grad_check(
        [&](const Tensor& x2) { return sum_all(sigmoid(project_features(x2, ws))); },
        rand_normal({2, 4}, 0, 1, rng));
    CHECK(err < 1e-4);
}

TEST_CASE("pairwise_logits symmetry and range") {
    const std::size_t n = 3, d = 4;
    RngStream rng(9, 0);
    EdgeScorerParams scorer = random_scorer(d, rng);

    SECTION("identical node representations give symmetric theta") {
        // Two nodes share b + W_s x; their (i,j) and (j,i) rows coincide.
        Tensor b({n, d}, {0.2, 0.4, -0.1, 0.3,
                          0.2, 0.4, -0.1, 0.3,
                          0.9, -0.5, 0.2, 0.8});
        Tensor xproj = Tensor::zeros({n, d});
        EdgeLogits lg = pairwise_logits(b, xproj, 1, n, DgiVariant::full, scorer);
        for (std::size_t k = 0; k < 2; ++k) {
            CHECK(lg.theta.at(0 * n + 1, k) == Catch::Approx(lg.theta.at(1 * n + 0, k)));
        }
    }

    SECTION("all entries strictly inside (0,1)") {
        Tensor b = rand_normal({n, d}, 0, 2, rng);
        Tensor xproj = rand_normal({n, d}, 0, 2, rng);
        EdgeLogits lg = pairwise_logits(b, xproj, 1, n, DgiVariant::full, scorer);
        for (double v : lg.theta.data()) {
            CHECK(v > 0.0);
            CHECK(v < 1.0);
        }
    }

    SECTION("no_features output ignores x") {
        Tensor b = rand_normal({n, d}, 0, 1, rng);
        Tensor xproj1 = rand_normal({n, d}, 0, 1, rng);
        Tensor xproj2 = rand_normal({n, d}, 0, 1, rng);
        EdgeLogits l1 = pairwise_logits(b, xproj1, 1, n, DgiVariant::no_features, scorer);
        EdgeLogits l2 = pairwise_logits(b, xproj2, 1, n, DgiVariant::no_features, scorer);
        CHECK(l1.theta.data() == l2.theta.data());
    }
}

TEST_CASE("gumbel_softmax_adjacency hand values") {
    SECTION("equal channels with zero noise give one half") {
        for (double gamma : {1.0, 0.5, 0.05}) {
            Tensor noise = Tensor::zeros({4, 2});
            Tensor adj = gumbel_softmax_adjacency(edge_theta(0.4, 0.4), gamma, noise);
            CHECK(adj.at(0, 0, 1) == Catch::Approx(0.5));
            CHECK(adj.at(0, 1, 0) == Catch::Approx(0.5));
        }
    }

    SECTION("theta (0.7, 0.3), zero noise, gamma 0.5") {
        Tensor noise = Tensor::zeros({4, 2});
        Tensor adj = gumbel_softmax_adjacency(edge_theta(0.7, 0.3), 0.5, noise);
        CHECK(adj.at(0, 0, 1) == Catch::Approx(0.6899744811276125).epsilon(1e-12));
    }

    SECTION("diagonal is zero") {
        RngStream rng(3, 3);
        Tensor adj = gumbel_softmax_adjacency(edge_theta(0.7, 0.3), 0.05, rng);
        CHECK(adj.at(0, 0, 0) == 0.0);
        CHECK(adj.at(0, 1, 1) == 0.0);
    }

    SECTION("gamma must be positive") {
        CHECK_THROWS_AS(gumbel_softmax_adjacency(edge_theta(0.5, 0.5), 0.0,
                                                 Tensor::zeros({4, 2})),
                        ConfigError);
    }
}

TEST_CASE("channel pair sums to one before selection") {
    RngStream rng(21, 0);
    Tensor theta = rand_uniform({9, 2}, 0.01, 0.99, rng);
    Tensor noisy = add(theta, rand_gumbel({9, 2}, rng));
    Tensor soft = softmax_lastdim(mul_scalar(noisy, 1.0 / 0.05));
    for (std::size_t r = 0; r < 9; ++r)
        CHECK(std::abs(soft.at(r, 0) + soft.at(r, 1) - 1.0) <= 1e-12);
}

TEST_CASE("adjacency approaches the hard argmax as gamma shrinks") {
    RngStream rng(33, 0);
    // Fixed noise; |soft - hard| must shrink monotonically over gamma 1, 0.1, 0.01.
    Tensor noise = rand_gumbel({4, 2}, rng);
    EdgeLogits lg = edge_theta(0.64, 0.22);
    const double edge0 = noise.at(2) + 0.64;  // row (1,0) after adding theta
    const double edge1 = noise.at(3) + 0.22;
    const double hard = edge0 > edge1 ? 1.0 : 0.0;
    double prev_gap = 2.0;
    for (double gamma : {1.0, 0.1, 0.01}) {
        Tensor adj = gumbel_softmax_adjacency(lg, gamma, noise);
        const double gap = std::abs(adj.at(0, 1, 0) - hard);
        CHECK(gap < prev_gap);
        prev_gap = gap;
    }
}

TEST_CASE("edge-selection frequency follows softmax(theta) at any gamma") {
    // Gumbel-max: argmax_k (theta_k + g_k) picks k with prob softmax(theta)_k,
    // independent of temperature. With theta = (0.7, 0.3) that's sigma(0.4).
    const double p_expect = 1.0 / (1.0 + std::exp(-0.4));  // 0.59869...
    const int draws = 10000;
    for (double gamma : {1.0, 0.1, 0.05}) {
        RngStream rng(77, static_cast<std::uint64_t>(gamma * 1000));
        int hits = 0;
        for (int i = 0; i < draws; ++i) {
            Tensor adj = gumbel_softmax_adjacency(edge_theta(0.7, 0.3), gamma, rng);
            if (adj.at(0, 0, 1) > 0.5) ++hits;
        }
        const double freq = static_cast<double>(hits) / draws;
        const double sigma3 = 3.0 * std::sqrt(p_expect * (1.0 - p_expect) / draws);
        INFO("gamma " << gamma << " freq " << freq);
        CHECK(std::abs(freq - p_expect) < sigma3);
    }
}

TEST_CASE("gumbel adjacency gradient wrt theta matches finite differences") {
    RngStream rng(55, 0);
    Tensor noise = rand_gumbel({4, 2}, rng);
    Tensor theta0 = rand_uniform({4, 2}, 0.2, 0.8, rng);
    double err = grad_check(
        [&](const Tensor& th) {
            EdgeLogits lg{th, 1, 2};
            Tensor adj = gumbel_softmax_adjacency(lg, 0.5, noise);
            return sum_all(square(adj));
        },
        theta0);
    CHECK(err < 1e-3);
}

TEST_CASE("fully_connected_adjacency") {
    Tensor a2 = fully_connected_adjacency(1, 2);
    CHECK(a2.at(0, 0, 1) == 1.0);
    CHECK(a2.at(0, 1, 0) == 1.0);
    CHECK(a2.at(0, 0, 0) == 0.0);

    Tensor a3 = fully_connected_adjacency(1, 3);
    for (std::size_t i = 0; i < 3; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < 3; ++j) row += a3.at(0, i, j);
        CHECK(row == 2.0);
    }

    CHECK_THROWS_AS(fully_connected_adjacency(1, 1), ShapeError);
}

TEST_CASE("harden") {
    Tensor half({1, 2, 2}, {0.5, 0.5, 0.5, 0.5});
    Tensor hard = harden(half, 0.5);
    for (double v : hard.data()) CHECK(v == 0.0);

    Tensor strong({1, 2, 2}, {0.9, 0.9, 0.9, 0.9});
    for (double v : harden(strong, 0.5).data()) CHECK(v == 1.0);

    RngStream rng(2, 2);
    Tensor a = rand_uniform({1, 3, 3}, 0.0, 1.0, rng);
    Tensor once = harden(a, 0.4);
    Tensor twice = harden(once, 0.4);
    CHECK(once.data() == twice.data());
}

TEST_CASE("no_features adjacency distribution is window-independent") {
    // The static-graph ablation: theta does not depend on the window, so the
    // noise-free adjacency is literally identical across windows.
    const std::size_t n = 4, d = 3;
    RngStream rng(8, 0);
    EdgeScorerParams scorer = random_scorer(d, rng);
    Tensor b = rand_normal({n, d}, 0, 1, rng);
    Tensor adj_prev;
    for (int window = 0; window < 3; ++window) {
        Tensor xproj = rand_normal({n, d}, 0, 1, rng);  // varies per window
        EdgeLogits lg = pairwise_logits(b, xproj, 1, n, DgiVariant::no_features, scorer);
        Tensor adj = eval_adjacency(lg, 0.05);
        if (adj_prev.defined()) CHECK(adj.data() == adj_prev.data());
        adj_prev = adj;
    }
}
