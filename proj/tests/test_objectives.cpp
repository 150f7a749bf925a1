#include <cmath>

#include "doctest.h"
#include "duet/composer.hpp"
#include "duet/decoder.hpp"
#include "duet/errors.hpp"
#include "duet/objectives.hpp"
#include "fixtures.hpp"
#include "gradcheck.hpp"

using namespace duet;
using namespace duet::objectives;
using ag::Var;

namespace {

Var rows(std::size_t r, std::size_t c, std::vector<double> v) { return Var::constant(Tensor({r, c}, std::move(v))); }

// Unit query q = e0, and a photo at cosine distance dist from it.
Var at_distance(double dist) {
    const double c = 1.0 - dist;
    return rows(1, 2, {c, std::sqrt(std::max(0.0, 1.0 - c * c))});
}

const Var kQuery = rows(1, 2, {1.0, 0.0});

}  // namespace

TEST_CASE("cosine distance") {
    CHECK(distance({1, 2, 3}, {1, 2, 3}) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(distance({1, 2, 3}, {-1, -2, -3}) == doctest::Approx(2.0));
    // <(1,2,2),(2,0,1)> = 4, norms 3 and sqrt(5): 1 - 4 / (3 sqrt 5)
    CHECK(distance({1, 2, 2}, {2, 0, 1}) == doctest::Approx(1.0 - 4.0 / (3.0 * std::sqrt(5.0))).epsilon(1e-12));
    CHECK(distance({1, 0}, {0, 1}) == doctest::Approx(distance({0, 1}, {1, 0})));
    CHECK_THROWS_AS(distance({0, 0}, {1, 0}), NumericalError);
}

TEST_CASE("euclidean distance option") {
    CHECK(distance({1, 2, 2}, {1, 0, 0}, Metric::euclidean) == doctest::Approx(std::sqrt(8.0)).epsilon(1e-12));
    // Scaling a row changes the euclidean distance but not the cosine one.
    CHECK(distance({2, 0}, {1, 0}, Metric::euclidean) == doctest::Approx(1.0));
    CHECK(distance({2, 0}, {1, 0}) == doctest::Approx(0.0));
    CHECK(loss_trip(rows(1, 2, {0, 0}), rows(1, 2, {3, 4}), rows(1, 2, {0, 1}), 0.5, Metric::euclidean).item() ==
          doctest::Approx(5.0 - 1.0 + 0.5));
    CHECK(parse_metric("euclidean") == Metric::euclidean);
    CHECK_THROWS_AS(parse_metric("manhattan"), ConfigError);
    auto a = Var::parameter(Tensor({2, 3}, {0.3, -1, 2, 1, 0.5, -0.2}));
    auto b = Var::parameter(Tensor({2, 3}, {1, 1, 1, -1, 0.4, 0.9}));
    auto r = testing::grad_check([&] { return ag::sum(distance(a, b, Metric::euclidean)); }, {a, b});
    CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("triplet hinge") {
    CHECK(loss_trip(kQuery, at_distance(0.4), at_distance(0.4), 0.2).item() == doctest::Approx(0.2));
    CHECK(loss_trip(kQuery, at_distance(0.1), at_distance(0.9), 0.2).item() == doctest::Approx(0.0));
    CHECK(loss_trip(kQuery, at_distance(0.5), at_distance(0.4), 0.2).item() == doctest::Approx(0.3));
}

TEST_CASE("compositionality hinge") {
    // loss_comp(s_delta, s_plain, p+): the photo is fixed, the queries move.
    auto p = kQuery;
    CHECK(loss_comp(at_distance(0.3), at_distance(0.3), p, 0.1).item() == doctest::Approx(0.1));
    CHECK(loss_comp(at_distance(0.2), at_distance(0.6), p, 0.1).item() == doctest::Approx(0.0));
    CHECK(loss_comp(at_distance(0.6), at_distance(0.2), p, 0.1).item() == doctest::Approx(0.5));
}

TEST_CASE("neutral regularizer") {
    auto p = kQuery;
    CHECK(loss_reg(at_distance(0.4), at_distance(0.4), p).item() == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(loss_reg(at_distance(0.7), at_distance(0.4), p).item() == doctest::Approx(0.3));
    CHECK(loss_reg(at_distance(0.4), at_distance(0.7), p).item() == doctest::Approx(0.3));
}

TEST_CASE("text-to-text loss") {
    auto a = rows(2, 2, {1, 2, 3, 4});
    CHECK(loss_tt(a, a).item() == 0.0);
    CHECK(loss_tt(rows(1, 2, {0.0, 1.0}), rows(1, 2, {0.0, 0.0})).item() == doctest::Approx(1.0));
    // Batch mean of per-item norms: (5 + 0) / 2
    CHECK(loss_tt(rows(2, 2, {3, 4, 0, 0}), rows(2, 2, {0, 0, 0, 0})).item() == doctest::Approx(2.5));
}

TEST_CASE("region attention") {
    SUBCASE("identical patches give uniform weights") {
        auto patches = rows(3, 2, {0.3, -1, 0.3, -1, 0.3, -1});
        auto r = region_attention(rows(1, 2, {2, 5}), patches, 3);
        for (double w : r.weights.value().data) CHECK(w == doctest::Approx(1.0 / 3.0));
        CHECK(r.pooled.value()[0] == doctest::Approx(0.3));
        CHECK(r.pooled.value()[1] == doctest::Approx(-1.0));
    }
    SUBCASE("dot products (0, ln 3) give weights (1/4, 3/4)") {
        auto r = region_attention(rows(1, 1, {1.0}), rows(2, 1, {0.0, std::log(3.0)}), 2);
        CHECK(r.weights.value()[0] == doctest::Approx(0.25).epsilon(1e-12));
        CHECK(r.weights.value()[1] == doctest::Approx(0.75).epsilon(1e-12));
    }
    SUBCASE("shift invariance") {
        // Adding c*q/|q|^2 to every patch adds c to every dot product.
        auto q = rows(1, 2, {1.0, 0.0});
        auto a = region_attention(q, rows(2, 2, {0.5, 1, -1, 2}), 2).weights.value();
        auto b = region_attention(q, rows(2, 2, {3.5, 1, 2, 2}), 2).weights.value();
        CHECK(a[0] == doctest::Approx(b[0]).epsilon(1e-14));
    }
    CHECK_THROWS_AS(region_attention(rows(1, 2, {1, 0}), rows(0, 2, {}), 0), InputError);
}

TEST_CASE("region triplet") {
    // Positive patches pool to distance 0.3, negative to 0.8.
    auto pos = at_distance(0.3), neg = at_distance(0.8);
    CHECK(loss_rt(kQuery, pos, neg, 1, 0.2).item() == doctest::Approx(0.0));
    CHECK(loss_rt(kQuery, pos, pos, 1, 0.2).item() == doctest::Approx(0.2));
    // T = 1 reduces to the plain triplet on patch 0.
    auto p1 = at_distance(0.5), n1 = at_distance(0.45);
    CHECK(loss_rt(kQuery, p1, n1, 1, 0.2).item() == doctest::Approx(loss_trip(kQuery, p1, n1, 0.2).item()));
}

TEST_CASE("reconstruction loss") {
    auto t = rows(2, 4, std::vector<double>(8, 0.75));
    CHECK(loss_rec(t, t, t).item() == 0.0);
    auto c = rows(2, 4, std::vector<double>(8, 0.25));
    CHECK(loss_rec(c, c, t).item() == doctest::Approx(2 * 0.5));
    CHECK_THROWS_AS(loss_rec(rows(1, 4, {0, 0, 0, 0}), c, t), ConfigError);
}

TEST_CASE("total loss weighting and toggles") {
    // All six unweighted losses forced to exactly 1.
    BatchBundle b;
    b.s_plain = rows(1, 2, {1, 0});
    b.p_pos = rows(1, 2, {0, 1});       // d(s, p+) = 1
    b.p_neg = rows(1, 2, {0.8, std::sqrt(1 - 0.64)});  // d = 0.2: trip = 0.2 + 1 - 0.2 = 1
    b.s_delta = rows(1, 2, {-1, 0});    // d(sD, p+) = 1: comp = 0.1 + 1 - 1 = 0.1
    b.s_neutral = rows(1, 2, {0, -1});  // d(sN, p+) = 2: reg = |1 - 2| = 1
    b.s_fixed = rows(1, 2, {1, 1});     // |sF - sL| = 1
    b.patches_pos = b.p_pos;
    b.patches_neg = b.p_neg;
    b.tokens = 1;
    Margins m;
    m.comp = 1.0;  // comp = 1 + 1 - 1 = 1
    LossWeights w;
    LossToggles t;
    t.rec = false;
    auto rep = loss_total(b, w, m, t, nullptr);
    for (const auto& [k, v] : rep.breakdown) CHECK_MESSAGE(v == doctest::Approx(1.0), k);
    CHECK(rep.total.item() == doctest::Approx(1 + 0.5 + 0.1 + 0.1 + 1));

    SUBCASE("with rec = 1 the default weights sum to 3.7") {
        // Two reconstruction terms of 0.5 each: decoder outputs sigmoid(0) = 0.5 everywhere.
        decoder::DecoderConfig dc;
        dc.in_dim = 2;
        dc.grid = 1;
        dc.upsamples = 0;
        decoder::Decoder dec(dc, 1);
        for (auto& [n, v] : dec.params().all()) dec.params().at(n).mutable_value().fill(0.0);
        b.photo_pixels = rows(1, 3, {1, 1, 1});
        t.rec = true;
        auto full = loss_total(b, w, m, t, &dec);
        CHECK(full.breakdown.at("rec") == doctest::Approx(1.0));
        CHECK(full.total.item() == doctest::Approx(3.7));
    }
    SUBCASE("trip only equals loss_trip") {
        LossToggles only;
        only = {true, false, false, false, false, false};
        auto r = loss_total(b, w, m, only, nullptr);
        CHECK(r.breakdown.size() == 1);
        CHECK(r.total.item() == doctest::Approx(loss_trip(b.s_plain, b.p_pos, b.p_neg, m.trip).item()));
    }
    SUBCASE("all disabled is a configuration error") {
        LossToggles none{false, false, false, false, false, false};
        CHECK_THROWS_AS(loss_total(b, w, m, none, nullptr), ConfigError);
    }
    SUBCASE("disabled terms are not evaluated") {
        BatchBundle minimal;
        minimal.s_plain = b.s_plain;
        minimal.p_pos = b.p_pos;
        minimal.p_neg = b.p_neg;
        LossToggles only{true, false, false, false, false, false};
        CHECK_NOTHROW(loss_total(minimal, w, m, only, nullptr));
    }
}

TEST_CASE("ablation presets") {
    CHECK(LossToggles::preset("full").enabled().size() == 6);
    auto nc = LossToggles::preset("no_compositionality");
    CHECK_FALSE(nc.comp);
    CHECK_FALSE(nc.reg);
    CHECK(nc.enabled() == std::vector<std::string>{"trip", "tt", "rt", "rec"});
    CHECK(LossToggles::preset("no_tt").enabled() == std::vector<std::string>{"trip", "comp", "reg", "rt", "rec"});
    CHECK(LossToggles::preset("no_rec").enabled() == std::vector<std::string>{"trip", "comp", "reg", "tt", "rt"});
    CHECK(LossToggles::preset("no_rt").enabled() == std::vector<std::string>{"trip", "comp", "reg", "tt", "rec"});
    CHECK_THROWS_AS(LossToggles::preset("no_everything"), ConfigError);
}

TEST_CASE("hinge dead zone has exactly zero gradient") {
    auto s = Var::parameter(Tensor({1, 2}, {1.0, 0.1}));
    auto l = loss_trip(s, at_distance(0.05), at_distance(0.9), 0.2);
    REQUIRE(l.item() == 0.0);
    l.backward();
    CHECK(s.grad().data == std::vector<double>{0.0, 0.0});
}

TEST_CASE("weights and margins validation") {
    LossWeights w;
    w.comp = -1;
    CHECK_THROWS_AS(w.validate(), ConfigError);
    LossWeights zero{0, 0, 0, 0, 0, 0};
    CHECK_THROWS_AS(zero.validate(), ConfigError);
    Margins m;
    m.rt = 0;
    CHECK_THROWS_AS(m.validate(), ConfigError);
}
