#include "doctest.h"
#include "duet/decoder.hpp"
#include "duet/errors.hpp"
#include "fixtures.hpp"

using namespace duet;
using namespace duet::decoder;
using ag::Var;

TEST_CASE("output shape and range") {
    Decoder dec({}, 1);
    CHECK(dec.config().output_size() == 32);
    auto q = Var::constant(duet::testing::random_image(4, 1));  // 48 numbers
    q.mutable_value().shape = {3, 16};
    CHECK_THROWS_AS(dec.decode(q), ConfigError);
    auto x = Var::constant(Tensor({2, 64}, 0.3));
    auto y = dec.decode(x).value();
    CHECK(y.shape == Shape{2, 3 * 32 * 32});
    for (double v : y.data) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
}

TEST_CASE("different queries decode differently") {
    Decoder dec({}, 2);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd;
    Tensor a({1, 64}), b({1, 64});
    for (double& v : a.data) v = nd(rng);
    for (double& v : b.data) v = nd(rng);
    CHECK(dec.decode(Var::constant(a)).value().data != dec.decode(Var::constant(b)).value().data);
}

TEST_CASE("parameter budget stays small") {
    Decoder dec({}, 1);
    CHECK(dec.params().numel() < 5'000'000);
    DecoderConfig big;
    big.in_dim = 768;
    big.upsamples = 3;
    CHECK(Decoder(big, 1).params().numel() < 5'000'000);
}
