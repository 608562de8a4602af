#include <catch_amalgamated.hpp>

#include <random>

#include "mbi/core.hpp"
#include "support.hpp"

using namespace mbi;

TEST_CASE("mbb_of basic") {
    auto b1 = mbb_of(std::vector<Point>{make_point({1, 2})}, 2);
    CHECK(b1.lo[0] == 1.0);
    CHECK(b1.lo[1] == 2.0);
    CHECK(b1.hi[0] == 1.0);
    CHECK(b1.hi[1] == 2.0);

    std::vector<Point> pts{make_point({0, 0}), make_point({2, 1}), make_point({1, 3})};
    auto b2 = mbb_of(pts, 2);
    CHECK(b2.lo[0] == 0.0);
    CHECK(b2.lo[1] == 0.0);
    CHECK(b2.hi[0] == 2.0);
    CHECK(b2.hi[1] == 3.0);

    CHECK_THROWS_AS(mbb_of(std::vector<Point>{}, 2), error);
}

TEST_CASE("mbb_of matches per-axis fold on random points") {
    auto pts = test::random_points(1000, 3, 42);
    Box got = mbb_of(pts, 3);
    // independent fold
    for (uint32_t ax = 0; ax < 3; ++ax) {
        double lo = pts[0].coords[ax], hi = pts[0].coords[ax];
        for (const Point& p : pts) {
            lo = std::min(lo, p.coords[ax]);
            hi = std::max(hi, p.coords[ax]);
        }
        CHECK(got.lo[ax] == lo);
        CHECK(got.hi[ax] == hi);
    }
}

TEST_CASE("mbb_of is permutation invariant") {
    auto pts = test::random_points(200, 2, 7);
    Box a = mbb_of(pts, 2);
    std::mt19937_64 rng(3);
    std::shuffle(pts.begin(), pts.end(), rng);
    Box b = mbb_of(pts, 2);
    for (uint32_t i = 0; i < 2; ++i) {
        CHECK(a.lo[i] == b.lo[i]);
        CHECK(a.hi[i] == b.hi[i]);
    }
}

TEST_CASE("longest_dimension") {
    CHECK(longest_dimension(make_box({0, 0}, {10, 5})) == 0);
    CHECK(longest_dimension(make_box({0, 0}, {4, 4})) == 0);  // tie -> lowest index
    CHECK(longest_dimension(make_box({0, 0, 0}, {1, 7, 3})) == 1);
}

TEST_CASE("mindist point to box") {
    Box b = make_box({0, 0}, {2, 2});
    CHECK(mindist(make_point({1, 1}), b) == 0.0);
    CHECK(mindist(make_point({3, 0}), b) == 1.0);
    CHECK(mindist(make_point({3, 3}), b) == Catch::Approx(std::sqrt(2.0)));
}

TEST_CASE("mindist zero iff contained") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-2, 2);
    Box b = make_box({-0.5, -0.25, 0.0}, {0.5, 1.0, 0.75});
    for (int i = 0; i < 2000; ++i) {
        Point q = make_point({u(rng), u(rng), u(rng)});
        // clamp oracle
        double s = 0;
        for (int j = 0; j < 3; ++j) {
            double c = std::clamp(q.coords[j], b.lo[j], b.hi[j]);
            s += (q.coords[j] - c) * (q.coords[j] - c);
        }
        CHECK(mindist(q, b) == Catch::Approx(std::sqrt(s)).margin(1e-12));
        CHECK((mindist(q, b) == 0.0) == b.contains(q));
    }
}

TEST_CASE("mindist monotone under box nesting") {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> u(-1, 1);
    for (int i = 0; i < 500; ++i) {
        Box a(2);
        Point p1 = make_point({u(rng), u(rng)});
        Point p2 = make_point({u(rng), u(rng)});
        a.expand(p1);
        a.expand(p2);
        Box bigger = a;
        bigger.expand(make_point({u(rng), u(rng)}));
        Point q = make_point({u(rng) * 3, u(rng) * 3});
        CHECK(mindist(q, bigger) <= mindist(q, a) + 1e-12);
    }
}

TEST_CASE("intersects") {
    CHECK(intersects(make_box({0, 0}, {1, 1}), make_box({1, 1}, {2, 2})));  // shared corner
    CHECK_FALSE(intersects(make_box({0, 0}, {1, 1}), make_box({2, 2}, {3, 3})));

    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> u(0, 1);
    for (int i = 0; i < 2000; ++i) {
        auto rand_box = [&] {
            Box b(2);
            Point p1 = make_point({u(rng), u(rng)});
            Point p2 = make_point({u(rng), u(rng)});
            b.expand(p1);
            b.expand(p2);
            return b;
        };
        Box a = rand_box(), b = rand_box();
        bool expect = true;  // per-axis interval overlap oracle
        for (int ax = 0; ax < 2; ++ax)
            expect = expect && std::max(a.lo[ax], b.lo[ax]) <= std::min(a.hi[ax], b.hi[ax]);
        CHECK(intersects(a, b) == expect);
    }
}

TEST_CASE("interiors_intersect excludes touching boxes") {
    CHECK_FALSE(interiors_intersect(make_box({0, 0}, {1, 1}), make_box({1, 0}, {2, 1})));
    CHECK(interiors_intersect(make_box({0, 0}, {1, 1}), make_box({0.5, 0.5}, {2, 2})));
}
