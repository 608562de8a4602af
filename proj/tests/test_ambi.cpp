#include <catch_amalgamated.hpp>

#include <random>

#include "mbi/ambi.hpp"
#include "mbi/fmbi.hpp"
#include "mbi/query.hpp"
#include "support.hpp"

using namespace mbi;

namespace {

struct AmbiFixture {
    test::TempDir dir{"ambi"};
    std::vector<Point> pts;
    uint32_t d;
    PageFile data;
    BufferPool pool;
    ambi::AmbiState state;

    AmbiFixture(std::vector<Point> points, uint32_t dim, uint64_t buffer, uint64_t seed = 11,
                uint32_t page_size = 512)
        : pts(std::move(points)), d(dim),
          data(test::write_dataset(dir.file("data"), pts, dim, page_size)), pool(buffer),
          state(pool, data, dir.file("work"), {.seed = seed}) {}
};

Box window_around(const Point& c, double half, uint32_t d) {
    Box w(d);
    for (uint32_t i = 0; i < d; ++i) {
        w.lo[i] = c.coords[i] - half;
        w.hi[i] = c.coords[i] + half;
    }
    return w;
}

}  // namespace

TEST_CASE("first window query is exact against the scan oracle") {
    AmbiFixture fx(test::random_points(30000, 2, 400), 2, 48);
    Box w = window_around(make_point({0.4, 0.6}), 0.05, 2);
    QueryResult r = fx.state.window({w});
    auto expect = test::window_oracle(fx.pts, w, 2);
    CHECK(test::same_points(r.points, expect, 2));
    CHECK(fx.state.initialized());
}

TEST_CASE("first knn query is exact against the sort oracle") {
    AmbiFixture fx(test::random_points(20000, 3, 401), 3, 48);
    Point q = make_point({0.5, 0.5, 0.5});
    QueryResult r = fx.state.knn({q, 64});
    auto expect = test::knn_oracle(fx.pts, q, 64, 3);
    CHECK(test::same_points(r.points, expect, 3));
}

TEST_CASE("repeated queries stop refining once their region is built") {
    AmbiFixture fx(test::random_points(25000, 2, 402), 2, 48);
    Box w = window_around(make_point({0.3, 0.3}), 0.04, 2);
    // the first run builds, the second may refine subspaces the first one
    // had to deactivate under buffer pressure, the third finds everything
    QueryResult r1 = fx.state.window({w});
    QueryResult r2 = fx.state.window({w});
    QueryResult r3 = fx.state.window({w});
    CHECK(test::same_points(r1.points, r2.points, 2));
    CHECK(test::same_points(r1.points, r3.points, 2));
    const auto& log = fx.state.refinement_log();
    REQUIRE(log.size() == 3);
    CHECK(log[2].subspaces_refined == 0);
    CHECK(log[2].pages_reloaded == 0);
}

TEST_CASE("focused workloads leave the rest of the space coarse") {
    AmbiFixture fx(test::random_points(40000, 2, 403), 2, 40);
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.4, 0.45);
    for (int i = 0; i < 20; ++i) {
        Box w = window_around(make_point({u(rng), u(rng)}), 0.01, 2);
        QueryResult r = fx.state.window({w});
        auto expect = test::window_oracle(fx.pts, w, 2);
        CHECK(test::same_points(r.points, expect, 2));
    }
    ambi::AmbiStats st = fx.state.stats();
    CHECK(st.unrefined_subspaces > 0);
    CHECK_FALSE(fx.state.fully_refined());
}

TEST_CASE("any query sequence stays exact regardless of refinement state") {
    AmbiFixture fx(test::clustered_points(30000, 2, 404), 2, 40);
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0, 1);
    for (int i = 0; i < 40; ++i) {
        if (i % 3 == 2) {
            Point q = make_point({u(rng), u(rng)});
            auto expect = test::knn_oracle(fx.pts, q, 16, 2);
            QueryResult r = fx.state.knn({q, 16});
            REQUIRE(test::same_points(r.points, expect, 2));
        } else {
            Box w = window_around(make_point({u(rng), u(rng)}), 0.03, 2);
            auto expect = test::window_oracle(fx.pts, w, 2);
            QueryResult r = fx.state.window({w});
            REQUIRE(test::same_points(r.points, expect, 2));
        }
    }
}

TEST_CASE("full coverage converges to the non-adaptive structure") {
    const uint64_t seed = 405;
    auto pts = test::random_points(30000, 2, seed);
    test::TempDir dir("conv");
    PageFile data = test::write_dataset(dir.file("data"), pts, 2, 512);

    BufferPool fpool(48);
    fmbi::bulk_load(fpool, data, dir.file("fmbi"), {.seed = 77});
    IndexHandle fix = IndexHandle::open(dir.file("fmbi"));
    BufferPool qp(64);
    IndexStats fstats = index_stats(fix, qp);

    BufferPool apool(48);
    ambi::AmbiState state(apool, data, dir.file("work"), {.seed = 77});
    // sweep until the fixed point: deferred children of dense subspaces only
    // refine on the next query that reaches them
    for (int round = 0; round < 8 && !state.fully_refined(); ++round)
        for (int gx = 0; gx < 6; ++gx)
            for (int gy = 0; gy < 6; ++gy) {
                Box w = make_box({gx / 6.0, gy / 6.0}, {(gx + 1) / 6.0, (gy + 1) / 6.0});
                state.window({w});
            }
    REQUIRE(state.fully_refined());
    ambi::AmbiStats astats = state.stats();
    CHECK(astats.points == pts.size());
    // This configuration (tiny C_B, buffer barely above it) splits qualified
    // subspaces aggressively during the first distribution, so the structures
    // agree only approximately; the benchmark-scale configuration is held to
    // a tighter bound in the acceptance suite.
    CHECK(std::abs(double(astats.leaf_count) - double(fstats.leaf_count)) <=
          0.05 * fstats.leaf_count);
    CHECK(std::abs(astats.total_area - fstats.total_area) <= 0.05 * fstats.total_area);
    CHECK(std::abs(astats.total_perimeter - fstats.total_perimeter) <=
          0.05 * fstats.total_perimeter);
}

TEST_CASE("buffer-sized dataset refines fully on the first query") {
    auto pts = test::random_points(2000, 2, 406);
    AmbiFixture fx(pts, 2, 128);
    Box all = make_box({-1, -1}, {2, 2});
    QueryResult r = fx.state.window({all});
    CHECK(r.points.size() == pts.size());
    CHECK(fx.state.fully_refined());
}

TEST_CASE("inserts append to leaves and chain on overflow") {
    auto pts = test::random_points(2000, 2, 407);
    AmbiFixture fx(pts, 2, 128);
    fx.state.window({make_box({-1, -1}, {2, 2})});  // fully refine

    PageCodec codec{512, 2, true};
    uint32_t cl = codec.leaf_capacity();
    // hammer one spot: the target leaf fills, then overflows into a chain
    Point spot = make_point({0.511, 0.511});
    for (uint32_t i = 0; i < cl + 1; ++i) {
        Point p = spot;
        p.id = 10000 + i;
        fx.state.insert(p);
    }
    CHECK(fx.state.chained_leaf_count() >= 1);
    CHECK(fx.state.chain_page_count() >= 1);

    // queries still see every inserted point
    Box w = window_around(spot, 1e-6, 2);
    QueryResult r = fx.state.window({w});
    CHECK(r.points.size() == cl + 1);

    // the qualifying leaves were repacked by that query
    CHECK(fx.state.region_clean(w));
}

TEST_CASE("single insert stays queryable") {
    auto pts = test::random_points(500, 2, 408);
    AmbiFixture fx(pts, 2, 128);
    fx.state.window({make_box({-1, -1}, {2, 2})});
    uint64_t before = fx.state.chain_page_count();
    Point p = make_point({0.9999, 0.9999}, 99999);
    fx.state.insert(p);
    CHECK(fx.state.chain_page_count() <= before + 1);
    QueryResult r = fx.state.window({window_around(p, 1e-9, 2)});
    REQUIRE(r.points.size() == 1);
    CHECK(r.points[0].id == 99999);
}

TEST_CASE("delete returns presence and removes the point") {
    auto pts = test::random_points(5000, 2, 409);
    AmbiFixture fx(pts, 2, 64);
    fx.state.window({make_box({-1, -1}, {2, 2})});

    Point victim = fx.pts[123];
    CHECK(fx.state.erase(victim));
    CHECK_FALSE(fx.state.erase(victim));  // second delete: absent

    std::vector<Point> remaining;
    for (auto& p : fx.pts)
        if (p.id != victim.id) remaining.push_back(p);
    auto expect = test::knn_oracle(remaining, victim, 5, 2);
    QueryResult r = fx.state.knn({victim, 5});
    CHECK(test::same_points(r.points, expect, 2));
}

TEST_CASE("emptied leaves disappear from queried regions") {
    auto pts = test::random_points(3000, 2, 410);
    AmbiFixture fx(pts, 2, 128);
    Box all = make_box({-1, -1}, {2, 2});
    fx.state.window({all});

    Box corner = make_box({0.0, 0.0}, {0.12, 0.12});
    uint64_t removed = 0;
    for (const Point& p : fx.pts)
        if (corner.contains(p)) removed += fx.state.erase(p) ? 1 : 0;
    REQUIRE(removed > 0);

    QueryResult r = fx.state.window({corner});
    CHECK(r.points.empty());
    CHECK(fx.state.region_clean(corner));
    CHECK(fx.state.point_count() == pts.size() - removed);
}

TEST_CASE("interleaved updates and queries remain oracle-exact") {
    auto pts = test::random_points(10000, 2, 411);
    AmbiFixture fx(pts, 2, 48);
    std::vector<Point> model = pts;  // live oracle set
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0, 1);
    uint64_t next_id = pts.size();

    for (int round = 0; round < 15; ++round) {
        for (int i = 0; i < 100; ++i) {
            Point p = make_point({u(rng), u(rng)}, next_id++);
            fx.state.insert(p);
            model.push_back(p);
        }
        for (int i = 0; i < 20; ++i) {
            size_t pick = rng() % model.size();
            if (fx.state.erase(model[pick])) model.erase(model.begin() + pick);
        }
        Box w = window_around(make_point({u(rng), u(rng)}), 0.05, 2);
        auto expect = test::window_oracle(model, w, 2);
        QueryResult r = fx.state.window({w});
        REQUIRE(test::same_points(r.points, expect, 2));
        CHECK(fx.state.region_clean(w));

        Point q = make_point({u(rng), u(rng)});
        auto kexp = test::knn_oracle(model, q, 16, 2);
        QueryResult kr = fx.state.knn({q, 16});
        REQUIRE(test::same_points(kr.points, kexp, 2));
    }
    CHECK(fx.state.point_count() == model.size());
}

TEST_CASE("updates arriving before any query are honored") {
    auto pts = test::random_points(5000, 2, 412);
    AmbiFixture fx(pts, 2, 48);
    Point p = make_point({0.42, 0.42}, 777777);
    fx.state.insert(p);  // forces initialization internally
    QueryResult r = fx.state.window({window_around(p, 1e-9, 2)});
    bool found = false;
    for (auto& x : r.points) found |= x.id == 777777;
    CHECK(found);
}

TEST_CASE("refinement log accounts queries in order") {
    AmbiFixture fx(test::random_points(20000, 2, 413), 2, 40);
    fx.state.window({window_around(make_point({0.2, 0.2}), 0.02, 2)});
    fx.state.window({window_around(make_point({0.8, 0.8}), 0.02, 2)});
    const auto& log = fx.state.refinement_log();
    REQUIRE(log.size() == 2);
    CHECK(log[0].query_id == 0);
    CHECK(log[1].query_id == 1);
    // the second query hits a different corner: something must be refined
    CHECK(log[1].subspaces_refined > 0);
}
