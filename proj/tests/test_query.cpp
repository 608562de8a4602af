#include <catch_amalgamated.hpp>

#include <random>
#include <set>

#include "mbi/fmbi.hpp"
#include "mbi/query.hpp"
#include "support.hpp"

using namespace mbi;

namespace {

struct QueryFixture {
    test::TempDir dir{"query"};
    uint32_t d;
    std::vector<Point> pts;
    PageFile data;
    IndexHandle ix;
    Box space;

    QueryFixture(size_t n, uint32_t dim, uint64_t seed) : d(dim) {
        pts = test::random_points(n, d, seed);
        data = test::write_dataset(dir.file("data"), pts, d, 1024);
        BufferPool pool(64);
        fmbi::bulk_load(pool, data, dir.file("index"), {.seed = seed});
        ix = IndexHandle::open(dir.file("index"));
        space = mbb_of(pts, d);
    }
};

Box random_window(const Box& space, double area_fraction, std::mt19937_64& rng, uint32_t d) {
    std::uniform_real_distribution<double> u(0, 1);
    double side = std::pow(area_fraction, 1.0 / d);
    Box w(d);
    for (uint32_t i = 0; i < d; ++i) {
        double ext = side * space.extent(i);
        double lo = space.lo[i] + u(rng) * (space.extent(i) - ext);
        w.lo[i] = lo;
        w.hi[i] = lo + ext;
    }
    return w;
}

}  // namespace

TEST_CASE("whole-space window returns every point") {
    QueryFixture fx(20000, 2, 200);
    BufferPool pool(64);
    QueryResult r = window_query(fx.ix, pool, {fx.space});
    CHECK(r.points.size() == fx.pts.size());
    for (size_t i = 0; i < r.points.size(); ++i) CHECK(r.points[i].id == i);
}

TEST_CASE("disjoint window reads nothing") {
    QueryFixture fx(5000, 2, 201);
    BufferPool pool(64);
    Box off = make_box({5.0, 5.0}, {6.0, 6.0});
    QueryResult r = window_query(fx.ix, pool, {off});
    CHECK(r.points.empty());
    CHECK(r.nodes_visited == 1);  // only the root is inspected
    CHECK(r.pages_read <= 1);     // the root page itself
}

TEST_CASE("random windows match the linear-scan oracle") {
    QueryFixture fx(30000, 2, 202);
    BufferPool pool(128);
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> area(64.0 / fx.pts.size(), 1024.0 / fx.pts.size());
    for (int i = 0; i < 300; ++i) {
        Box w = random_window(fx.space, area(rng), rng, 2);
        QueryResult r = window_query(fx.ix, pool, {w});
        auto expect = test::window_oracle(fx.pts, w, 2);
        REQUIRE(r.points.size() == expect.size());
        CHECK(test::same_points(r.points, expect, 2));
    }
}

TEST_CASE("windows match the oracle in higher dimensions") {
    QueryFixture fx(10000, 5, 203);
    BufferPool pool(128);
    std::mt19937_64 rng(100);
    for (int i = 0; i < 100; ++i) {
        Box w = random_window(fx.space, 0.01, rng, 5);
        QueryResult r = window_query(fx.ix, pool, {w});
        auto expect = test::window_oracle(fx.pts, w, 5);
        CHECK(test::same_points(r.points, expect, 5));
    }
}

TEST_CASE("knn at an existing point starts with that point") {
    QueryFixture fx(5000, 2, 204);
    BufferPool pool(64);
    QueryResult r = knn_query(fx.ix, pool, {fx.pts[123], 1});
    REQUIRE(r.points.size() == 1);
    CHECK(r.points[0].id == 123);
}

TEST_CASE("knn with k equal to N returns the entire dataset") {
    QueryFixture fx(2000, 2, 205);
    BufferPool pool(64);
    QueryResult r = knn_query(fx.ix, pool, {fx.pts[0], fx.pts.size()});
    CHECK(r.points.size() == fx.pts.size());
    CHECK_FALSE(r.truncated);
    QueryResult more = knn_query(fx.ix, pool, {fx.pts[0], fx.pts.size() + 5});
    CHECK(more.points.size() == fx.pts.size());
    CHECK(more.truncated);
}

TEST_CASE("knn matches the full-sort oracle") {
    QueryFixture fx(30000, 2, 206);
    BufferPool pool(128);
    std::mt19937_64 rng(101);
    std::uniform_real_distribution<double> u(0, 1);
    for (uint64_t k : {16, 64, 256}) {
        for (int i = 0; i < 100; ++i) {
            Point q = make_point({u(rng), u(rng)});
            QueryResult r = knn_query(fx.ix, pool, {q, k});
            auto expect = test::knn_oracle(fx.pts, q, k, 2);
            REQUIRE(r.points.size() == expect.size());
            CHECK(test::same_points(r.points, expect, 2));
        }
    }
}

TEST_CASE("knn optimality: no returned distance exceeds an excluded one") {
    QueryFixture fx(8000, 3, 207);
    BufferPool pool(64);
    std::mt19937_64 rng(55);
    std::uniform_real_distribution<double> u(0, 1);
    Point q = make_point({u(rng), u(rng), u(rng)});
    QueryResult r = knn_query(fx.ix, pool, {q, 32});
    double max_in = 0;
    std::set<uint64_t> in;
    for (const Point& p : r.points) {
        max_in = std::max(max_in, dist2(p, q, 3));
        in.insert(p.id);
    }
    for (const Point& p : fx.pts)
        if (!in.count(p.id)) CHECK(dist2(p, q, 3) >= max_in);
}

TEST_CASE("query cost grows with nested windows on a cold buffer") {
    QueryFixture fx(30000, 2, 208);
    std::mt19937_64 rng(77);
    Box inner = random_window(fx.space, 0.001, rng, 2);
    uint64_t prev = 0;
    for (double scale : {1.0, 4.0, 16.0, 64.0}) {
        Box w = inner;
        for (int i = 0; i < 2; ++i) {
            double grow = (std::sqrt(scale) - 1) * inner.extent(i) / 2;
            w.lo[i] -= grow;
            w.hi[i] += grow;
        }
        BufferPool pool(64);  // cold pool per query
        QueryResult r = window_query(fx.ix, pool, {w});
        CHECK(r.pages_read >= prev);
        prev = r.pages_read;
    }
}

TEST_CASE("warm buffer absorbs repeated identical queries") {
    QueryFixture fx(20000, 2, 209);
    BufferPool pool(512);
    std::mt19937_64 rng(31);
    Box w = random_window(fx.space, 0.01, rng, 2);
    QueryResult first = window_query(fx.ix, pool, {w});
    QueryResult second = window_query(fx.ix, pool, {w});
    CHECK(second.points.size() == first.points.size());
    CHECK(second.pages_read == 0);  // everything cached
}

TEST_CASE("invalid windows are rejected") {
    QueryFixture fx(1000, 2, 210);
    BufferPool pool(16);
    Box bad = make_box({1.0, 1.0}, {0.0, 0.0});
    CHECK_THROWS_AS(window_query(fx.ix, pool, {bad}), error);
    Box wrong_d = make_box({0, 0, 0}, {1, 1, 1});
    CHECK_THROWS_AS(window_query(fx.ix, pool, {wrong_d}), error);
}
