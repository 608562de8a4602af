#include <catch_amalgamated.hpp>

#include <map>

#include "mbi/splittree.hpp"
#include "support.hpp"

using namespace mbi;

TEST_CASE("two pages split at the first page's last point") {
    // C_L = 1: pages are single points
    std::vector<Point> pts{make_point({0, 0}, 0), make_point({1, 0}, 1)};
    SplitBuild sb = build_splittree(pts, 2, 1, 1, 2, 2);
    CHECK(sb.tree.split_count() == 1);
    REQUIRE(sb.seeds.size() == 2);
    const auto& root = sb.tree.nodes[sb.tree.root];
    CHECK(root.dim == 0);
    CHECK(root.coord == 0.0);
    CHECK(sb.tree.locate(make_point({0, 0})) == 0);
    CHECK(sb.tree.locate(make_point({1, 0})) == 1);
}

TEST_CASE("boundary points route left") {
    std::vector<Point> pts{make_point({4, 0}, 0), make_point({5, 1}, 1),
                           make_point({6, 2}, 2), make_point({7, 3}, 3)};
    SplitBuild sb = build_splittree(pts, 4, 1, 2, 2, 2);
    const auto& root = sb.tree.nodes[sb.tree.root];
    REQUIRE(root.dim == 0);
    REQUIRE(root.coord == 5.0);
    CHECK(sb.tree.locate(make_point({5.0, 9})) == 0);
    CHECK(sb.tree.locate(make_point({5.0001, 0})) == 1);
}

TEST_CASE("fanout and quantum arithmetic matches the reference configuration") {
    // alpha = floor(M / C_B) for the reference setup
    uint64_t m = 29325, cb = 204;
    uint64_t alpha = m / cb;
    CHECK(alpha == 143);
    CHECK(alpha * cb == 29172);

    // a tree of fanout 8 has 7 splits and 8 subspaces of quantum pages each
    const uint32_t cl = 5;
    const uint64_t q = 143, f = 8;
    auto pts = test::random_points(q * f * cl, 2, 99);
    SplitBuild sb = build_splittree(pts, q * f, cl, q, f, 2);
    CHECK(sb.tree.split_count() == 7);
    REQUIRE(sb.seeds.size() == 8);
    for (const auto& s : sb.seeds) CHECK((s.end - s.begin) == q * cl);
}

TEST_CASE("splits equal offline sorted medians for a power-of-two build") {
    const uint32_t cl = 4, d = 2;
    const uint64_t q = 2, f = 4;
    auto pts = test::random_points(q * f * cl, d, 1234);
    std::vector<Point> original = pts;

    SplitBuild sb = build_splittree(pts, q * f, cl, q, f, d);
    // Offline oracle for the first split: full sort on the longest dimension,
    // coordinate of the last point of the first half of the pages.
    Box whole = mbb_of(original, d);
    uint32_t dim0 = longest_dimension(whole);
    std::vector<Point> sorted = original;
    std::sort(sorted.begin(), sorted.end(),
              [&](const Point& a, const Point& b) { return point_less_on(a, b, dim0, d); });
    double expect = sorted[(q * f / 2) * cl - 1].coords[dim0];
    const auto& root = sb.tree.nodes[sb.tree.root];
    CHECK(root.dim == dim0);
    CHECK(root.coord == expect);

    for (const auto& s : sb.seeds) CHECK((s.end - s.begin) == q * cl);
}

TEST_CASE("non power-of-two fanout still yields exact quantum leaves") {
    const uint32_t cl = 3;
    const uint64_t q = 2, f = 5;
    auto pts = test::random_points(q * f * cl, 3, 5);
    SplitBuild sb = build_splittree(pts, q * f, cl, q, f, 3);
    CHECK(sb.tree.split_count() == f - 1);
    REQUIRE(sb.seeds.size() == f);
    for (const auto& s : sb.seeds) CHECK((s.end - s.begin) == q * cl);
}

TEST_CASE("page count contract is enforced") {
    auto pts = test::random_points(12, 2, 8);
    CHECK_THROWS_AS(build_splittree(pts, 5, 4, 2, 2, 2), error);
}

TEST_CASE("routing partitions points exactly across leaf subspaces") {
    const uint32_t cl = 16, d = 2;
    const uint64_t q = 2, f = 8;
    auto seed_pts = test::random_points(q * f * cl, d, 77);
    SplitBuild sb = build_splittree(seed_pts, q * f, cl, q, f, d);

    auto probes = test::random_points(10000, d, 78);
    std::map<uint32_t, uint64_t> counts;
    for (const Point& p : probes) {
        uint32_t s = sb.tree.locate(p);
        REQUIRE(s < f);
        counts[s]++;
    }
    uint64_t total = 0;
    for (auto& [s, c] : counts) total += c;
    CHECK(total == probes.size());  // each point lands in exactly one leaf

    // routing is consistent with the split planes along the root
    const auto& root = sb.tree.nodes[sb.tree.root];
    for (const Point& p : probes) {
        uint32_t s = sb.tree.locate(p);
        if (p.coords[root.dim] <= root.coord) {
            // must be reachable through the left subtree
            int32_t cur = root.left;
            std::vector<int32_t> stack{cur};
            bool found = false;
            while (!stack.empty()) {
                int32_t x = stack.back();
                stack.pop_back();
                if (sb.tree.nodes[x].subspace == static_cast<int32_t>(s)) found = true;
                if (sb.tree.nodes[x].subspace < 0) {
                    stack.push_back(sb.tree.nodes[x].left);
                    stack.push_back(sb.tree.nodes[x].right);
                }
            }
            CHECK(found);
        }
    }
}

TEST_CASE("seed ranges partition the sample in subspace order") {
    const uint32_t cl = 8;
    auto pts = test::random_points(4 * 4 * cl, 2, 31);
    SplitBuild sb = build_splittree(pts, 16, cl, 4, 4, 2);
    size_t expect_begin = 0;
    for (const auto& s : sb.seeds) {
        CHECK(s.begin == expect_begin);
        expect_begin = s.end;
        // seed mbb is tight over its range
        Box b = mbb_of(std::span<const Point>(pts.data() + s.begin, s.end - s.begin), 2);
        for (int i = 0; i < 2; ++i) {
            CHECK(s.mbb.lo[i] == b.lo[i]);
            CHECK(s.mbb.hi[i] == b.hi[i]);
        }
    }
    CHECK(expect_begin == pts.size());
}
