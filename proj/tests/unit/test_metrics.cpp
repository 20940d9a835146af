#include <doctest.h>

#include <algorithm>
#include <map>
#include <random>
#include <sstream>

#include "helpers.hpp"
#include "logodiffuser/coreattn.hpp"
#include "logodiffuser/error.hpp"
#include "logodiffuser/metrics.hpp"
#include "logodiffuser/utf8.hpp"

using namespace logodiffuser;
using namespace logodiffuser::metrics;

namespace {

// Multiset overlap via sorted code points.
std::size_t overlap_oracle(std::u32string a, std::u32string b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::u32string common;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
    return common.size();
}

std::string random_word(std::mt19937_64& rng) {
    static const char32_t alphabet[] = U"abcdeLOGOé中Ж ";
    const std::size_t len = rng() % 7;
    std::u32string s;
    for (std::size_t i = 0; i < len; ++i) s += alphabet[rng() % (std::size(alphabet) - 1)];
    return encode_utf8(s);
}

}  // namespace

TEST_CASE("exact match") {
    CHECK(exact_match("logo", "logo"));
    CHECK_FALSE(exact_match("Logo", "logo"));
    CHECK(exact_match(" logo ", "logo"));
    CHECK(exact_match("　logo\n", "logo"));
    CHECK_FALSE(exact_match("lo go", "logo"));
    CHECK(exact_match("", "  "));
}

TEST_CASE("char F1 examples") {
    const auto same = char_f1("logo", "logo");
    CHECK(same.precision == 1.0);
    CHECK(same.recall == 1.0);
    CHECK(same.f1 == 1.0);

    const auto r = char_f1("lgo", "logo");
    const double p = static_cast<double>(overlap_oracle(U"lgo", U"logo")) / 3.0;
    const double rc = static_cast<double>(overlap_oracle(U"lgo", U"logo")) / 4.0;
    CHECK(r.precision == doctest::Approx(p));
    CHECK(r.recall == doctest::Approx(rc));
    CHECK(r.precision == 1.0);
    CHECK(r.recall == 0.75);
    CHECK(std::fabs(r.f1 - 0.8571) <= 1e-4);

    const auto none = char_f1("xyz", "logo");
    CHECK(none.precision == 0.0);
    CHECK(none.recall == 0.0);
    CHECK(none.f1 == 0.0);
    CHECK(char_f1("", "").f1 == 1.0);
    CHECK(char_f1("", "logo").f1 == 0.0);
    CHECK(char_f1("logo", "").f1 == 0.0);
    CHECK(char_f1("中文", "中").recall == 1.0);
    CHECK(char_f1(" ab ", "ab").f1 == 1.0);
    CHECK(char_f1("a b", "ab").precision == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("char F1 properties on random pairs") {
    std::mt19937_64 rng(12);
    for (int i = 0; i < 500; ++i) {
        const std::string a = random_word(rng);
        std::string b = (i % 3 == 0) ? a : random_word(rng);
        if (i % 7 == 0) b = " " + b + "\t";
        const auto ab = char_f1(a, b);
        const auto ba = char_f1(b, a);
        CHECK(ab.precision == ba.recall);
        CHECK(ab.recall == ba.precision);
        CHECK(ab.f1 <= 1.0);
        CHECK(ab.f1 >= 0.0);
        if (ab.precision + ab.recall > 0)
            CHECK(ab.f1 == doctest::Approx(2 * ab.precision * ab.recall / (ab.precision + ab.recall)));
        std::u32string ua = trim(decode_utf8(a)), ub = trim(decode_utf8(b));
        if (!ua.empty() && !ub.empty()) {
            const auto ov = static_cast<double>(overlap_oracle(ua, ub));
            CHECK(ab.precision == doctest::Approx(ov / static_cast<double>(ua.size())));
            CHECK(ab.recall == doctest::Approx(ov / static_cast<double>(ub.size())));
        }
        std::sort(ua.begin(), ua.end());
        std::sort(ub.begin(), ub.end());
        CHECK((ab.f1 == 1.0) == (ua == ub));
        if (exact_match(a, b)) CHECK(char_f1(a, b).f1 == 1.0);
    }
}

TEST_CASE("anagrams score full F1 without matching") {
    CHECK(char_f1("ogol", "logo").f1 == 1.0);
    CHECK_FALSE(exact_match("ogol", "logo"));
}

TEST_CASE("mask coverage complements off-mask mass") {
    const std::vector<double> uni(16 * 16, 1.0 / 16);
    std::vector<double> mask(16, 0.0);
    for (int i = 0; i < 4; ++i) mask[static_cast<std::size_t>(i)] = 1.0;
    const std::vector<int> rows{0, 5, 9};
    const ConstMatrixView<double> U(uni.data(), 16, 16);
    CHECK(mask_coverage(U, rows, mask) == doctest::Approx(0.25));

    std::vector<double> on(16 * 16, 0.0);
    for (int r = 0; r < 16; ++r) on[static_cast<std::size_t>(r * 16 + 2)] = 0.7;
    CHECK(mask_coverage(ConstMatrixView<double>(on.data(), 16, 16), rows, mask) == 1.0);

    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 100; ++trial) {
        const auto m = testutil::uniform(16 * 16, rng(), 0.0, 1.0);
        const auto frac = testutil::uniform(16, rng());
        const ConstMatrixView<double> M(m.data(), 16, 16);
        const std::vector<int> r{static_cast<int>(rng() % 16), static_cast<int>(rng() % 16)};
        const double cov = mask_coverage(M, r, frac);
        CHECK(cov >= 0.0);
        CHECK(cov <= 1.0);
        CHECK(std::fabs(cov + coreattn::off_mask_mass(M, r, frac) - 1.0) <= 1e-9);
    }
}

TEST_CASE("sweep aggregation: full grid, ordering and CSV") {
    const std::vector<double> ratios{1.0, 0.125, 0.5, 0.25, 0.75};
    const std::vector<int> steps{18, 8, 12, 10, 15};
    std::vector<SweepCell> cells;
    for (double r : ratios)
        for (int s : steps) cells.push_back({r, s, "mask_coverage", r * 100 + s, ""});
    const SweepTable t = sweep_aggregate(cells);
    CHECK(t.row_count() == 25);
    CHECK(t.missing_count() == 0);
    CHECK(t.ratios() == std::vector<double>{0.125, 0.25, 0.5, 0.75, 1.0});
    CHECK(t.steps() == std::vector<int>{8, 10, 12, 15, 18});
    CHECK(t.at("mask_coverage", 0.5, 12) == 62.0);

    std::istringstream csv(t.to_csv());
    std::string line;
    std::getline(csv, line);
    CHECK(line == "ratio,step,mask_coverage");
    std::vector<std::pair<double, int>> seen;
    while (std::getline(csv, line)) {
        const auto c1 = line.find(',');
        const auto c2 = line.find(',', c1 + 1);
        const double r = std::stod(line.substr(0, c1));
        const int s = std::stoi(line.substr(c1 + 1, c2 - c1 - 1));
        CHECK(std::stod(line.substr(c2 + 1)) == r * 100 + s);
        seen.emplace_back(r, s);
    }
    CHECK(seen.size() == 25);
    CHECK(std::is_sorted(seen.begin(), seen.end()));
    CHECK(t.to_csv().find('\r') == std::string::npos);

    // shuffled input gives the same bytes
    std::mt19937_64 rng(1);
    std::shuffle(cells.begin(), cells.end(), rng);
    CHECK(sweep_aggregate(cells).to_csv() == t.to_csv());
}

TEST_CASE("sweep aggregation: empty, missing, duplicate, multiple metrics") {
    CHECK(sweep_aggregate({}).to_csv() == "ratio,step\n");
    const std::vector<std::string> order{"mask_coverage"};
    CHECK(sweep_aggregate({}, {}, {}, order).to_csv() == "ratio,step,mask_coverage\n");

    std::vector<SweepCell> cells{{0.5, 8, "m", 1.0, ""}, {0.5, 10, "m", 2.0, ""}, {0.25, 8, "m", 3.0, ""}};
    const SweepTable t = sweep_aggregate(cells);
    CHECK(t.missing_count() == 1);
    CHECK(t.to_csv() == "ratio,step,m\n0.25,8,3\n0.25,10,NA\n0.5,8,1\n0.5,10,2\n");
    const std::vector<double> gr{0.75};
    CHECK(sweep_aggregate(cells, gr).missing_count() == 3);

    cells.push_back({0.5, 8, "m", 9.0, ""});
    try {
        sweep_aggregate(cells);
        FAIL("expected DuplicateCell");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::DuplicateCell);
    }

    std::vector<SweepCell> two{{0.5, 8, "b", 1.0, ""}, {0.5, 8, "a", 2.0, ""}};
    CHECK(sweep_aggregate(two).to_csv() == "ratio,step,b,a\n0.5,8,1,2\n");
    SweepTable grid({0.5}, {8}, {"a"});
    CHECK_THROWS_AS(grid.set("a", 0.6, 8, 1.0), Error);
}

TEST_CASE("number formatting round-trips") {
    for (double v : {0.125, 0.1, 1.0 / 3.0, 1e-12, 12345.678, 0.0})
        CHECK(std::stod(format_number(v)) == v);
    CHECK(format_number(0.125) == "0.125");
    CHECK(format_number(8.0) == "8");
}
