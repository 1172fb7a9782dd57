#include <catch2/catch_amalgamated.hpp>

#include "lplab/config.hpp"
#include "lplab/errors.hpp"
#include "lplab/report.hpp"

using namespace lplab;

TEST_CASE("flat key = value parsing") {
    const std::string text =
        "# top comment\n"
        "global_key = 1\n"
        "\n"
        "[dataset]\n"
        "kind = blobs   # trailing comment\n"
        "n = 512\n"
        "noise = 0.75\n"
        "flags = a, b , c\n"
        "\n"
        "[prune]\n"
        "lambda = 0.9\n"
        "sparsities = 0.3,0.5,0.7\n"
        "enabled = true\n";
    auto cfg = Config::parse_string(text, "test.cfg");

    CHECK(cfg.get_long("global_key") == 1);
    CHECK(cfg.get_str("dataset.kind") == "blobs");
    CHECK(cfg.get_long("dataset.n") == 512);
    CHECK(cfg.get_double("dataset.noise") == 0.75);
    CHECK(cfg.get_list("dataset.flags") == std::vector<std::string>{"a", "b", "c"});
    CHECK(cfg.get_double_list("prune.sparsities") == std::vector<double>{0.3, 0.5, 0.7});
    CHECK(cfg.get_bool("prune.enabled", false));
    CHECK(cfg.get_bool("prune.missing", true));
    CHECK(cfg.get_str("prune.absent", "fallback") == "fallback");
    CHECK(cfg.has("prune.lambda"));
    CHECK_FALSE(cfg.has("dataset.lambda"));
}

TEST_CASE("errors carry file, line and field") {
    SECTION("missing key") {
        auto cfg = Config::parse_string("a = 1\n", "x.cfg");
        CHECK_THROWS_MATCHES(cfg.get_str("b"), ConfigError,
                             Catch::Matchers::MessageMatches(
                                 Catch::Matchers::ContainsSubstring("x.cfg") &&
                                 Catch::Matchers::ContainsSubstring("'b'")));
    }
    SECTION("bad number names the line") {
        auto cfg = Config::parse_string("[s]\nk = banana\n", "y.cfg");
        CHECK_THROWS_MATCHES(cfg.get_double("s.k"), ConfigError,
                             Catch::Matchers::MessageMatches(
                                 Catch::Matchers::ContainsSubstring("y.cfg:2") &&
                                 Catch::Matchers::ContainsSubstring("s.k")));
    }
    SECTION("malformed lines") {
        CHECK_THROWS_AS(Config::parse_string("just words\n"), ConfigError);
        CHECK_THROWS_AS(Config::parse_string("[unterminated\n"), ConfigError);
        CHECK_THROWS_AS(Config::parse_string("= value\n"), ConfigError);
    }
    SECTION("missing file") {
        CHECK_THROWS_AS(Config::parse_file("/nonexistent/path.cfg"), ConfigError);
    }
    SECTION("bad boolean") {
        auto cfg = Config::parse_string("k = maybe\n");
        CHECK_THROWS_AS(cfg.get_bool("k", false), ConfigError);
    }
}

TEST_CASE("later assignments win and raw text is preserved") {
    const std::string text = "[a]\nk = 1\nk = 2\n";
    auto cfg = Config::parse_string(text);
    CHECK(cfg.get_long("a.k") == 2);
    CHECK(cfg.raw_text() == text);
}

TEST_CASE("config hash is stable and content-sensitive") {
    const std::string a = "[s]\nk = 1\n";
    CHECK(config_hash(a) == config_hash(a));
    CHECK(config_hash(a) != config_hash("[s]\nk = 2\n"));
    CHECK(config_hash(a).size() == 16);
}

TEST_CASE("shortest round-trip double formatting") {
    for (double v : {0.1, 1.0 / 3.0, 12345.0, 1e-17, 0.4375, -2.5e300}) {
        const std::string s = fmt_double(v);
        double back = 0.0;
        std::sscanf(s.c_str(), "%lf", &back);
        CHECK(back == v);
    }
    CHECK(fmt_double(0.5) == "0.5");
    CHECK(fmt_double(2.0) == "2");
}
