#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "segkc/config.hpp"

using namespace segkc;

namespace {

std::string write_temp_config(const std::string& body) {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "segkc_config_test";
    fs::create_directories(dir);
    const std::string path = (dir / "test.cfg").string();
    std::ofstream os(path);
    os << body;
    return path;
}

}  // namespace

TEST_CASE("defaults validate") {
    RunConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    CHECK(cfg.kd_scope() == KdScope::kUnlabeled);
}

TEST_CASE("config file parsing: comments, whitespace, unknown keys, bad values") {
    const std::string path = write_temp_config(
        "# comment line\n"
        "seed = 9\n"
        "data.image_size = 32   # trailing comment\n"
        "loss.lambda2 = 0.5\n"
        "model.fusion = concat\n"
        "\n");
    const RunConfig cfg = parse_config_file(path);
    CHECK(cfg.seed == 9);
    CHECK(cfg.image_size == 32);
    CHECK(cfg.lambda2 == doctest::Approx(0.5));
    CHECK(cfg.fusion == "concat");

    const std::string unknown = write_temp_config("data.imagesize = 32\n");
    CHECK_THROWS_WITH_AS(parse_config_file(unknown),
                         "config error: unknown config key: data.imagesize", ConfigError);

    const std::string bad_value = write_temp_config("train.epochs = four\n");
    CHECK_THROWS_AS(parse_config_file(bad_value), ConfigError);

    const std::string no_eq = write_temp_config("train.epochs 4\n");
    CHECK_THROWS_AS(parse_config_file(no_eq), ConfigError);

    CHECK_THROWS_AS(parse_config_file("/nonexistent/segkc.cfg"), ConfigError);
}

TEST_CASE("resolved config round-trips through the parser") {
    RunConfig cfg;
    cfg.seed = 321;
    cfg.noise_sigma = 0.275;
    cfg.ratio = "1/4";
    cfg.lambda3 = 0.75;

    std::stringstream ss;
    write_resolved_config(ss, cfg);
    const std::string path = write_temp_config(ss.str());
    const RunConfig back = parse_config_file(path);

    std::stringstream again;
    write_resolved_config(again, back);
    CHECK(again.str() == ss.str());
}

TEST_CASE("cross-field validation") {
    RunConfig cfg;
    cfg.image_size = 60;  // not divisible by 2^3
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = RunConfig{};
    cfg.conf_tau = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = RunConfig{};
    cfg.ratio = "1/5";
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = RunConfig{};
    cfg.kd_on = "sometimes";
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = RunConfig{};
    cfg.fusion = "sum";
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = RunConfig{};
    cfg.crop_size = 30;  // not a multiple of the output stride
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = RunConfig{};
    cfg.kd_temperature = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("presets build the ablation grids") {
    RunConfig base;
    base.junior_width = 8;
    base.senior_width = 16;

    const auto t5 = make_preset("table5", base);
    REQUIRE(t5.size() == 3);
    CHECK(t5[0].name == "sup");
    CHECK(t5[0].config.lambda2 == 0.0);
    CHECK(t5[0].config.lambda3 == 0.0);
    CHECK(t5[1].name == "sup_con");
    CHECK(t5[1].config.lambda2 == base.lambda2);
    CHECK(t5[1].config.lambda3 == 0.0);
    CHECK(t5[2].name == "sup_con_kd");
    CHECK(t5[2].config.lambda3 == base.lambda3);
    for (const auto& run : t5) CHECK(run.config.seed == base.seed);

    const auto t6 = make_preset("table6", base);
    REQUIRE(t6.size() == 2);
    CHECK(t6[0].name == "homo");
    CHECK(t6[0].config.senior_width == base.junior_width);
    CHECK(t6[1].name == "hetero");
    CHECK(t6[1].config.senior_width == 2 * base.junior_width);

    const auto t7 = make_preset("table7", base);
    REQUIRE(t7.size() == 2);
    CHECK(t7[0].config.senior_width == 2 * base.junior_width);
    CHECK(t7[1].config.senior_width == 4 * base.junior_width);
    CHECK(t7[0].config.junior_width == base.junior_width);
    CHECK(t7[1].config.junior_width == base.junior_width);

    CHECK(is_known_preset("table5"));
    CHECK_FALSE(is_known_preset("table9"));
    CHECK_THROWS_AS(make_preset("table9", base), ConfigError);
}

TEST_CASE("apply_override touches exactly the named key") {
    RunConfig cfg;
    apply_override(cfg, "optim.base_lr", "0.025");
    CHECK(cfg.base_lr == doctest::Approx(0.025));
    apply_override(cfg, "data.augment", "false");
    CHECK_FALSE(cfg.augment);
    CHECK_THROWS_AS(apply_override(cfg, "optim.lr", "1"), ConfigError);
    CHECK_THROWS_AS(apply_override(cfg, "data.augment", "maybe"), ConfigError);
}
