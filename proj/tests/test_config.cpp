#include <doctest.h>

#include <algorithm>
#include <sstream>

#include "fvi/config.hpp"
#include "fvi/error.hpp"

using namespace fvi;

TEST_SUITE("config") {
  TEST_CASE("defaults mirror the reference training setup") {
    const Config c;
    CHECK(c.rank == 20);
    CHECK(c.jitter == 1e-3);
    CHECK(c.noise_var == 0.1);
    CHECK(c.inducing_noise_var == 0.1);
    CHECK(c.momentum == 0.9);
    CHECK(c.weight_decay == 1e-4);
    CHECK(c.inducing_count == 1);
  }

  TEST_CASE("parsing: comments, whitespace, overrides") {
    std::istringstream in(
        "# toy run\n"
        "task = miniseg\n"
        "  epochs=7   # trailing comment\n"
        "\n"
        "lr = 2.5e-3\n"
        "data_scale = false\n");
    Config c = parse_config(in);
    CHECK(c.task == "miniseg");
    CHECK(c.epochs == 7);
    CHECK(c.lr == 2.5e-3);
    CHECK_FALSE(c.data_scale);
    apply_override(c, "epochs=9");
    CHECK(c.epochs == 9);
  }

  TEST_CASE("unknown keys and malformed values are rejected") {
    std::istringstream unknown("epochz = 3\n");
    CHECK_THROWS_AS(parse_config(unknown), DomainError);
    std::istringstream no_eq("epochs 3\n");
    CHECK_THROWS_AS(parse_config(no_eq), DomainError);
    Config c;
    CHECK_THROWS_AS(apply_override(c, "epochs=-1"), DomainError);
    CHECK_THROWS_AS(apply_override(c, "lr=fast"), DomainError);
    CHECK_THROWS_AS(apply_override(c, "lr=1e-3x"), DomainError);
    CHECK_THROWS_AS(apply_override(c, "data_scale=maybe"), DomainError);
    CHECK_THROWS_AS(apply_override(c, "epochs"), DomainError);
  }

  TEST_CASE("write then parse reproduces every key") {
    Config c;
    c.task = "minidepth";
    c.likelihood = "berhu";
    c.hidden = "conv:8,relu";
    c.lr = 0.1 + 0.2;  // not exactly representable in short decimal
    c.seed = 12345678901234ULL;
    std::stringstream ss;
    write_config(ss, c);
    const Config back = parse_config(ss);
    std::stringstream again;
    write_config(again, back);
    std::stringstream first;
    write_config(first, c);
    CHECK(again.str() == first.str());
    CHECK(back.lr == c.lr);
    CHECK(back.seed == c.seed);
    const auto keys = config_keys();
    CHECK(std::find(keys.begin(), keys.end(), "output_dir") != keys.end());
    for (const auto& k : keys) CHECK(first.str().find(k + " = ") != std::string::npos);
  }

  TEST_CASE("hidden layer strings") {
    const auto layers = parse_hidden("dense:64, relu,conv:32,upsample:2");
    REQUIRE(layers.size() == 4);
    CHECK(layers[0].kind == LayerKind::Dense);
    CHECK(layers[0].units == 64);
    CHECK(layers[1].kind == LayerKind::Relu);
    CHECK(layers[2].kind == LayerKind::Conv);
    CHECK(layers[3].scale == 2);
    CHECK_THROWS_AS(parse_hidden("pool:2"), DomainError);
    CHECK_THROWS_AS(parse_hidden("dense:"), DomainError);
  }

  TEST_CASE("task wiring") {
    Config c;
    CHECK(config_likelihood(c).tag == FamilyTag::Gaussian);
    c.task = "miniseg";
    CHECK(config_likelihood(c).tag == FamilyTag::Boltzmann);
    c.likelihood = "laplace";
    CHECK_THROWS_AS(config_likelihood(c), DomainError);
    c.likelihood.clear();
    c.prior_mean = 1.0;
    c.noise_var = 0.2;
    const ArchSpec arch = config_arch(c);
    CHECK(arch.prior_mean == 1.0);
    CHECK(arch.noise_var == 0.2);
    c.hidden = "conv:4,relu";
    c.rank = 2;
    const FviModel m = config_model(c);
    CHECK(m.task == TaskKind::Classification);
    CHECK(m.classes() == 3);
    CHECK(m.family.rank() == 2);
    c.task = "imagenet";
    CHECK_THROWS_AS(config_arch(c), DomainError);
    c.task = "minidepth";
    c.arch = "/nonexistent/arch.txt";
    CHECK_THROWS_AS(config_arch(c), DomainError);
  }

  TEST_CASE("train settings carry over") {
    Config c;
    c.batch_size = 7;
    c.lr_decay = 0.99;
    c.seed = 4;
    const TrainConfig t = config_train(c);
    CHECK(t.batch_size == 7);
    CHECK(t.lr_decay == 0.99);
    CHECK(t.seed == 4);
    CHECK(t.inducing_noise_var == 0.1);
  }
}
