#include <doctest.h>

#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "dsmpc/config.hpp"

using namespace dsmpc;
using nlohmann::json;

namespace {

json preset_doc() {
    json doc;
    doc["system"] = {{"preset", "three-room"}};
    doc["seed"] = 11;
    doc["mode"] = "distributed";
    return doc;
}

json inline_doc() {
    json agent = {
        {"A_ii", {{0.5}}},
        {"B", {{1.0}}},
        {"C", {{1.0}}},
        {"state_constraints", {{"A", {{1.0}, {-1.0}}}, {"b", {5.0, 5.0}}}},
        {"input_constraints", {{"A", {{1.0}, {-1.0}}}, {"b", {2.0, 2.0}}}},
        {"K", {{0.0}}},
        {"Q", {{1.0}}},
        {"R", {{1.0}}},
        {"P", {{1.0}}},
        {"x0", {0.5}},
        {"noise",
         {{"w_nominal", {{0.0}, {0.0}}},
          {"w_band_fraction", 0.0},
          {"delta_stddev", 0.0},
          {"delta_cap", 0.0}}},
    };
    json second = agent;
    second["couplings"] = {{"0", {{0.2}}}};
    json doc;
    doc["system"] = {{"agents", {agent, second}}};
    doc["horizon"] = 2;
    doc["budget"] = {{"epsilon", 0.2}, {"beta", 0.05}};
    return doc;
}

}  // namespace

TEST_CASE("preset config parses into the three-room network") {
    const auto cfg = config::parse_config(preset_doc());
    CHECK(cfg.network.agent_count() == 3);
    CHECK(cfg.network.epsilon == 0.05);
    CHECK(cfg.seed == 11);
    CHECK(cfg.mode.kind == mpc::ControllerKind::Distributed);
    CHECK(cfg.x0[0](0) == 21.0);
    CHECK_FALSE(cfg.fingerprint.empty());
}

TEST_CASE("inline agents config builds a custom network") {
    const auto cfg = config::parse_config(inline_doc());
    CHECK(cfg.network.agent_count() == 2);
    CHECK(cfg.network.horizon == 2);
    CHECK(cfg.network.epsilon == 0.2);
    const auto agents = cfg.network.build_agents();
    CHECK(agents[1].neighbors == std::vector<int>{0});
    CHECK(agents[0].neighbors.empty());
}

TEST_CASE("unknown keys are rejected at every level") {
    auto doc = preset_doc();
    doc["surprise"] = 1;
    CHECK_THROWS_AS(config::parse_config(doc), ConfigError);

    doc = preset_doc();
    doc["system"]["extra"] = true;
    CHECK_THROWS_AS(config::parse_config(doc), ConfigError);

    doc = preset_doc();
    doc["budget"] = {{"epsilon", 0.05}, {"beta", 0.01}, {"gamma", 0.5}};
    CHECK_THROWS_AS(config::parse_config(doc), ConfigError);

    doc = inline_doc();
    doc["system"]["agents"][0]["mystery"] = 3;
    CHECK_THROWS_AS(config::parse_config(doc), ConfigError);

    doc = preset_doc();
    doc["soft"] = {{"alpha_target", 0.85}, {"typo", 1}};
    CHECK_THROWS_AS(config::parse_config(doc), ConfigError);
}

TEST_CASE("range violations are rejected") {
    auto doc = preset_doc();
    doc["budget"] = {{"epsilon", 1.5}, {"beta", 0.01}};
    CHECK_THROWS_AS(config::parse_config(doc), ConfigError);

    doc = preset_doc();
    doc["sim_steps"] = 0;
    CHECK_THROWS_AS(config::parse_config(doc), ConfigError);

    doc = preset_doc();
    doc["mode"] = "telepathic";
    CHECK_THROWS_AS(config::parse_config(doc), ConfigError);

    doc = preset_doc();
    doc["system"] = {{"preset", "three-room"}, {"agents", json::array()}};
    CHECK_THROWS_AS(config::parse_config(doc), ConfigError);
}

TEST_CASE("fingerprint is canonical") {
    auto doc = preset_doc();
    const auto a = config::parse_config(doc);

    // Same content, different construction order.
    json doc2;
    doc2["mode"] = "distributed";
    doc2["seed"] = 11;
    doc2["system"] = {{"preset", "three-room"}};
    const auto b = config::parse_config(doc2);
    CHECK(a.fingerprint == b.fingerprint);

    json doc3 = preset_doc();
    doc3["seed"] = 12;
    const auto c = config::parse_config(doc3);
    CHECK(a.fingerprint != c.fingerprint);
}

TEST_CASE("resolved document re-validates (summary embedding round-trip)") {
    const auto cfg = config::parse_config(inline_doc());
    const json resolved = json::parse(cfg.resolved);
    CHECK_NOTHROW(config::validate_document(resolved));
}

TEST_CASE("shipped schema file matches the embedded text") {
    std::ifstream in("schema/experiment.schema.json");
    if (!in) in.open("../schema/experiment.schema.json");
    if (!in) in.open("../../schema/experiment.schema.json");
    REQUIRE(in.good());
    std::ostringstream os;
    os << in.rdbuf();
    CHECK(os.str() == config::schema_text());
    // And it is valid JSON.
    CHECK_NOTHROW(json::parse(config::schema_text()));
}
