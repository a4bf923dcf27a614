#include "dsmpc/config.hpp"

#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "dsmpc/casestudy.hpp"

namespace dsmpc::config {

namespace {

void require_keys(const json& obj, const std::string& where,
                  const std::set<std::string>& allowed,
                  const std::set<std::string>& required = {}) {
    if (!obj.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [key, value] : obj.items()) {
        (void)value;
        if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
    }
    for (const auto& key : required) {
        if (!obj.contains(key)) throw ConfigError(where + ": missing key '" + key + "'");
    }
}

double get_number(const json& obj, const std::string& where, const std::string& key,
                  double lo, double hi, double fallback, bool open_interval = false) {
    if (!obj.contains(key)) return fallback;
    const json& v = obj.at(key);
    if (!v.is_number()) throw ConfigError(where + "." + key + ": expected a number");
    const double x = v.get<double>();
    const bool ok = open_interval ? (x > lo && x < hi) : (x >= lo && x <= hi);
    if (!ok) throw ConfigError(where + "." + key + ": out of range");
    return x;
}

int get_int(const json& obj, const std::string& where, const std::string& key, int lo,
            int fallback) {
    if (!obj.contains(key)) return fallback;
    const json& v = obj.at(key);
    if (!v.is_number_integer()) throw ConfigError(where + "." + key + ": expected an integer");
    const int x = v.get<int>();
    if (x < lo) throw ConfigError(where + "." + key + ": out of range");
    return x;
}

std::string get_string(const json& obj, const std::string& where, const std::string& key,
                       const std::string& fallback) {
    if (!obj.contains(key)) return fallback;
    if (!obj.at(key).is_string()) throw ConfigError(where + "." + key + ": expected a string");
    return obj.at(key).get<std::string>();
}

Eigen::MatrixXd parse_matrix(const json& v, const std::string& where) {
    if (!v.is_array() || v.empty()) throw ConfigError(where + ": expected a non-empty matrix");
    const std::size_t rows = v.size();
    if (!v[0].is_array()) throw ConfigError(where + ": expected an array of rows");
    const std::size_t cols = v[0].size();
    Eigen::MatrixXd m(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        if (!v[r].is_array() || v[r].size() != cols) {
            throw ConfigError(where + ": ragged matrix");
        }
        for (std::size_t c = 0; c < cols; ++c) {
            if (!v[r][c].is_number()) throw ConfigError(where + ": non-numeric entry");
            m(static_cast<int>(r), static_cast<int>(c)) = v[r][c].get<double>();
        }
    }
    return m;
}

Eigen::VectorXd parse_vector(const json& v, const std::string& where) {
    if (!v.is_array()) throw ConfigError(where + ": expected an array");
    Eigen::VectorXd out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!v[i].is_number()) throw ConfigError(where + ": non-numeric entry");
        out(static_cast<int>(i)) = v[i].get<double>();
    }
    return out;
}

model::Polytope parse_polytope(const json& v, const std::string& where) {
    require_keys(v, where, {"A", "b"}, {"A", "b"});
    model::Polytope poly;
    poly.A = parse_matrix(v.at("A"), where + ".A");
    poly.b = parse_vector(v.at("b"), where + ".b");
    if (poly.A.rows() != poly.b.size()) throw ConfigError(where + ": A rows vs b length");
    return poly;
}

void validate_noise(const json& v, const std::string& where, bool nominal_required) {
    std::set<std::string> required = {"w_band_fraction", "delta_stddev", "delta_cap"};
    if (nominal_required) required.insert("w_nominal");
    require_keys(v, where,
                 {"w_nominal", "w_band_fraction", "delta_mean", "delta_stddev", "delta_cap"},
                 required);
    get_number(v, where, "w_band_fraction", 0.0, 1e9, 0.0);
    get_number(v, where, "delta_stddev", 0.0, 1e9, 0.0);
    get_number(v, where, "delta_cap", 0.0, 1e9, 0.0);
}

void validate_agent(const json& v, const std::string& where) {
    require_keys(v, where,
                 {"A_ii", "B", "C", "couplings", "state_constraints", "input_constraints", "K",
                  "Q", "R", "P", "x0", "noise"},
                 {"A_ii", "B", "C", "state_constraints", "input_constraints", "K", "Q", "R", "P",
                  "x0", "noise"});
    parse_matrix(v.at("A_ii"), where + ".A_ii");
    parse_matrix(v.at("B"), where + ".B");
    parse_matrix(v.at("C"), where + ".C");
    if (v.contains("couplings")) {
        if (!v.at("couplings").is_object()) throw ConfigError(where + ".couplings: object");
        for (const auto& [key, mat] : v.at("couplings").items()) {
            try {
                (void)std::stoi(key);
            } catch (...) {
                throw ConfigError(where + ".couplings: keys must be agent indices");
            }
            parse_matrix(mat, where + ".couplings." + key);
        }
    }
    parse_polytope(v.at("state_constraints"), where + ".state_constraints");
    parse_polytope(v.at("input_constraints"), where + ".input_constraints");
    parse_matrix(v.at("K"), where + ".K");
    parse_matrix(v.at("Q"), where + ".Q");
    parse_matrix(v.at("R"), where + ".R");
    parse_matrix(v.at("P"), where + ".P");
    parse_vector(v.at("x0"), where + ".x0");
    validate_noise(v.at("noise"), where + ".noise", true);
}

}  // namespace

void validate_document(const json& doc) {
    require_keys(doc, "config",
                 {"system", "horizon", "sim_steps", "budget", "noise_overrides", "mode", "soft",
                  "admm", "cost_scenario_cap", "seed", "mc_draws", "max_retries", "out_dir",
                  "serialize_messages"},
                 {"system"});

    const json& system = doc.at("system");
    require_keys(system, "system", {"preset", "agents"});
    if (system.contains("preset") == system.contains("agents")) {
        throw ConfigError("system: exactly one of 'preset' or 'agents' is required");
    }
    if (system.contains("preset")) {
        if (system.at("preset").get<std::string>() != "three-room") {
            throw ConfigError("system.preset: unknown preset");
        }
    } else {
        const json& agents = system.at("agents");
        if (!agents.is_array() || agents.empty()) {
            throw ConfigError("system.agents: expected a non-empty array");
        }
        for (std::size_t i = 0; i < agents.size(); ++i) {
            validate_agent(agents[i], "system.agents[" + std::to_string(i) + "]");
        }
    }

    get_int(doc, "config", "horizon", 1, 4);
    get_int(doc, "config", "sim_steps", 1, 24);
    if (doc.contains("budget")) {
        const json& budget = doc.at("budget");
        require_keys(budget, "budget", {"epsilon", "beta", "weights"}, {"epsilon", "beta"});
        get_number(budget, "budget", "epsilon", 0.0, 1.0, 0.05, true);
        get_number(budget, "budget", "beta", 0.0, 1.0, 0.01, true);
        if (budget.contains("weights") && !budget.at("weights").is_array()) {
            throw ConfigError("budget.weights: expected an array");
        }
    }
    if (doc.contains("noise_overrides")) {
        validate_noise(doc.at("noise_overrides"), "noise_overrides", false);
    }
    const std::string mode = get_string(doc, "config", "mode", "distributed");
    if (mode != "centralized" && mode != "distributed" && mode != "softcomm" &&
        mode != "decoupled") {
        throw ConfigError("mode: expected centralized|distributed|softcomm|decoupled");
    }
    if (doc.contains("soft")) {
        const json& soft = doc.at("soft");
        require_keys(soft, "soft",
                     {"beta_tilde", "alpha_target", "sample_count", "centering", "dimension"});
        get_number(soft, "soft", "beta_tilde", 0.0, 1.0, 0.01, true);
        get_number(soft, "soft", "alpha_target", 0.0, 1.0, 0.85, true);
        get_int(soft, "soft", "sample_count", 0, 0);
        const std::string centering = get_string(soft, "soft", "centering", "midrange");
        if (centering != "midrange" && centering != "origin") {
            throw ConfigError("soft.centering: expected midrange|origin");
        }
        const std::string dim = get_string(soft, "soft", "dimension", "trajectory");
        if (dim != "trajectory" && dim != "state") {
            throw ConfigError("soft.dimension: expected trajectory|state");
        }
    }
    if (doc.contains("admm")) {
        const json& admm = doc.at("admm");
        require_keys(admm, "admm", {"mu", "tolerance", "max_iterations"});
        get_number(admm, "admm", "mu", 0.0, 1e12, 1.0, true);
        get_number(admm, "admm", "tolerance", 0.0, 1e12, 1e-4, true);
        get_int(admm, "admm", "max_iterations", 1, 500);
    }
    get_int(doc, "config", "cost_scenario_cap", 1, 20);
    if (doc.contains("seed")) {
        if (!doc.at("seed").is_number_unsigned() && !doc.at("seed").is_number_integer()) {
            throw ConfigError("seed: expected an unsigned integer");
        }
        if (doc.at("seed").is_number_integer() && doc.at("seed").get<long long>() < 0) {
            throw ConfigError("seed: expected a non-negative integer");
        }
    }
    get_int(doc, "config", "mc_draws", 1, 10000);
    get_int(doc, "config", "max_retries", 0, 5);
    get_string(doc, "config", "out_dir", "out");
    if (doc.contains("serialize_messages") && !doc.at("serialize_messages").is_boolean()) {
        throw ConfigError("serialize_messages: expected a boolean");
    }
}

ExperimentConfig parse_config(const json& doc) {
    validate_document(doc);
    ExperimentConfig cfg;

    const int horizon = get_int(doc, "config", "horizon", 1, 4);
    const json& system = doc.at("system");

    if (system.contains("preset")) {
        casestudy::ThreeRoomOptions options;
        options.horizon = horizon;
        if (doc.contains("budget")) {
            options.epsilon = doc.at("budget").at("epsilon").get<double>();
            options.beta = doc.at("budget").at("beta").get<double>();
        }
        if (doc.contains("noise_overrides")) {
            const json& noise = doc.at("noise_overrides");
            options.w_band_fraction =
                get_number(noise, "noise_overrides", "w_band_fraction", 0.0, 1e9, 0.01);
            options.delta_cap = get_number(noise, "noise_overrides", "delta_cap", 0.0, 1e9, 1e-4);
            options.delta_stddev =
                get_number(noise, "noise_overrides", "delta_stddev", 0.0, 1e9, 1.0);
        }
        cfg.network = casestudy::three_room(options);
    } else {
        mpc::Network net;
        net.horizon = horizon;
        const json& agents = system.at("agents");
        for (std::size_t i = 0; i < agents.size(); ++i) {
            const json& a = agents[i];
            const std::string where = "system.agents[" + std::to_string(i) + "]";
            mpc::AgentBlock blk;
            blk.A_ii = parse_matrix(a.at("A_ii"), where);
            blk.B = parse_matrix(a.at("B"), where);
            blk.C = parse_matrix(a.at("C"), where);
            if (a.contains("couplings")) {
                for (const auto& [key, mat] : a.at("couplings").items()) {
                    blk.couplings[std::stoi(key)] = parse_matrix(mat, where);
                }
            }
            blk.state_polytope = parse_polytope(a.at("state_constraints"), where);
            blk.input_polytope = parse_polytope(a.at("input_constraints"), where);
            blk.K = parse_matrix(a.at("K"), where);
            blk.Q = parse_matrix(a.at("Q"), where);
            blk.R = parse_matrix(a.at("R"), where);
            blk.P = parse_matrix(a.at("P"), where);
            blk.x0 = parse_vector(a.at("x0"), where);
            const json& noise = a.at("noise");
            blk.process.w_nominal = parse_matrix(noise.at("w_nominal"), where + ".noise");
            blk.process.w_band_fraction = noise.at("w_band_fraction").get<double>();
            blk.process.delta_mean =
                noise.contains("delta_mean") ? noise.at("delta_mean").get<double>() : 0.0;
            blk.process.delta_stddev = noise.at("delta_stddev").get<double>();
            blk.process.delta_cap = noise.at("delta_cap").get<double>();
            net.blocks.push_back(std::move(blk));
        }
        if (doc.contains("budget")) {
            net.epsilon = doc.at("budget").at("epsilon").get<double>();
            net.beta = doc.at("budget").at("beta").get<double>();
        }
        cfg.network = std::move(net);
    }

    if (doc.contains("budget") && doc.at("budget").contains("weights")) {
        cfg.network.budget_weights.clear();
        for (const auto& w : doc.at("budget").at("weights")) {
            cfg.network.budget_weights.push_back(w.get<double>());
        }
    }
    cfg.network.cost_scenario_cap = get_int(doc, "config", "cost_scenario_cap", 1, 20);

    for (const auto& blk : cfg.network.blocks) cfg.x0.push_back(blk.x0);

    const std::string mode = get_string(doc, "config", "mode", "distributed");
    if (mode == "centralized") cfg.mode.kind = mpc::ControllerKind::Centralized;
    if (mode == "distributed") cfg.mode.kind = mpc::ControllerKind::Distributed;
    if (mode == "softcomm") cfg.mode.kind = mpc::ControllerKind::SoftComm;
    if (mode == "decoupled") cfg.mode.kind = mpc::ControllerKind::Decoupled;
    if (doc.contains("soft")) {
        const json& soft = doc.at("soft");
        cfg.mode.soft.beta_tilde = get_number(soft, "soft", "beta_tilde", 0.0, 1.0, 0.01, true);
        cfg.mode.soft.alpha_target =
            get_number(soft, "soft", "alpha_target", 0.0, 1.0, 0.85, true);
        cfg.mode.soft.sample_count = get_int(soft, "soft", "sample_count", 0, 0);
        cfg.mode.soft.centering = get_string(soft, "soft", "centering", "midrange") == "origin"
                                      ? softcomm::BoxCentering::OriginSymmetric
                                      : softcomm::BoxCentering::SampleMeanCentered;
        cfg.mode.soft.dimension = get_string(soft, "soft", "dimension", "trajectory") == "state"
                                      ? softcomm::BoxDimension::PaperLiteralState
                                      : softcomm::BoxDimension::FullTrajectory;
    }
    if (doc.contains("admm")) {
        const json& admm = doc.at("admm");
        cfg.options.exchange.mu = get_number(admm, "admm", "mu", 0.0, 1e12, 1.0, true);
        cfg.options.exchange.default_tolerance =
            get_number(admm, "admm", "tolerance", 0.0, 1e12, 1e-4, true);
        cfg.options.exchange.max_iterations = get_int(admm, "admm", "max_iterations", 1, 500);
    }
    cfg.options.max_retries = get_int(doc, "config", "max_retries", 0, 5);
    if (doc.contains("serialize_messages")) {
        cfg.options.serialize_messages = doc.at("serialize_messages").get<bool>();
    }

    cfg.sim_steps = get_int(doc, "config", "sim_steps", 1, 24);
    cfg.seed = doc.contains("seed") ? doc.at("seed").get<std::uint64_t>() : 0;
    cfg.mc_draws = get_int(doc, "config", "mc_draws", 1, 10000);
    cfg.out_dir = get_string(doc, "config", "out_dir", "out");

    cfg.resolved = doc.dump();
    cfg.fingerprint = fingerprint_hex(cfg.resolved);
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    json doc;
    try {
        in >> doc;
    } catch (const std::exception& e) {
        throw ConfigError("config parse error: " + std::string(e.what()));
    }
    return parse_config(doc);
}

std::uint64_t fnv1a64(const std::string& text) {
    std::uint64_t hash = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        hash ^= c;
        hash *= 0x100000001b3ULL;
    }
    return hash;
}

std::string fingerprint_hex(const std::string& text) {
    std::ostringstream os;
    os << std::hex << fnv1a64(text);
    return os.str();
}

std::string schema_text() {
    // Kept in sync with schema/experiment.schema.json (tested).
    return R"SCHEMA({
  "$schema": "http://json-schema.org/draft-07/schema#",
  "title": "dsmpc experiment configuration",
  "type": "object",
  "additionalProperties": false,
  "required": ["system"],
  "properties": {
    "system": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "preset": {"type": "string", "enum": ["three-room"]},
        "agents": {"type": "array", "minItems": 1, "items": {"$ref": "#/definitions/agent"}}
      }
    },
    "horizon": {"type": "integer", "minimum": 1},
    "sim_steps": {"type": "integer", "minimum": 1},
    "budget": {
      "type": "object",
      "additionalProperties": false,
      "required": ["epsilon", "beta"],
      "properties": {
        "epsilon": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "beta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "weights": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}}
      }
    },
    "noise_overrides": {"$ref": "#/definitions/noise_params"},
    "mode": {"type": "string", "enum": ["centralized", "distributed", "softcomm", "decoupled"]},
    "soft": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "beta_tilde": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "alpha_target": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "sample_count": {"type": "integer", "minimum": 0},
        "centering": {"type": "string", "enum": ["midrange", "origin"]},
        "dimension": {"type": "string", "enum": ["trajectory", "state"]}
      }
    },
    "admm": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "mu": {"type": "number", "exclusiveMinimum": 0},
        "tolerance": {"type": "number", "exclusiveMinimum": 0},
        "max_iterations": {"type": "integer", "minimum": 1}
      }
    },
    "cost_scenario_cap": {"type": "integer", "minimum": 1},
    "seed": {"type": "integer", "minimum": 0},
    "mc_draws": {"type": "integer", "minimum": 1},
    "max_retries": {"type": "integer", "minimum": 0},
    "out_dir": {"type": "string"},
    "serialize_messages": {"type": "boolean"}
  },
  "definitions": {
    "matrix": {"type": "array", "minItems": 1, "items": {"type": "array", "items": {"type": "number"}}},
    "vector": {"type": "array", "items": {"type": "number"}},
    "polytope": {
      "type": "object",
      "additionalProperties": false,
      "required": ["A", "b"],
      "properties": {"A": {"$ref": "#/definitions/matrix"}, "b": {"$ref": "#/definitions/vector"}}
    },
    "noise_params": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "w_nominal": {"$ref": "#/definitions/matrix"},
        "w_band_fraction": {"type": "number", "minimum": 0},
        "delta_mean": {"type": "number"},
        "delta_stddev": {"type": "number", "minimum": 0},
        "delta_cap": {"type": "number", "minimum": 0}
      }
    },
    "agent": {
      "type": "object",
      "additionalProperties": false,
      "required": ["A_ii", "B", "C", "state_constraints", "input_constraints",
                   "K", "Q", "R", "P", "x0", "noise"],
      "properties": {
        "A_ii": {"$ref": "#/definitions/matrix"},
        "B": {"$ref": "#/definitions/matrix"},
        "C": {"$ref": "#/definitions/matrix"},
        "couplings": {"type": "object", "additionalProperties": {"$ref": "#/definitions/matrix"}},
        "state_constraints": {"$ref": "#/definitions/polytope"},
        "input_constraints": {"$ref": "#/definitions/polytope"},
        "K": {"$ref": "#/definitions/matrix"},
        "Q": {"$ref": "#/definitions/matrix"},
        "R": {"$ref": "#/definitions/matrix"},
        "P": {"$ref": "#/definitions/matrix"},
        "x0": {"$ref": "#/definitions/vector"},
        "noise": {
          "allOf": [{"$ref": "#/definitions/noise_params"}],
          "required": ["w_nominal", "w_band_fraction", "delta_stddev", "delta_cap"]
        }
      }
    }
  }
}
)SCHEMA";
}

}  // namespace dsmpc::config
