#include "cmb/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cmb/errors.hpp"

namespace cmb {

std::string to_string(Ablation a) {
    switch (a) {
        case Ablation::B: return "B";
        case Ablation::B_RED: return "B+RED";
        case Ablation::B_RED_ITIM: return "B+RED+ITIM";
        case Ablation::FULL: return "FULL";
    }
    return "?";
}

Ablation ablation_from_string(const std::string& s) {
    if (s == "B") return Ablation::B;
    if (s == "B+RED" || s == "B_RED") return Ablation::B_RED;
    if (s == "B+RED+ITIM" || s == "B_RED_ITIM") return Ablation::B_RED_ITIM;
    if (s == "FULL") return Ablation::FULL;
    throw ValueError("unknown ablation '" + s + "' (expected B, B+RED, B+RED+ITIM or FULL)");
}

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::vector<int64_t> parse_int_list(const std::string& v) {
    std::vector<int64_t> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stoll(trim(item)));
    return out;
}

} // namespace

void set_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    try {
        if (key == "ablation") cfg.ablation = ablation_from_string(value);
        else if (key == "k") cfg.k = std::stoi(value);
        else if (key == "d_text") cfg.d_text = std::stoll(value);
        else if (key == "d_z") cfg.d_z = std::stoll(value);
        else if (key == "d_c") cfg.d_c = std::stoll(value);
        else if (key == "n_tokens") cfg.n_tokens = std::stoll(value);
        else if (key == "c_compressed") cfg.c_compressed = std::stoll(value);
        else if (key == "psi_depth") cfg.psi_depth = std::stoi(value);
        else if (key == "seed") cfg.seed = std::stoull(value);
        else if (key == "epochs") cfg.epochs = std::stoi(value);
        else if (key == "lr") cfg.lr = std::stod(value);
        else if (key == "batch") cfg.batch = std::stoi(value);
        else if (key == "threshold") cfg.threshold = std::stod(value);
        else if (key == "image_size") cfg.image_size = std::stoll(value);
        else if (key == "channels") {
            auto v = parse_int_list(value);
            if (v.size() != 5)
                throw ValueError("channels needs 5 entries c1,c2,c3,c4,c5, got " + value);
            cfg.channels = FeatureChannels{v[0], v[1], v[2], v[3], v[4]};
        } else {
            throw ValueError("unknown config key '" + key + "'");
        }
    } catch (const std::invalid_argument&) {
        throw ValueError("bad value '" + value + "' for config key '" + key + "'");
    }
    if (key == "threshold" && (cfg.threshold <= 0.0 || cfg.threshold >= 1.0))
        throw ValueError("threshold must lie in (0,1)");
}

RunConfig parse_config_text(const std::string& text, RunConfig base) {
    std::stringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos) throw ValueError("config line without '=': " + line);
        set_config_key(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return base;
}

RunConfig load_config(const std::string& path, RunConfig base) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str(), base);
}

void apply_env(RunConfig& cfg) {
    if (const char* s = std::getenv("CMB_SEED")) cfg.seed = std::stoull(s);
}

std::string config_to_json(const RunConfig& cfg) {
    nlohmann::ordered_json j;
    j["ablation"] = to_string(cfg.ablation);
    j["k"] = cfg.k;
    j["d_text"] = cfg.d_text;
    j["d_z"] = cfg.d_z;
    j["d_c"] = cfg.d_c;
    j["n_tokens"] = cfg.n_tokens;
    j["channels"] = {cfg.channels.c1, cfg.channels.c2, cfg.channels.c3, cfg.channels.c4,
                     cfg.channels.c5};
    j["c_compressed"] = cfg.c_compressed;
    j["psi_depth"] = cfg.psi_depth;
    j["seed"] = cfg.seed;
    j["epochs"] = cfg.epochs;
    j["lr"] = cfg.lr;
    j["batch"] = cfg.batch;
    j["threshold"] = cfg.threshold;
    j["image_size"] = cfg.image_size;
    return j.dump();
}

RunConfig config_from_json(const std::string& json_text) {
    nlohmann::json j = nlohmann::json::parse(json_text);
    RunConfig cfg;
    cfg.ablation = ablation_from_string(j.at("ablation").get<std::string>());
    cfg.k = j.at("k").get<int>();
    cfg.d_text = j.at("d_text").get<int64_t>();
    cfg.d_z = j.at("d_z").get<int64_t>();
    cfg.d_c = j.at("d_c").get<int64_t>();
    cfg.n_tokens = j.at("n_tokens").get<int64_t>();
    auto ch = j.at("channels");
    cfg.channels = FeatureChannels{ch[0].get<int64_t>(), ch[1].get<int64_t>(),
                                   ch[2].get<int64_t>(), ch[3].get<int64_t>(),
                                   ch[4].get<int64_t>()};
    cfg.c_compressed = j.at("c_compressed").get<int64_t>();
    cfg.psi_depth = j.at("psi_depth").get<int>();
    cfg.seed = j.at("seed").get<uint64_t>();
    cfg.epochs = j.at("epochs").get<int>();
    cfg.lr = j.at("lr").get<double>();
    cfg.batch = j.at("batch").get<int>();
    cfg.threshold = j.at("threshold").get<double>();
    cfg.image_size = j.at("image_size").get<int64_t>();
    return cfg;
}

} // namespace cmb
