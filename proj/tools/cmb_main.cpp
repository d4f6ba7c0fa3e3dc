#include "cmb/runtime.hpp"

#include <cstdio>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "cmb/config.hpp"
#include "cmb/data.hpp"
#include "cmb/model.hpp"
#include "cmb/train.hpp"
#include "cmb/verify.hpp"

namespace {

const std::vector<std::string> kConfigKeys = {
    "ablation",     "k",         "d_text", "d_z",    "d_c", "n_tokens", "channels",
    "c_compressed", "psi_depth", "seed",   "epochs", "lr",  "batch",    "threshold",
    "image_size"};

struct ConfigArgs {
    std::string config_path;
    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option*> options;
};

void add_config_flags(CLI::App* cmd, ConfigArgs& args) {
    cmd->add_option("--config", args.config_path, "plain-text key=value config file");
    for (const auto& key : kConfigKeys)
        args.options[key] =
            cmd->add_option("--" + key, args.values[key], "override config key '" + key + "'");
}

// defaults < config file < CMB_SEED < explicit flags
cmb::RunConfig build_config(const ConfigArgs& args) {
    cmb::RunConfig cfg;
    if (!args.config_path.empty()) cfg = cmb::load_config(args.config_path, cfg);
    cmb::apply_env(cfg);
    for (const auto& key : kConfigKeys) {
        auto it = args.options.find(key);
        if (it != args.options.end() && it->second->count() > 0)
            cmb::set_config_key(cfg, key, args.values.at(key));
    }
    return cfg;
}

void print_eval(const cmb::EvalResult& result, double threshold) {
    for (size_t i = 0; i < result.images.size(); ++i) {
        const auto& pe = result.images[i];
        nlohmann::ordered_json j;
        j["index"] = i;
        j["f1"] = pe.f1;
        j["iou"] = pe.iou;
        j["matched"] = pe.matched;
        if (pe.ambiguity >= 0.0) j["ambiguity"] = pe.ambiguity;
        std::cout << j.dump() << "\n";
    }
    nlohmann::ordered_json s;
    s["n"] = result.images.size();
    s["threshold"] = threshold;
    s["f1"] = result.f1;
    s["iou"] = result.iou;
    std::cout << s.dump() << "\n";
}

} // namespace

int main(int argc, char** argv) {
    cmb::tune_allocator();
    CLI::App app{"multimodal boundary-preserving tamper localization, desk scale"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic tampered-image dataset");
    ConfigArgs gen_cfg;
    std::string gen_out;
    int gen_n = 100;
    add_config_flags(gen, gen_cfg);
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--n", gen_n, "number of samples");

    auto* tr = app.add_subcommand("train", "train a model on a generated dataset");
    ConfigArgs tr_cfg;
    std::string tr_data, tr_val, tr_out;
    add_config_flags(tr, tr_cfg);
    tr->add_option("--data", tr_data, "training dataset directory")->required();
    tr->add_option("--val", tr_val, "validation dataset directory");
    tr->add_option("--out", tr_out, "output directory for checkpoint and metrics")->required();

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    std::string ev_ckpt, ev_data, ev_dump;
    double ev_threshold = -1.0;
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint directory")->required();
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--threshold", ev_threshold, "binarization threshold (0,1)");
    ev->add_option("--dump", ev_dump, "write per-image prediction/boundary PGMs here");

    auto* vf = app.add_subcommand("verify", "run the module invariant suite");
    uint64_t vf_seed = 1;
    vf->add_option("--seed", vf_seed, "seed for the verification instances");

    auto* ab = app.add_subcommand("ablate", "train and evaluate all four ablations");
    ConfigArgs ab_cfg;
    std::string ab_data, ab_val, ab_out;
    add_config_flags(ab, ab_cfg);
    ab->add_option("--data", ab_data, "training dataset directory")->required();
    ab->add_option("--val", ab_val, "held-out dataset directory")->required();
    ab->add_option("--out", ab_out, "output root directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            cmb::RunConfig cfg = build_config(gen_cfg);
            cmb::gen_dataset(gen_out, gen_n, cfg.seed, cfg.image_size, cfg.n_tokens, cfg.d_text);
            nlohmann::ordered_json j;
            j["dataset"] = gen_out;
            j["n"] = gen_n;
            j["seed"] = cfg.seed;
            j["size"] = cfg.image_size;
            std::cout << j.dump() << "\n";
        } else if (tr->parsed()) {
            cmb::RunConfig cfg = build_config(tr_cfg);
            cmb::TrainResult result = cmb::train(cfg, tr_data, tr_val, tr_out);
            for (const auto& e : result.epochs) {
                nlohmann::ordered_json j;
                j["epoch"] = e.epoch;
                j["loss"] = e.loss;
                if (e.val_f1 >= 0.0) {
                    j["val_f1"] = e.val_f1;
                    j["val_iou"] = e.val_iou;
                }
                std::cout << j.dump() << "\n";
            }
            if (result.aborted_non_finite) {
                std::cerr << "training aborted on a non-finite loss; last finite state saved to "
                          << result.checkpoint_dir << "\n";
                return 2;
            }
            nlohmann::ordered_json j;
            j["checkpoint"] = result.checkpoint_dir;
            std::cout << j.dump() << "\n";
        } else if (ev->parsed()) {
            cmb::CmbNet model = cmb::CmbNet::from_checkpoint(ev_ckpt);
            double threshold = ev_threshold > 0.0 ? ev_threshold : model.config.threshold;
            cmb::EvalResult result = cmb::evaluate(model, ev_data, threshold, ev_dump);
            print_eval(result, threshold);
        } else if (vf->parsed()) {
            auto checks = cmb::run_verification(vf_seed);
            int failures = cmb::print_report(checks, std::cout);
            return failures == 0 ? 0 : 1;
        } else if (ab->parsed()) {
            using cmb::Ablation;
            for (Ablation a :
                 {Ablation::B, Ablation::B_RED, Ablation::B_RED_ITIM, Ablation::FULL}) {
                cmb::RunConfig cfg = build_config(ab_cfg);
                cfg.ablation = a;
                std::string tag = cmb::to_string(a);
                for (auto& ch : tag)
                    if (ch == '+') ch = '_';
                std::string out_dir = ab_out + "/" + tag;
                cmb::TrainResult tr_result = cmb::train(cfg, ab_data, "", out_dir);
                if (tr_result.aborted_non_finite) {
                    std::cerr << "ablation " << cmb::to_string(a) << " aborted on NaN\n";
                    return 2;
                }
                cmb::CmbNet model = cmb::CmbNet::from_checkpoint(tr_result.checkpoint_dir);
                cmb::EvalResult result = cmb::evaluate(model, ab_val, cfg.threshold);
                nlohmann::ordered_json j;
                j["ablation"] = cmb::to_string(a);
                j["f1"] = result.f1;
                j["iou"] = result.iou;
                j["checkpoint"] = tr_result.checkpoint_dir;
                std::cout << j.dump() << "\n";
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
