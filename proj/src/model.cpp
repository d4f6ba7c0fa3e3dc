#include "cmb/model.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "cmb/serialize.hpp"

namespace fs = std::filesystem;

namespace cmb {

CmbNet::CmbNet(const RunConfig& cfg, Rng& rng) : config(cfg) {
    encoder_ = StubVisualEncoder(cfg.channels, rng);
    fuser_ = PyramidFuser(cfg.channels, rng);
    if (cfg.ablation == Ablation::FULL)
        itcam_.emplace(cfg.channels.c5, cfg.n_tokens, cfg.d_c, cfg.d_z, cfg.k, rng);
    if (cfg.ablation == Ablation::FULL || cfg.ablation == Ablation::B_RED_ITIM)
        itim_.emplace(cfg.channels.c5, cfg.d_text, rng);
    compression_ = ChannelCompression(
        {cfg.channels.c1, cfg.channels.c2, cfg.channels.c3, cfg.channels.c4}, cfg.c_compressed,
        rng);
    if (cfg.ablation == Ablation::B)
        plain_.emplace(cfg.channels.c5, cfg.c_compressed, cfg.psi_depth, rng);
    else
        red_.emplace(cfg.channels.c5, cfg.c_compressed, cfg.psi_depth, rng);
}

ModelOutputs CmbNet::forward(const Tensor& image, const Tensor& text, Rng* eps_rng,
                             bool training) {
    ModelOutputs out;
    FeaturePyramid p = encoder_.forward(image);
    out.l5 = fuser_.forward(p.l2, p.l3, p.l4, training);

    Tensor text_in = text;
    if (itcam_) {
        out.ambiguity = itcam_->forward(text, out.l5, training ? eps_rng : nullptr);
        text_in = out.ambiguity->t_a;
    }
    out.o = itim_ ? itim_->forward(out.l5, text_in).o : out.l5;

    std::array<Tensor, 4> compressed =
        compression_.forward({p.l1, p.l2, p.l3, p.l4}, training);
    out.blocks = red_ ? red_->decode(out.o, compressed, training)
                      : plain_->decode(out.o, compressed, training);
    return out;
}

ParamList CmbNet::named_tensors() {
    ParamList out;
    encoder_.params("encoder", out);
    fuser_.params("fuser", out);
    if (itcam_) itcam_->params("itcam", out);
    if (itim_) itim_->params("itim", out);
    compression_.params("compression", out);
    if (red_) red_->params("red", out);
    if (plain_) plain_->params("plain", out);
    return out;
}

std::vector<Tensor> CmbNet::trainables() {
    std::vector<Tensor> out;
    for (auto& nt : named_tensors())
        if (nt.is_param) out.push_back(nt.tensor);
    return out;
}

void CmbNet::save_checkpoint(const std::string& dir) {
    fs::create_directories(dir);
    ParamList tensors = named_tensors();
    nlohmann::ordered_json manifest;
    manifest["format"] = "cmb-checkpoint";
    manifest["version"] = 1;
    manifest["config"] = nlohmann::json::parse(config_to_json(config));
    nlohmann::ordered_json entries = nlohmann::ordered_json::array();
    for (size_t i = 0; i < tensors.size(); ++i) {
        char file[32];
        std::snprintf(file, sizeof(file), "p%04zu.cmbt", i);
        save_tensor((fs::path(dir) / file).string(), tensors[i].tensor);
        nlohmann::ordered_json e;
        e["name"] = tensors[i].name;
        e["file"] = file;
        e["kind"] = tensors[i].is_param ? "param" : "buffer";
        entries.push_back(e);
    }
    manifest["tensors"] = entries;
    std::ofstream f(fs::path(dir) / "manifest.json");
    if (!f) throw IoError("cannot write checkpoint manifest in " + dir);
    f << manifest.dump(2) << "\n";
}

CmbNet CmbNet::from_checkpoint(const std::string& dir) {
    std::ifstream f(fs::path(dir) / "manifest.json");
    if (!f) throw IoError("cannot read checkpoint manifest in " + dir);
    nlohmann::json manifest = nlohmann::json::parse(f);
    if (manifest.value("format", "") != "cmb-checkpoint")
        throw FormatError(dir + ": not a checkpoint manifest");
    RunConfig cfg = config_from_json(manifest.at("config").dump());
    Rng rng(cfg.seed);
    CmbNet model(cfg, rng);
    ParamList tensors = model.named_tensors();
    const auto& entries = manifest.at("tensors");
    if (entries.size() != tensors.size())
        throw FormatError(dir + ": checkpoint holds " + std::to_string(entries.size()) +
                          " tensors, model expects " + std::to_string(tensors.size()));
    for (size_t i = 0; i < tensors.size(); ++i) {
        const auto& e = entries[i];
        if (e.at("name").get<std::string>() != tensors[i].name)
            throw FormatError(dir + ": tensor order mismatch at index " + std::to_string(i));
        Tensor loaded = load_tensor((fs::path(dir) / e.at("file").get<std::string>()).string());
        if (loaded.shape() != tensors[i].tensor.shape())
            throw ShapeError(dir + ": shape mismatch for " + tensors[i].name + ", " +
                             shape_str(loaded.shape()) + " vs " +
                             shape_str(tensors[i].tensor.shape()));
        std::memcpy(tensors[i].tensor.data(), loaded.data(), sizeof(double) * loaded.size());
    }
    return model;
}

} // namespace cmb
