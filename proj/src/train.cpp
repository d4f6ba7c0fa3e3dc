#include "cmb/train.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "cmb/data.hpp"
#include "cmb/image_io.hpp"
#include "cmb/losses.hpp"
#include "cmb/metrics.hpp"
#include "cmb/optim.hpp"

namespace fs = std::filesystem;

namespace cmb {

namespace {

Tensor upsample2x_plain(const Tensor& m) {
    int64_t h = m.dim(0), w = m.dim(1);
    std::vector<double> out(static_cast<size_t>(4 * h * w));
    for (int64_t i = 0; i < 2 * h; ++i)
        for (int64_t j = 0; j < 2 * w; ++j) out[i * 2 * w + j] = m.at({i / 2, j / 2});
    return Tensor::from_data({2 * h, 2 * w}, std::move(out));
}

} // namespace

EvalResult evaluate(CmbNet& model, const std::string& data_dir, double threshold,
                    const std::string& dump_dir) {
    if (threshold <= 0.0 || threshold >= 1.0)
        throw ValueError("evaluate: threshold must lie in (0,1)");
    if (!dump_dir.empty()) fs::create_directories(dump_dir);
    NoGradGuard guard;
    EvalResult result;
    auto entries = read_manifest(data_dir);
    for (size_t idx = 0; idx < entries.size(); ++idx) {
        const auto& entry = entries[idx];
        SyntheticSample s = load_sample(data_dir, entry);
        ModelOutputs out = model.forward(s.image, s.text.t, nullptr, /*training=*/false);
        const Tensor& m1 = out.blocks[3].m;
        Tensor prob = sigmoid(reshape(m1, {m1.dim(1), m1.dim(2)}));
        while (prob.dim(0) < s.mask.dim(0)) prob = upsample2x_plain(prob);
        if (prob.shape() != s.mask.shape())
            throw ShapeError("evaluate: prediction grid " + shape_str(prob.shape()) +
                             " cannot reach ground truth " + shape_str(s.mask.shape()));
        if (!dump_dir.empty()) {
            char name[32];
            std::snprintf(name, sizeof(name), "pred_%04zu.pgm", idx);
            save_pgm((fs::path(dump_dir) / name).string(), prob);
            if (out.blocks[3].e.defined()) {
                std::snprintf(name, sizeof(name), "edge_%04zu.pgm", idx);
                save_pgm((fs::path(dump_dir) / name).string(), sigmoid(out.blocks[3].e));
            }
        }
        SegMetrics m = seg_metrics(binarize(prob, threshold), s.mask);
        PerImageEval pe;
        pe.f1 = m.f1;
        pe.iou = m.iou;
        pe.matched = s.matched;
        if (out.ambiguity) pe.ambiguity = out.ambiguity->a.item();
        result.images.push_back(pe);
        result.f1 += m.f1;
        result.iou += m.iou;
    }
    if (!result.images.empty()) {
        result.f1 /= static_cast<double>(result.images.size());
        result.iou /= static_cast<double>(result.images.size());
    }
    return result;
}

TrainResult train(const RunConfig& cfg, const std::string& data_dir, const std::string& val_dir,
                  const std::string& out_dir) {
    fs::create_directories(out_dir);
    std::ofstream log(fs::path(out_dir) / "metrics.jsonl");
    if (!log) throw IoError("cannot write metrics log in " + out_dir);

    Rng init_rng(cfg.seed);
    CmbNet model(cfg, init_rng);
    Rng eps_rng(Rng::mix(cfg.seed, 0x5eed0001));
    Rng shuffle_rng(Rng::mix(cfg.seed, 0x5eed0002));

    auto entries = read_manifest(data_dir);
    if (entries.empty()) throw ValueError("train: dataset " + data_dir + " is empty");
    std::vector<SyntheticSample> samples;
    samples.reserve(entries.size());
    for (const auto& e : entries) samples.push_back(load_sample(data_dir, e));

    Adam opt(model.trainables(), cfg.lr);
    TrainResult result;
    result.checkpoint_dir = (fs::path(out_dir) / "checkpoint").string();

    std::vector<size_t> order(samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        // Fisher-Yates from the run's shuffle stream
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.next() % i]);

        double epoch_loss = 0.0;
        int64_t n_batches = 0;
        for (size_t start = 0; start < order.size(); start += cfg.batch) {
            size_t end = std::min(order.size(), start + cfg.batch);
            double inv = 1.0 / static_cast<double>(end - start);
            opt.zero_grad();
            double batch_loss = 0.0;
            for (size_t b = start; b < end; ++b) {
                SyntheticSample& s = samples[order[b]];
                ModelOutputs out = model.forward(s.image, s.text.t, &eps_rng, /*training=*/true);
                Tensor loss = mul_scalar(total_loss(out.blocks, s.mask), inv);
                batch_loss += loss.item();
                loss.backward();
            }
            if (!std::isfinite(batch_loss)) {
                // save the last finite state and stop; the poisoned step is
                // never applied
                result.aborted_non_finite = true;
                model.save_checkpoint(result.checkpoint_dir);
                nlohmann::ordered_json j;
                j["event"] = "abort";
                j["reason"] = "non-finite loss";
                j["epoch"] = epoch;
                log << j.dump() << "\n";
                return result;
            }
            opt.step();
            result.batch_losses.push_back(batch_loss);
            epoch_loss += batch_loss;
            ++n_batches;
        }

        EpochLog el;
        el.epoch = epoch;
        el.loss = epoch_loss / static_cast<double>(n_batches);
        nlohmann::ordered_json j;
        j["epoch"] = el.epoch;
        j["loss"] = el.loss;
        if (!val_dir.empty()) {
            EvalResult val = evaluate(model, val_dir, cfg.threshold);
            el.val_f1 = val.f1;
            el.val_iou = val.iou;
            j["val_f1"] = val.f1;
            j["val_iou"] = val.iou;
        }
        log << j.dump() << "\n";
        log.flush();
        result.epochs.push_back(el);
    }
    model.save_checkpoint(result.checkpoint_dir);
    return result;
}

} // namespace cmb
