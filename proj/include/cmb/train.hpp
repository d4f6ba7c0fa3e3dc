#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "cmb/model.hpp"

namespace cmb {

struct EpochLog {
    int epoch = 0;
    double loss = 0.0;
    double val_f1 = -1.0; // negative when no validation set was given
    double val_iou = -1.0;
};

struct TrainResult {
    std::vector<EpochLog> epochs;
    std::vector<double> batch_losses; // every optimizer step, in order
    bool aborted_non_finite = false;
    std::string checkpoint_dir;
};

struct PerImageEval {
    double f1 = 0.0, iou = 0.0;
    bool matched = true;
    double ambiguity = -1.0; // -1 when the model has no gate
};

struct EvalResult {
    double f1 = 0.0, iou = 0.0;
    std::vector<PerImageEval> images;
};

// Gradient-descent training of the configured model on a generated dataset
// directory. Writes the checkpoint and a line-delimited JSON metrics log
// under out_dir; a non-finite loss aborts with the last finite state saved.
TrainResult train(const RunConfig& cfg, const std::string& data_dir, const std::string& val_dir,
                  const std::string& out_dir);

// Deterministic inference over a dataset: the finest mask logits are squashed,
// upsampled to the ground-truth grid and binarized at the threshold. When
// dump_dir is non-empty, per-image sigmoid maps are written there as 8-bit
// PGM (pred_NNNN.pgm, and edge_NNNN.pgm when the decoder emits boundaries).
EvalResult evaluate(CmbNet& model, const std::string& data_dir, double threshold,
                    const std::string& dump_dir = "");

} // namespace cmb
