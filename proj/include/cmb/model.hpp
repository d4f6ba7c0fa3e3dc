#pragma once

#include <optional>
#include <string>

#include "cmb/config.hpp"
#include "cmb/features.hpp"
#include "cmb/itcam.hpp"
#include "cmb/itim.hpp"
#include "cmb/red.hpp"

namespace cmb {

struct ModelOutputs {
    std::array<DecoderBlockOutput, 4> blocks; // DB4..DB1; blocks[3].m is the finest mask
    std::optional<AmbiguityResult> ambiguity; // engaged only with the gate built
    Tensor l5;
    Tensor o;
};

// The full network under a runtime-selected ablation. Modules excluded by the
// ablation are never constructed, so e.g. B+RED+ITIM cannot read an ambiguity
// value by construction.
class CmbNet {
public:
    CmbNet() = default;
    CmbNet(const RunConfig& cfg, Rng& rng);

    ModelOutputs forward(const Tensor& image, const Tensor& text, Rng* eps_rng, bool training);

    ParamList named_tensors();           // params + buffers
    std::vector<Tensor> trainables();    // optimizer view

    bool has_itcam() const { return itcam_.has_value(); }
    bool has_itim() const { return itim_.has_value(); }
    bool has_red() const { return red_.has_value(); }

    void save_checkpoint(const std::string& dir);
    static CmbNet from_checkpoint(const std::string& dir);

    RunConfig config;

private:
    StubVisualEncoder encoder_;
    PyramidFuser fuser_;
    std::optional<AmbiguityGate> itcam_;
    std::optional<Itim> itim_;
    ChannelCompression compression_;
    std::optional<Red> red_;
    std::optional<PlainDecoder> plain_;
};

} // namespace cmb
