#include "logodiffuser/trace.hpp"

#include <string>

#include "logodiffuser/error.hpp"
#include "logodiffuser/hash.hpp"

namespace logodiffuser {

AttentionTrace::AttentionTrace(int steps, int layers, int heads, int n_img, std::vector<double> t_values,
                               std::vector<float> logits, std::vector<float> probabilities, std::uint64_t config_hash)
    : steps_(steps),
      layers_(layers),
      heads_(heads),
      n_img_(n_img),
      t_values_(std::move(t_values)),
      logits_(std::move(logits)),
      probabilities_(std::move(probabilities)),
      config_hash_(config_hash) {
    if (steps < 0 || layers <= 0 || heads <= 0 || n_img <= 0) {
        throw Error(Errc::InvalidArgument, "trace dimensions must be positive");
    }
    const std::size_t expected = map_count() * static_cast<std::size_t>(n_img) * static_cast<std::size_t>(n_img);
    if (t_values_.size() != static_cast<std::size_t>(steps) || logits_.size() != expected ||
        probabilities_.size() != expected) {
        throw Error(Errc::ShapeMismatch, "trace payload does not match its dimensions");
    }
    Fnv1a h;
    h.update_value(steps_).update_value(layers_).update_value(heads_).update_value(n_img_);
    h.update_value(config_hash_);
    h.update_span(std::span<const double>(t_values_));
    h.update_span(std::span<const float>(logits_));
    h.update_span(std::span<const float>(probabilities_));
    checksum_ = h.digest();
}

std::size_t AttentionTrace::offset(int step, int layer, int head) const {
    if (step < 0 || step >= steps_ || layer < 0 || layer >= layers_ || head < 0 || head >= heads_) {
        throw Error(Errc::IndexOutOfRange, "trace index (" + std::to_string(step) + ", " + std::to_string(layer) +
                                               ", " + std::to_string(head) + ") out of range");
    }
    const std::size_t n2 = static_cast<std::size_t>(n_img_) * n_img_;
    return ((static_cast<std::size_t>(step) * layers_ + layer) * heads_ + head) * n2;
}

ConstMatrixView<float> AttentionTrace::logits(int step, int layer, int head) const {
    const auto n = static_cast<std::size_t>(n_img_);
    return {logits_.data() + offset(step, layer, head), n, n};
}

ConstMatrixView<float> AttentionTrace::probabilities(int step, int layer, int head) const {
    const auto n = static_cast<std::size_t>(n_img_);
    return {probabilities_.data() + offset(step, layer, head), n, n};
}

TensorFile AttentionTrace::to_file() const {
    TensorFile f;
    f.meta["kind"] = "trace";
    f.meta["config_hash"] = hex64(config_hash_);
    f.meta["checksum"] = hex64(checksum_);
    f.meta["steps"] = std::to_string(steps_);
    f.meta["layers"] = std::to_string(layers_);
    f.meta["heads"] = std::to_string(heads_);
    f.meta["n_img"] = std::to_string(n_img_);
    const auto n = static_cast<std::size_t>(n_img_);
    std::vector<std::size_t> shape{static_cast<std::size_t>(steps_), static_cast<std::size_t>(layers_),
                                   static_cast<std::size_t>(heads_), n, n};
    f.add<double>("t_values", t_values_, {static_cast<std::size_t>(steps_)});
    f.add<float>("i2i_logits", logits_, shape);
    f.add<float>("i2i_probabilities", probabilities_, shape);
    return f;
}

AttentionTrace AttentionTrace::from_file(const TensorFile& f) {
    if (f.meta.count("kind") == 0 || f.meta.at("kind") != "trace") {
        throw Error(Errc::MalformedHeader, "not an attention trace");
    }
    AttentionTrace t(std::stoi(f.meta_at("steps")), std::stoi(f.meta_at("layers")), std::stoi(f.meta_at("heads")),
                     std::stoi(f.meta_at("n_img")), f.get<double>("t_values"), f.get<float>("i2i_logits"),
                     f.get<float>("i2i_probabilities"), std::stoull(f.meta_at("config_hash"), nullptr, 16));
    if (f.meta.count("checksum") && f.meta.at("checksum") != hex64(t.checksum())) {
        throw Error(Errc::TraceMismatch, "trace payload does not match its recorded checksum");
    }
    return t;
}

}  // namespace logodiffuser
